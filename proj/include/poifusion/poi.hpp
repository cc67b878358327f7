#pragma once

// Point-of-interest generation: a holistic box transform predicted from the
// query feature, center + corner anchors of the transformed box, and
// per-group point shifts.

#include <array>
#include <cmath>
#include <vector>

#include "poifusion/adamw.hpp"
#include "poifusion/geometry.hpp"
#include "poifusion/model_config.hpp"
#include "poifusion/ops.hpp"
#include "poifusion/tensor.hpp"

namespace poifusion {

inline constexpr std::size_t kBoxParams = 8;

/// [t_x, t_y, t_z, t_w, t_l, t_h, t_sin, t_cos]; dims are log-scale.
struct BoxDelta {
  double tx = 0, ty = 0, tz = 0, tw = 0, tl = 0, th = 0, tsin = 0, tcos = 0;
  std::array<double, 8> to_array() const { return {tx, ty, tz, tw, tl, th, tsin, tcos}; }
};

inline Box3D transform_box(const Box3D& b, const BoxDelta& d) {
  return {b.x + d.tx,          b.y + d.ty,          b.z + d.tz,         b.w * std::exp(d.tw),
          b.l * std::exp(d.tl), b.h * std::exp(d.th), b.sin_theta + d.tsin, b.cos_theta + d.tcos};
}

namespace ops {

/// Row-wise transform_box over [R×8] boxes and [R×8] deltas.
inline Tensor transform_boxes(Tape& tape, const Tensor& boxes, const Tensor& deltas) {
  if (boxes.rank() != 2 || boxes.dim(1) != kBoxParams || deltas.shape() != boxes.shape())
    throw DimensionError("transform_boxes: expected matching [R x 8] tensors, got " + shape_str(boxes.shape()) +
                         " and " + shape_str(deltas.shape()));
  const std::size_t rows = boxes.dim(0);
  Tensor out(boxes.shape());
  std::vector<double> scale(rows * 3);
  auto b = boxes.data();
  auto d = deltas.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t k = r * kBoxParams;
    for (std::size_t i : {0, 1, 2, 6, 7}) o[k + i] = b[k + i] + d[k + i];
    for (std::size_t i = 3; i < 6; ++i) {
      scale[r * 3 + i - 3] = std::exp(d[k + i]);
      o[k + i] = b[k + i] * scale[r * 3 + i - 3];
    }
  }
  if (detail::tracks({&boxes, &deltas})) {
    out.set_requires_grad(true);
    tape.record([boxes, deltas, out, scale = std::move(scale), rows]() mutable {
      auto g = out.grad();
      auto o = out.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t k = r * kBoxParams;
        for (std::size_t i : {0, 1, 2, 6, 7}) {
          if (boxes.requires_grad()) boxes.grad()[k + i] += g[k + i];
          if (deltas.requires_grad()) deltas.grad()[k + i] += g[k + i];
        }
        for (std::size_t i = 3; i < 6; ++i) {
          if (boxes.requires_grad()) boxes.grad()[k + i] += g[k + i] * scale[r * 3 + i - 3];
          if (deltas.requires_grad()) deltas.grad()[k + i] += g[k + i] * o[k + i];
        }
      }
    });
  }
  return out;
}

/// [R×8] boxes -> [R×P×3] anchors: the center, then (for center_and_corners)
/// the 8 corners in canonical order.
inline Tensor anchor_points(Tape& tape, const Tensor& boxes, AnchorSet set) {
  if (boxes.rank() != 2 || boxes.dim(1) != kBoxParams)
    throw DimensionError("anchor_points: expected [R x 8] boxes, got " + shape_str(boxes.shape()));
  const std::size_t rows = boxes.dim(0);
  const std::size_t p = set == AnchorSet::center_only ? 1 : 9;
  Tensor out(Shape{rows, p, 3});
  auto b = boxes.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* bx = b.data() + r * kBoxParams;
    double* op = o.data() + r * p * 3;
    op[0] = bx[0], op[1] = bx[1], op[2] = bx[2];
    if (p == 1) continue;
    if (!(bx[3] > 0 && bx[4] > 0 && bx[5] > 0)) throw GeometryError("anchor_points: non-positive box dimension");
    const double rho = std::hypot(bx[6], bx[7]);
    if (rho == 0.0) throw GeometryError("degenerate heading: (sin, cos) = (0, 0)");
    const double s = bx[6] / rho, c = bx[7] / rho;
    for (std::size_t i = 0; i < 8; ++i) {
      const double lx = kCornerSigns[i][0] * 0.5 * bx[4];
      const double ly = kCornerSigns[i][1] * 0.5 * bx[3];
      const double lz = kCornerSigns[i][2] * 0.5 * bx[5];
      double* q = op + (i + 1) * 3;
      q[0] = bx[0] + c * lx - s * ly;
      q[1] = bx[1] + s * lx + c * ly;
      q[2] = bx[2] + lz;
    }
  }
  if (detail::tracks({&boxes})) {
    out.set_requires_grad(true);
    tape.record([boxes, out, rows, p]() mutable {
      auto g = out.grad();
      auto b = boxes.data();
      auto gb = boxes.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* bx = b.data() + r * kBoxParams;
        const double* gp = g.data() + r * p * 3;
        double* gr = gb.data() + r * kBoxParams;
        for (std::size_t i = 0; i < p; ++i) {
          gr[0] += gp[i * 3 + 0];
          gr[1] += gp[i * 3 + 1];
          gr[2] += gp[i * 3 + 2];
        }
        if (p == 1) continue;
        const double rho = std::hypot(bx[6], bx[7]);
        const double s = bx[6] / rho, c = bx[7] / rho;
        const double r3 = rho * rho * rho;
        const double dc_ds = -bx[7] * bx[6] / r3, dc_dc = bx[6] * bx[6] / r3;
        const double ds_ds = bx[7] * bx[7] / r3, ds_dc = -bx[6] * bx[7] / r3;
        for (std::size_t i = 0; i < 8; ++i) {
          const double* gq = gp + (i + 1) * 3;
          const double sx = kCornerSigns[i][0], sy = kCornerSigns[i][1], sz = kCornerSigns[i][2];
          const double lx = sx * 0.5 * bx[4], ly = sy * 0.5 * bx[3];
          // w enters through ly, l through lx, h through lz.
          gr[3] += gq[0] * (-s * sy * 0.5) + gq[1] * (c * sy * 0.5);
          gr[4] += gq[0] * (c * sx * 0.5) + gq[1] * (s * sx * 0.5);
          gr[5] += gq[2] * sz * 0.5;
          const double dxd_c = lx, dxd_s = -ly;  // d(corner x)/d(c), /d(s)
          const double dyd_c = ly, dyd_s = lx;
          const double gc = gq[0] * dxd_c + gq[1] * dyd_c;
          const double gs = gq[0] * dxd_s + gq[1] * dyd_s;
          gr[6] += gc * dc_ds + gs * ds_ds;
          gr[7] += gc * dc_dc + gs * ds_dc;
        }
      }
    });
  }
  return out;
}

}  // namespace ops

/// Two sibling linear heads on the query feature.
struct PoiHeads {
  Tensor box_w, box_b;      // C × 8 (or C × 8G with per-group transforms)
  Tensor shift_w, shift_b;  // C × (G·P·3)

  static PoiHeads zeros(const ModelConfig& cfg) {
    const std::size_t c = cfg.channels;
    const std::size_t box_out = kBoxParams * (cfg.per_group_box_transform ? cfg.groups : 1);
    const std::size_t shift_out = static_cast<std::size_t>(cfg.pois_per_query()) * 3;
    return {Tensor(Shape{c, box_out}, true), Tensor(Shape{box_out}, true), Tensor(Shape{c, shift_out}, true),
            Tensor(Shape{shift_out}, true)};
  }

  template <class F>
  void visit(F&& f) {
    f("poi.box_w", box_w);
    f("poi.box_b", box_b);
    f("poi.shift_w", shift_w);
    f("poi.shift_b", shift_b);
  }
};

struct PoiDeltas {
  Tensor box;    // Q × 8 (or Q × 8G)
  Tensor shift;  // Q × (G·P·3)
};

inline PoiDeltas predict_deltas(Tape& tape, const Tensor& feats, const PoiHeads& heads) {
  return {ops::linear(tape, feats, heads.box_w, heads.box_b), ops::linear(tape, feats, heads.shift_w, heads.shift_b)};
}

/// PoIs for all queries as [Q × G·P × 3], group-major then anchor index.
inline Tensor generate_pois(Tape& tape, const Tensor& boxes, const Tensor& feats, const PoiHeads& heads,
                            const ModelConfig& cfg) {
  const std::size_t q = boxes.dim(0);
  const std::size_t g = cfg.groups, p = cfg.anchors_per_group();
  if (cfg.poi_mode == PoiMode::anchors_only) {
    return ops::tile_middle(tape, ops::anchor_points(tape, boxes, cfg.anchors), g);
  }
  const PoiDeltas d = predict_deltas(tape, feats, heads);
  Tensor pois;
  if (cfg.per_group_box_transform) {
    Tensor per_group_boxes = ops::repeat_rows(tape, boxes, g);
    Tensor per_group_deltas = ops::reshape(tape, d.box, {q * g, kBoxParams});
    Tensor anchors = ops::anchor_points(tape, ops::transform_boxes(tape, per_group_boxes, per_group_deltas), cfg.anchors);
    pois = ops::reshape(tape, anchors, {q, g * p, 3});
  } else {
    pois = ops::tile_middle(tape, ops::anchor_points(tape, ops::transform_boxes(tape, boxes, d.box), cfg.anchors), g);
  }
  if (cfg.poi_mode == PoiMode::box_transform_and_shift)
    pois = ops::add(tape, pois, ops::reshape(tape, d.shift, {q, g * p, 3}));
  return pois;
}

}  // namespace poifusion
