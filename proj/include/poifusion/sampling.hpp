#pragma once

// Projection + bilinear sampling of the BEV map and the per-camera image
// pyramids, and softmax aggregation of the image scales.
//
// Bilinear convention: feature cell centers sit at integer coordinates; a
// sample at (u, v) (column, row) blends the four surrounding cells, and
// neighbors outside the map contribute zero.

#include <cmath>
#include <cstdint>
#include <vector>

#include "poifusion/adamw.hpp"
#include "poifusion/features.hpp"
#include "poifusion/geometry.hpp"
#include "poifusion/model_config.hpp"
#include "poifusion/ops.hpp"
#include "poifusion/random.hpp"
#include "poifusion/tensor.hpp"

namespace poifusion {

namespace detail {

struct BilinearTaps {
  long x0 = 0, y0 = 0;
  double fx = 0.0, fy = 0.0;
};

inline BilinearTaps bilinear_taps(double u, double v) {
  const double x0 = std::floor(u), y0 = std::floor(v);
  return {static_cast<long>(x0), static_cast<long>(y0), u - x0, v - y0};
}

inline double map_at(const double* plane, long h, long w, long y, long x) {
  return (x < 0 || y < 0 || x >= w || y >= h) ? 0.0 : plane[y * w + x];
}

/// Bilinear sample of channels [c0, c0+n) at (u, v), written to out.
inline void bilinear_read(std::span<const double> map, long h, long w, std::size_t c0, std::size_t n, double u,
                          double v, double* out) {
  const BilinearTaps t = bilinear_taps(u, v);
  const double w00 = (1 - t.fx) * (1 - t.fy), w01 = t.fx * (1 - t.fy);
  const double w10 = (1 - t.fx) * t.fy, w11 = t.fx * t.fy;
  const std::size_t plane = static_cast<std::size_t>(h * w);
  for (std::size_t c = 0; c < n; ++c) {
    const double* pl = map.data() + (c0 + c) * plane;
    out[c] = w00 * map_at(pl, h, w, t.y0, t.x0) + w01 * map_at(pl, h, w, t.y0, t.x0 + 1) +
             w10 * map_at(pl, h, w, t.y0 + 1, t.x0) + w11 * map_at(pl, h, w, t.y0 + 1, t.x0 + 1);
  }
}

/// Backward of bilinear_read: returns (dL/du, dL/dv) and, when map_grad is
/// non-empty, scatters into the map gradient.
inline std::pair<double, double> bilinear_adjoint(std::span<const double> map, std::span<double> map_grad, long h,
                                                  long w, std::size_t c0, std::size_t n, double u, double v,
                                                  const double* g) {
  const BilinearTaps t = bilinear_taps(u, v);
  const std::size_t plane = static_cast<std::size_t>(h * w);
  double du = 0.0, dv = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    const double* pl = map.data() + (c0 + c) * plane;
    const double m00 = map_at(pl, h, w, t.y0, t.x0), m01 = map_at(pl, h, w, t.y0, t.x0 + 1);
    const double m10 = map_at(pl, h, w, t.y0 + 1, t.x0), m11 = map_at(pl, h, w, t.y0 + 1, t.x0 + 1);
    du += g[c] * ((1 - t.fy) * (m01 - m00) + t.fy * (m11 - m10));
    dv += g[c] * ((1 - t.fx) * (m10 - m00) + t.fx * (m11 - m01));
    if (!map_grad.empty()) {
      double* pg = map_grad.data() + (c0 + c) * plane;
      auto scatter = [&](long y, long x, double wgt) {
        if (x >= 0 && y >= 0 && x < w && y < h) pg[y * w + x] += g[c] * wgt;
      };
      scatter(t.y0, t.x0, (1 - t.fx) * (1 - t.fy));
      scatter(t.y0, t.x0 + 1, t.fx * (1 - t.fy));
      scatter(t.y0 + 1, t.x0, (1 - t.fx) * t.fy);
      scatter(t.y0 + 1, t.x0 + 1, t.fx * t.fy);
    }
  }
  return {du, dv};
}

}  // namespace detail

namespace ops {

/// [N×3] metric points -> [N×2] continuous BEV cell coordinates (m, n).
inline Tensor project_bev_points(Tape& tape, const Tensor& points, const BevGrid& grid) {
  if (points.rank() != 2 || points.dim(1) != 3)
    throw DimensionError("project_bev_points expects [N x 3], got " + shape_str(points.shape()));
  const std::size_t n = points.dim(0);
  Tensor out(Shape{n, 2});
  const double sx = 1.0 / grid.cell_x(), sy = 1.0 / grid.cell_y();
  for (std::size_t i = 0; i < n; ++i) {
    out[i * 2] = (points[i * 3] - grid.x_min) * sx;
    out[i * 2 + 1] = (points[i * 3 + 1] - grid.y_min) * sy;
  }
  if (detail::tracks({&points})) {
    out.set_requires_grad(true);
    tape.record([points, out, n, sx, sy]() mutable {
      auto g = out.grad();
      auto gp = points.grad();
      for (std::size_t i = 0; i < n; ++i) {
        gp[i * 3] += g[i * 2] * sx;
        gp[i * 3 + 1] += g[i * 2 + 1] * sy;
      }
    });
  }
  return out;
}

/// Bilinear samples of map [C×H×W] at coords [N×2] (u = column, v = row).
/// Row r reads channel group (r / rows_per_group) % groups, so the output is
/// [N × C/groups]. groups = rows_per_group = 1 samples all channels.
inline Tensor bilinear_grouped(Tape& tape, const Tensor& map, const Tensor& coords, std::size_t groups = 1,
                               std::size_t rows_per_group = 1) {
  if (map.rank() != 3) throw DimensionError("bilinear map must be [C x H x W], got " + shape_str(map.shape()));
  if (coords.rank() != 2 || coords.dim(1) != 2)
    throw DimensionError("bilinear coords must be [N x 2], got " + shape_str(coords.shape()));
  const std::size_t c = map.dim(0);
  if (groups == 0 || c % groups != 0) throw DimensionError("bilinear: channels not divisible by groups");
  const long h = static_cast<long>(map.dim(1)), w = static_cast<long>(map.dim(2));
  const std::size_t cg = c / groups, n = coords.dim(0);
  Tensor out(Shape{n, cg});
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t g = (r / rows_per_group) % groups;
    poifusion::detail::bilinear_read(map.data(), h, w, g * cg, cg, coords[r * 2], coords[r * 2 + 1], out.data().data() + r * cg);
  }
  if (detail::tracks({&map, &coords})) {
    out.set_requires_grad(true);
    tape.record([map, coords, out, h, w, cg, n, groups, rows_per_group]() mutable {
      auto g = out.grad();
      std::span<double> mg = map.requires_grad() ? map.grad() : std::span<double>{};
      for (std::size_t r = 0; r < n; ++r) {
        const std::size_t grp = (r / rows_per_group) % groups;
        const auto [du, dv] = poifusion::detail::bilinear_adjoint(map.data(), mg, h, w, grp * cg, cg, coords[r * 2],
                                                       coords[r * 2 + 1], g.data() + r * cg);
        if (coords.requires_grad()) {
          coords.grad()[r * 2] += du;
          coords.grad()[r * 2 + 1] += dv;
        }
      }
    });
  }
  return out;
}

/// Projects each point [N×3] into its selected camera (views[r], -1 = none)
/// and samples every pyramid level at (u, v)/stride. Output is
/// [N × levels × C/groups]; rows without a view are zero.
inline Tensor sample_image_levels(Tape& tape, const Tensor& points, const FeatureAtlas& atlas,
                                  const std::vector<CameraModel>& rig, std::vector<int> views, std::size_t groups,
                                  std::size_t rows_per_group) {
  if (points.rank() != 2 || points.dim(1) != 3)
    throw DimensionError("sample_image_levels expects [N x 3], got " + shape_str(points.shape()));
  const std::size_t n = points.dim(0);
  if (views.size() != n) throw DimensionError("sample_image_levels: one view index per point required");
  if (atlas.pyramids.size() != rig.size()) throw DimensionError("atlas camera count differs from rig");
  std::size_t c = 0;
  if (!atlas.pyramids.empty()) c = atlas.pyramids.front()[0].map.dim(0);
  if (c == 0) c = atlas.bev.dim(0);
  const std::size_t cg = c / groups;
  constexpr std::size_t kL = kPyramidLevels;
  Tensor out(Shape{n, kL, cg});
  for (std::size_t r = 0; r < n; ++r) {
    if (views[r] < 0) continue;
    const CameraModel& cam = rig.at(views[r]);
    const Vec3 p{points[r * 3], points[r * 3 + 1], points[r * 3 + 2]};
    const Vec3 q = cam.rotation * p + cam.translation;
    if (q[2] <= kNearPlane) {
      views[r] = -1;
      continue;
    }
    const double u = cam.fx() * q[0] / q[2] + cam.cx();
    const double v = cam.fy() * q[1] / q[2] + cam.cy();
    const std::size_t g = (r / rows_per_group) % groups;
    for (std::size_t l = 0; l < kL; ++l) {
      const PyramidLevel& lvl = atlas.pyramids[views[r]][l];
      const double s = lvl.stride;
      poifusion::detail::bilinear_read(lvl.map.data(), static_cast<long>(lvl.map.dim(1)), static_cast<long>(lvl.map.dim(2)),
                            g * cg, cg, u / s, v / s, out.data().data() + (r * kL + l) * cg);
    }
  }
  if (detail::tracks({&points})) {
    out.set_requires_grad(true);
    tape.record([points, out, atlas, rig, views = std::move(views), n, cg, groups, rows_per_group]() mutable {
      auto g = out.grad();
      for (std::size_t r = 0; r < n; ++r) {
        if (views[r] < 0) continue;
        const CameraModel& cam = rig[views[r]];
        const Vec3 p{points[r * 3], points[r * 3 + 1], points[r * 3 + 2]};
        const Vec3 q = cam.rotation * p + cam.translation;
        const double u = cam.fx() * q[0] / q[2] + cam.cx();
        const double v = cam.fy() * q[1] / q[2] + cam.cy();
        const std::size_t grp = (r / rows_per_group) % groups;
        double du = 0.0, dv = 0.0;
        for (std::size_t l = 0; l < kL; ++l) {
          const PyramidLevel& lvl = atlas.pyramids[views[r]][l];
          const double s = lvl.stride;
          const auto [a, b] = poifusion::detail::bilinear_adjoint(lvl.map.data(), {}, static_cast<long>(lvl.map.dim(1)),
                                                       static_cast<long>(lvl.map.dim(2)), grp * cg, cg, u / s, v / s,
                                                       g.data() + (r * kL + l) * cg);
          du += a / s;
          dv += b / s;
        }
        const double iz = 1.0 / q[2];
        for (int k = 0; k < 3; ++k) {
          const double dqx = cam.rotation[0][k], dqy = cam.rotation[1][k], dqz = cam.rotation[2][k];
          const double dudp = cam.fx() * (dqx * iz - q[0] * dqz * iz * iz);
          const double dvdp = cam.fy() * (dqy * iz - q[1] * dqz * iz * iz);
          points.grad()[r * 3 + k] += du * dudp + dv * dvdp;
        }
      }
    });
  }
  return out;
}

}  // namespace ops

/// Camera index per point: the only visible view, a counter-hashed uniform
/// choice among several (random mode) or the lowest index, or -1.
inline std::vector<int> choose_views(const Tensor& points, const std::vector<CameraModel>& rig, ViewSelection mode,
                                     std::uint64_t stream) {
  const std::size_t n = points.dim(0);
  std::vector<int> out(n, -1);
  for (std::size_t r = 0; r < n; ++r) {
    const Vec3 p{points[r * 3], points[r * 3 + 1], points[r * 3 + 2]};
    const std::vector<int> vis = visible_views(p, rig);
    if (vis.empty()) continue;
    if (vis.size() == 1 || mode == ViewSelection::lowest_index)
      out[r] = vis.front();
    else
      out[r] = vis[hash_combine(stream, r) % vis.size()];
  }
  return out;
}

/// Softmax-weighted sum over levels: samples [N×L×Cg], logits [N×L] -> [N×Cg].
inline Tensor aggregate_scales(Tape& tape, const Tensor& samples, const Tensor& logits) {
  const std::size_t n = samples.dim(0), l = samples.dim(1), cg = samples.dim(2);
  if (logits.rank() != 2 || logits.dim(0) != n || logits.dim(1) != l)
    throw DimensionError("aggregate_scales: logits " + shape_str(logits.shape()) + " vs samples " +
                         shape_str(samples.shape()));
  Tensor weights = ops::reshape(tape, ops::softmax(tape, logits), {n, 1, l});
  return ops::reshape(tape, ops::matmul(tape, weights, samples), {n, cg});
}

struct ScaleHead {
  Tensor w, b;  // C × (G·L) per query, or C × (G·P·L) per PoI

  static ScaleHead init(const ModelConfig& cfg, Rng& rng) {
    const std::size_t per = cfg.scale_logits == ScaleLogits::per_query ? cfg.groups : cfg.pois_per_query();
    const std::size_t out = per * kPyramidLevels;
    Tensor w(Shape{static_cast<std::size_t>(cfg.channels), out}, true);
    for (double& v : w.data()) v = rng.normal(0.0, cfg.init_std);
    return {w, Tensor(Shape{out}, true)};
  }

  template <class F>
  void visit(F&& f) {
    f("sampling.scale_w", w);
    f("sampling.scale_b", b);
  }
};

/// Per-PoI scale logits [Q·G·P × L].
inline Tensor scale_logits(Tape& tape, const Tensor& feats, const ScaleHead& head, const ModelConfig& cfg) {
  const std::size_t q = feats.dim(0);
  Tensor raw = ops::linear(tape, feats, head.w, head.b);
  if (cfg.scale_logits == ScaleLogits::per_poi)
    return ops::reshape(tape, raw, {q * cfg.pois_per_query(), kPyramidLevels});
  Tensor per_group = ops::reshape(tape, raw, {q * cfg.groups, kPyramidLevels});
  return ops::repeat_rows(tape, per_group, cfg.anchors_per_group());
}

struct SampledPairs {
  Tensor bev;    // N × Cg
  Tensor image;  // N × Cg
};

/// BEV and aggregated image features for every PoI row of `points` [N×3].
inline SampledPairs sample_pairs(Tape& tape, const Tensor& points, const FeatureAtlas& atlas,
                                 const std::vector<CameraModel>& rig, const BevGrid& grid, const Tensor& logits,
                                 const ModelConfig& cfg, std::uint64_t view_stream) {
  const std::size_t g = cfg.groups, p = cfg.anchors_per_group();
  Tensor bev = ops::bilinear_grouped(tape, atlas.bev, ops::project_bev_points(tape, points, grid), g, p);
  std::vector<int> views = choose_views(points, rig, cfg.view_selection, view_stream);
  Tensor levels = ops::sample_image_levels(tape, points, atlas, rig, std::move(views), g, p);
  return {bev, aggregate_scales(tape, levels, logits)};
}

}  // namespace poifusion
