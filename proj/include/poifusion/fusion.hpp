#pragma once

// Dynamic multi-modal fusion: per-PoI linear layers whose parameters are
// generated from the query feature, followed by canonical-order aggregation
// of all PoIs of a query and a residual update.
//
// Per group the first dynamic layer maps the concatenated pair (2·Cg) to Cg
// and the second maps Cg to Cg; summed over groups that is 2C -> C -> C.

#include <string>

#include "poifusion/adamw.hpp"
#include "poifusion/model_config.hpp"
#include "poifusion/ops.hpp"
#include "poifusion/random.hpp"
#include "poifusion/tensor.hpp"

namespace poifusion {

namespace ops {

/// x [Q×M×Cin] with rows grouped as M = G·P (group-major). weights
/// [Qw × G·Cout·Cin] hold one row-major Cout×Cin matrix per group, bias
/// [Qw × G·Cout]; Qw is Q, or 1 to share one set across all queries.
inline Tensor dynamic_linear(Tape& tape, const Tensor& x, const Tensor& weights, const Tensor& bias,
                             std::size_t groups) {
  using detail::cmap;
  using detail::mmap;
  if (x.rank() != 3) throw DimensionError("dynamic_linear input must be [Q x M x Cin], got " + shape_str(x.shape()));
  const std::size_t q = x.dim(0), m = x.dim(1), cin = x.dim(2);
  if (groups == 0 || m % groups != 0) throw DimensionError("dynamic_linear: rows not divisible by groups");
  if (weights.rank() != 2 || bias.rank() != 2 || weights.dim(0) != bias.dim(0) ||
      (weights.dim(0) != q && weights.dim(0) != 1))
    throw DimensionError("dynamic_linear: parameter shapes " + shape_str(weights.shape()) + ", " +
                         shape_str(bias.shape()) + " do not fit " + std::to_string(q) + " queries");
  if (bias.dim(1) % groups != 0) throw DimensionError("dynamic_linear: bias width not divisible by groups");
  const std::size_t cout = bias.dim(1) / groups;
  if (weights.dim(1) != groups * cout * cin)
    throw DimensionError("dynamic_linear: weight width " + std::to_string(weights.dim(1)) + " != G·Cout·Cin = " +
                         std::to_string(groups * cout * cin));
  const std::size_t p = m / groups;
  const bool shared = weights.dim(0) == 1 && q != 1;
  Tensor out(Shape{q, m, cout});
  for (std::size_t qi = 0; qi < q; ++qi) {
    const std::size_t wq = shared ? 0 : qi;
    for (std::size_t g = 0; g < groups; ++g) {
      auto w = cmap(weights.data().subspan((wq * groups + g) * cout * cin, cout * cin), cout, cin);
      auto b = cmap(bias.data().subspan((wq * groups + g) * cout, cout), 1, cout);
      auto xb = cmap(x.data().subspan((qi * m + g * p) * cin, p * cin), p, cin);
      auto yb = mmap(out.data().subspan((qi * m + g * p) * cout, p * cout), p, cout);
      yb.noalias() = xb * w.transpose();
      yb.rowwise() += b.row(0);
    }
  }
  if (detail::tracks({&x, &weights, &bias})) {
    out.set_requires_grad(true);
    tape.record([x, weights, bias, out, q, m, cin, cout, p, groups, shared]() mutable {
      for (std::size_t qi = 0; qi < q; ++qi) {
        const std::size_t wq = shared ? 0 : qi;
        for (std::size_t g = 0; g < groups; ++g) {
          auto gy = cmap(std::span<const double>(out.grad()).subspan((qi * m + g * p) * cout, p * cout), p, cout);
          if (x.requires_grad()) {
            auto w = cmap(weights.data().subspan((wq * groups + g) * cout * cin, cout * cin), cout, cin);
            mmap(x.grad().subspan((qi * m + g * p) * cin, p * cin), p, cin).noalias() += gy * w;
          }
          if (weights.requires_grad()) {
            auto xb = cmap(x.data().subspan((qi * m + g * p) * cin, p * cin), p, cin);
            mmap(weights.grad().subspan((wq * groups + g) * cout * cin, cout * cin), cout, cin).noalias() +=
                gy.transpose() * xb;
          }
          if (bias.requires_grad())
            mmap(bias.grad().subspan((wq * groups + g) * cout, cout), 1, cout) += gy.colwise().sum();
        }
      }
    });
  }
  return out;
}

}  // namespace ops

/// Heads that emit the dynamic parameters (or, for the static ablation, the
/// parameters themselves), plus the fixed LayerNorm affines and the
/// aggregation layer.
struct FusionParams {
  // Dynamic: C × (G·Cout·Cin) and C × (G·Cout) heads. Static: 1 × ... tensors.
  Tensor l1_w_head, l1_b_head, l1_w_bias, l1_b_bias;
  Tensor l2_w_head, l2_b_head, l2_w_bias, l2_b_bias;
  Tensor ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  Tensor agg_w, agg_b, agg_gamma, agg_beta;

  static FusionParams init(const ModelConfig& cfg, Rng& rng) {
    const std::size_t c = cfg.channels, g = cfg.groups, cg = cfg.group_channels();
    const std::size_t l1w = g * cg * 2 * cg, l1b = g * cg, l2w = g * cg * cg, l2b = g * cg;
    auto gauss = [&](Shape s, double std) {
      Tensor t(std::move(s), true);
      for (double& v : t.data()) v = rng.normal(0.0, std);
      return t;
    };
    auto ones = [](std::size_t n) {
      Tensor t(Shape{n}, std::vector<double>(n, 1.0), true);
      return t;
    };
    FusionParams f;
    if (cfg.fusion == FusionMode::dynamic) {
      f.l1_w_head = gauss({c, l1w}, cfg.init_std);
      f.l1_b_head = gauss({c, l1b}, cfg.init_std);
      f.l1_w_bias = Tensor(Shape{l1w}, true);
      f.l1_b_bias = Tensor(Shape{l1b}, true);
      f.l2_w_head = gauss({c, l2w}, cfg.init_std);
      f.l2_b_head = gauss({c, l2b}, cfg.init_std);
      f.l2_w_bias = Tensor(Shape{l2w}, true);
      f.l2_b_bias = Tensor(Shape{l2b}, true);
    } else {
      f.l1_w_head = gauss({1, l1w}, 1.0 / std::sqrt(2.0 * cg));
      f.l1_b_head = Tensor(Shape{1, l1b}, true);
      f.l2_w_head = gauss({1, l2w}, 1.0 / std::sqrt(static_cast<double>(cg)));
      f.l2_b_head = Tensor(Shape{1, l2b}, true);
    }
    f.ln1_gamma = ones(cg);
    f.ln1_beta = Tensor(Shape{cg}, true);
    f.ln2_gamma = ones(cg);
    f.ln2_beta = Tensor(Shape{cg}, true);
    const std::size_t agg_in = static_cast<std::size_t>(cfg.pois_per_query()) * cg;
    f.agg_w = gauss({agg_in, c}, 1.0 / std::sqrt(static_cast<double>(agg_in)));
    f.agg_b = Tensor(Shape{c}, true);
    f.agg_gamma = ones(c);
    f.agg_beta = Tensor(Shape{c}, true);
    return f;
  }

  bool is_dynamic() const { return l1_w_bias.defined(); }

  template <class F>
  void visit(F&& f) {
    f("fusion.l1_w_head", l1_w_head);
    f("fusion.l1_b_head", l1_b_head);
    if (is_dynamic()) {
      f("fusion.l1_w_bias", l1_w_bias);
      f("fusion.l1_b_bias", l1_b_bias);
    }
    f("fusion.l2_w_head", l2_w_head);
    f("fusion.l2_b_head", l2_b_head);
    if (is_dynamic()) {
      f("fusion.l2_w_bias", l2_w_bias);
      f("fusion.l2_b_bias", l2_b_bias);
    }
    f("fusion.ln1_gamma", ln1_gamma);
    f("fusion.ln1_beta", ln1_beta);
    f("fusion.ln2_gamma", ln2_gamma);
    f("fusion.ln2_beta", ln2_beta);
    f("fusion.agg_w", agg_w);
    f("fusion.agg_b", agg_b);
    f("fusion.agg_gamma", agg_gamma);
    f("fusion.agg_beta", agg_beta);
  }
};

/// Generated parameters of both dynamic layers for every query.
struct DynamicParams {
  Tensor l1_w, l1_b;  // Q × G·Cg·2Cg, Q × G·Cg
  Tensor l2_w, l2_b;  // Q × G·Cg·Cg,  Q × G·Cg
};

inline DynamicParams dynamic_params(Tape& tape, const Tensor& feats, const FusionParams& fp) {
  if (!fp.is_dynamic()) return {fp.l1_w_head, fp.l1_b_head, fp.l2_w_head, fp.l2_b_head};
  return {ops::linear(tape, feats, fp.l1_w_head, fp.l1_w_bias), ops::linear(tape, feats, fp.l1_b_head, fp.l1_b_bias),
          ops::linear(tape, feats, fp.l2_w_head, fp.l2_w_bias), ops::linear(tape, feats, fp.l2_b_head, fp.l2_b_bias)};
}

/// y = ReLU(LN(L2·ReLU(LN(L1·[f_P, f_I] + b1)) + b2)) per PoI.
/// pairs: [Q × G·P × 2Cg] -> [Q × G·P × Cg].
inline Tensor fuse_pois(Tape& tape, const Tensor& pairs, const DynamicParams& dp, const FusionParams& fp,
                        std::size_t groups) {
  Tensor h = ops::dynamic_linear(tape, pairs, dp.l1_w, dp.l1_b, groups);
  h = ops::relu(tape, ops::layer_norm(tape, h, fp.ln1_gamma, fp.ln1_beta));
  Tensor y = ops::dynamic_linear(tape, h, dp.l2_w, dp.l2_b, groups);
  return ops::relu(tape, ops::layer_norm(tape, y, fp.ln2_gamma, fp.ln2_beta));
}

/// Concatenate a query's fused PoIs in canonical order (group-major, anchor
/// index 0..8), project to C, LN, ReLU, and add back onto the query feature.
inline Tensor aggregate_pois(Tape& tape, const Tensor& fused, const Tensor& feats, const FusionParams& fp) {
  const std::size_t q = fused.dim(0);
  const std::size_t width = fused.dim(1) * fused.dim(2);
  if (fp.agg_w.dim(0) != width)
    throw DimensionError("aggregate_pois: " + std::to_string(width) + " fused values per query, layer expects " +
                         std::to_string(fp.agg_w.dim(0)));
  Tensor flat = ops::reshape(tape, fused, {q, width});
  Tensor a = ops::linear(tape, flat, fp.agg_w, fp.agg_b);
  a = ops::relu(tape, ops::layer_norm(tape, a, fp.agg_gamma, fp.agg_beta));
  return ops::add(tape, feats, a);
}

}  // namespace poifusion
