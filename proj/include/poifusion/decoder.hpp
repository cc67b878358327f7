#pragma once

// The iterative PoI decoder: distance-biased self-attention, PoI generation,
// multi-modal sampling, dynamic fusion, FFN, and prediction heads, applied
// with one shared parameter set on every iteration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "poifusion/adamw.hpp"
#include "poifusion/features.hpp"
#include "poifusion/fusion.hpp"
#include "poifusion/geometry.hpp"
#include "poifusion/model_config.hpp"
#include "poifusion/ops.hpp"
#include "poifusion/poi.hpp"
#include "poifusion/query.hpp"
#include "poifusion/random.hpp"
#include "poifusion/sampling.hpp"
#include "poifusion/tensor.hpp"

namespace poifusion {

namespace ops {

/// logits [H×Q×Q] − tau[h]·‖c_p − c_q‖ with c the BEV (x, y) centers of
/// boxes [Q×8]. The distance is differentiable except at coincident centers,
/// where the subgradient 0 is used.
inline Tensor distance_bias(Tape& tape, const Tensor& logits, const Tensor& tau, const Tensor& boxes) {
  if (logits.rank() != 3 || logits.dim(1) != logits.dim(2) || tau.rank() != 1 || tau.dim(0) != logits.dim(0) ||
      boxes.rank() != 2 || boxes.dim(0) != logits.dim(1) || boxes.dim(1) < 2)
    throw DimensionError("distance_bias: logits " + shape_str(logits.shape()) + ", tau " + shape_str(tau.shape()) +
                         ", boxes " + shape_str(boxes.shape()));
  const std::size_t h = logits.dim(0), q = logits.dim(1), qq = q * q, stride = boxes.dim(1);
  std::vector<double> dist(qq);
  for (std::size_t i = 0; i < q; ++i)
    for (std::size_t j = 0; j < q; ++j)
      dist[i * q + j] = std::hypot(boxes[i * stride] - boxes[j * stride], boxes[i * stride + 1] - boxes[j * stride + 1]);
  Tensor out(logits.shape());
  for (std::size_t k = 0; k < h; ++k)
    for (std::size_t i = 0; i < qq; ++i) out[k * qq + i] = logits[k * qq + i] - tau[k] * dist[i];
  if (detail::tracks({&logits, &tau, &boxes})) {
    out.set_requires_grad(true);
    tape.record([logits, tau, boxes, out, dist = std::move(dist), h, q, qq, stride]() mutable {
      auto g = out.grad();
      std::vector<double> gdist(qq, 0.0);
      for (std::size_t k = 0; k < h; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < qq; ++i) {
          if (logits.requires_grad()) logits.grad()[k * qq + i] += g[k * qq + i];
          acc += g[k * qq + i] * dist[i];
          gdist[i] -= g[k * qq + i] * tau[k];
        }
        if (tau.requires_grad()) tau.grad()[k] -= acc;
      }
      if (!boxes.requires_grad()) return;
      auto gb = boxes.grad();
      for (std::size_t i = 0; i < q; ++i)
        for (std::size_t j = 0; j < q; ++j) {
          const double d = dist[i * q + j];
          if (d == 0.0) continue;
          const double dx = (boxes[i * stride] - boxes[j * stride]) / d;
          const double dy = (boxes[i * stride + 1] - boxes[j * stride + 1]) / d;
          const double gd = gdist[i * q + j];
          gb[i * stride] += gd * dx;
          gb[i * stride + 1] += gd * dy;
          gb[j * stride] -= gd * dx;
          gb[j * stride + 1] -= gd * dy;
        }
    });
  }
  return out;
}

}  // namespace ops

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor tau_raw;  // per head; τ = softplus(tau_raw)
  Tensor ln_gamma, ln_beta;

  template <class F>
  void visit(F&& f) {
    f("attn.wq", wq);
    f("attn.bq", bq);
    f("attn.wk", wk);
    f("attn.bk", bk);
    f("attn.wv", wv);
    f("attn.bv", bv);
    f("attn.wo", wo);
    f("attn.bo", bo);
    f("attn.tau_raw", tau_raw);
    f("attn.ln_gamma", ln_gamma);
    f("attn.ln_beta", ln_beta);
  }
};

struct FfnParams {
  Tensor w1, b1, w2, b2, ln_gamma, ln_beta;

  template <class F>
  void visit(F&& f) {
    f("ffn.w1", w1);
    f("ffn.b1", b1);
    f("ffn.w2", w2);
    f("ffn.b2", b2);
    f("ffn.ln_gamma", ln_gamma);
    f("ffn.ln_beta", ln_beta);
  }
};

struct PredictionHeads {
  Tensor cls_w, cls_b;  // C × K
  Tensor reg_w, reg_b;  // C × 8: Δcenter(3), Δlog-dims(3), Δsin, Δcos

  template <class F>
  void visit(F&& f) {
    f("head.cls_w", cls_w);
    f("head.cls_b", cls_b);
    f("head.reg_w", reg_w);
    f("head.reg_b", reg_b);
  }
};

/// Every learned tensor of the model. One instance is reused by all decoder
/// iterations; decode() only ever sees it through a const reference.
struct DecoderParams {
  ModelConfig config;
  Tensor query_boxes;  // Q × 8
  Tensor query_feats;  // Q × C
  AttentionParams attn;
  PoiHeads poi;
  ScaleHead scale;
  FusionParams fusion;
  FfnParams ffn;
  PredictionHeads heads;

  template <class F>
  void visit(F&& f) {
    f("query.boxes", query_boxes);
    f("query.feats", query_feats);
    attn.visit(f);
    poi.visit(f);
    scale.visit(f);
    fusion.visit(f);
    ffn.visit(f);
    heads.visit(f);
  }

  ParameterList parameters() const {
    ParameterList out;
    const_cast<DecoderParams*>(this)->visit([&](const char* name, Tensor& t) { out.push_back({name, t}); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const NamedTensor& p : parameters()) n += p.tensor.numel();
    return n;
  }

  /// Same parameter values, private gradient buffers.
  DecoderParams worker_view() const {
    DecoderParams out = *this;
    out.visit([](const char*, Tensor& t) { t = t.shared_view(); });
    return out;
  }

  /// Independent deep copy (values and fresh gradients).
  DecoderParams clone() const {
    DecoderParams out = *this;
    out.visit([](const char*, Tensor& t) {
      Tensor c = t.detached();
      c.set_requires_grad(true);
      t = c;
    });
    return out;
  }

  void zero_grad() {
    visit([](const char*, Tensor& t) { t.zero_grad(); });
  }
};

/// Fresh parameters for `cfg`. Delta heads (PoI box/shift and box regression)
/// start at zero so the first forward reproduces the anchor configuration.
inline DecoderParams init_decoder(const ModelConfig& cfg, const BevGrid& grid) {
  cfg.validate();
  const std::size_t c = cfg.channels, q = cfg.num_queries, h = cfg.heads, f = cfg.ffn_hidden;
  Rng rng(hash_combine(cfg.init_seed, 0x9b1d));
  auto gauss = [&](Shape s, double std) {
    Tensor t(std::move(s), true);
    for (double& v : t.data()) v = rng.normal(0.0, std);
    return t;
  };
  auto zeros = [](Shape s) { return Tensor(std::move(s), true); };
  auto ones = [](std::size_t n) { return Tensor(Shape{n}, std::vector<double>(n, 1.0), true); };
  const double xavier_c = 1.0 / std::sqrt(static_cast<double>(c));

  DecoderParams p;
  p.config = cfg;
  const auto queries = init_queries(cfg.num_queries, grid, hash_combine(cfg.init_seed, 0x51), cfg.channels, cfg.init_std);
  p.query_boxes = zeros({q, kBoxParams});
  p.query_feats = zeros({q, c});
  for (std::size_t i = 0; i < q; ++i) {
    const auto a = queries[i].box.to_array();
    std::copy(a.begin(), a.end(), p.query_boxes.data().begin() + i * kBoxParams);
    std::copy(queries[i].feat.begin(), queries[i].feat.end(), p.query_feats.data().begin() + i * c);
  }

  p.attn.wq = gauss({c, c}, xavier_c);
  p.attn.bq = zeros({c});
  p.attn.wk = gauss({c, c}, xavier_c);
  p.attn.bk = zeros({c});
  p.attn.wv = gauss({c, c}, xavier_c);
  p.attn.bv = zeros({c});
  p.attn.wo = gauss({c, c}, xavier_c);
  p.attn.bo = zeros({c});
  p.attn.tau_raw = zeros({h});
  p.attn.ln_gamma = ones(c);
  p.attn.ln_beta = zeros({c});

  p.poi = PoiHeads::zeros(cfg);
  p.scale = ScaleHead::init(cfg, rng);
  p.fusion = FusionParams::init(cfg, rng);

  p.ffn.w1 = gauss({c, f}, xavier_c);
  p.ffn.b1 = zeros({f});
  p.ffn.w2 = gauss({f, c}, 1.0 / std::sqrt(static_cast<double>(f)));
  p.ffn.b2 = zeros({c});
  p.ffn.ln_gamma = ones(c);
  p.ffn.ln_beta = zeros({c});

  const std::size_t k = cfg.num_classes;
  p.heads.cls_w = gauss({c, k}, cfg.init_std);
  p.heads.cls_b = Tensor(Shape{k}, std::vector<double>(k, -std::log((1.0 - cfg.cls_prior) / cfg.cls_prior)), true);
  p.heads.reg_w = zeros({c, kBoxParams});
  p.heads.reg_b = zeros({kBoxParams});
  return p;
}

struct AttentionResult {
  Tensor feats;    // Q × C
  Tensor weights;  // H × Q × Q
};

/// Multi-head self-attention over query features with logit bias
/// −τ_h·‖c_p − c_q‖ between BEV box centers, then residual + LN.
inline AttentionResult self_attention(Tape& tape, const Tensor& feats, const Tensor& boxes,
                                      const AttentionParams& ap, int heads) {
  const std::size_t q = feats.dim(0), c = feats.dim(1), h = heads, dh = c / h;
  auto split = [&](const Tensor& w, const Tensor& b) {
    return ops::swap_leading(tape, ops::reshape(tape, ops::linear(tape, feats, w, b), {q, h, dh}));
  };
  Tensor qh = split(ap.wq, ap.bq), kh = split(ap.wk, ap.bk), vh = split(ap.wv, ap.bv);
  Tensor logits = ops::scale(tape, ops::matmul(tape, qh, ops::transpose(tape, kh)), 1.0 / std::sqrt(double(dh)));
  logits = ops::distance_bias(tape, logits, ops::softplus(tape, ap.tau_raw), boxes);
  Tensor weights = ops::softmax(tape, logits);
  Tensor ctx = ops::reshape(tape, ops::swap_leading(tape, ops::matmul(tape, weights, vh)), {q, c});
  Tensor out = ops::add(tape, feats, ops::linear(tape, ctx, ap.wo, ap.bo));
  return {ops::layer_norm(tape, out, ap.ln_gamma, ap.ln_beta), weights};
}

inline Tensor feed_forward(Tape& tape, const Tensor& feats, const FfnParams& fp) {
  Tensor hidden = ops::relu(tape, ops::linear(tape, feats, fp.w1, fp.b1));
  Tensor out = ops::add(tape, feats, ops::linear(tape, hidden, fp.w2, fp.b2));
  return ops::layer_norm(tape, out, fp.ln_gamma, fp.ln_beta);
}

struct IterationOutput {
  Tensor boxes;   // Q × 8 refined query boxes
  Tensor logits;  // Q × K class logits
};

struct DecodeOptions {
  int iterations = 0;  // 0 = config.iterations
  std::uint64_t view_seed = 0;
};

/// Runs the decoder and returns every iteration's predictions.
inline std::vector<IterationOutput> decode(Tape& tape, const DecoderParams& params, const FeatureAtlas& atlas,
                                           const std::vector<CameraModel>& rig, const BevGrid& grid,
                                           const DecodeOptions& opts = {}) {
  const ModelConfig& cfg = params.config;
  const int iterations = opts.iterations > 0 ? opts.iterations : cfg.iterations;
  const std::size_t q = cfg.num_queries, g = cfg.groups, p = cfg.anchors_per_group(), cg = cfg.group_channels();
  const std::size_t n = q * g * p;
  if (atlas.bev.dim(0) != static_cast<std::size_t>(cfg.channels))
    throw DimensionError("atlas has " + std::to_string(atlas.bev.dim(0)) + " channels, model expects " +
                         std::to_string(cfg.channels));

  Tensor boxes = params.query_boxes;
  Tensor feats = params.query_feats;
  std::vector<IterationOutput> out;
  for (int it = 0; it < iterations; ++it) {
    feats = self_attention(tape, feats, boxes, params.attn, cfg.heads).feats;
    Tensor pois = generate_pois(tape, boxes, feats, params.poi, cfg);
    Tensor flat = ops::reshape(tape, pois, {n, 3});
    Tensor logits = scale_logits(tape, feats, params.scale, cfg);
    const SampledPairs sp =
        sample_pairs(tape, flat, atlas, rig, grid, logits, cfg, hash_combine(opts.view_seed, static_cast<std::uint64_t>(it)));
    Tensor pairs = ops::concat(tape, {ops::reshape(tape, sp.bev, {q, g * p, cg}), ops::reshape(tape, sp.image, {q, g * p, cg})});
    const DynamicParams dp = dynamic_params(tape, feats, params.fusion);
    Tensor fused = fuse_pois(tape, pairs, dp, params.fusion, g);
    feats = aggregate_pois(tape, fused, feats, params.fusion);
    feats = feed_forward(tape, feats, params.ffn);

    Tensor cls = ops::linear(tape, feats, params.heads.cls_w, params.heads.cls_b);
    Tensor reg = ops::linear(tape, feats, params.heads.reg_w, params.heads.reg_b);
    Tensor base = boxes;
    if (cfg.refine == RefineMode::from_initial && it > 0)
      base = ops::concat(tape, {ops::slice_last(tape, boxes, 0, 3), ops::slice_last(tape, params.query_boxes, 3, kBoxParams)});
    boxes = ops::transform_boxes(tape, base, reg);
    if (!feats.all_finite() || !boxes.all_finite() || !cls.all_finite())
      throw NumericError("non-finite activations at decoder iteration " + std::to_string(it + 1));
    out.push_back({boxes, cls});
  }
  return out;
}

struct Detection {
  Box3D box;
  int class_id = 0;
  double score = 0.0;
  int query = 0;
};

/// One detection per (query, class) pair with score = sigmoid(logit).
inline std::vector<Detection> detections_from(const IterationOutput& io) {
  const std::size_t q = io.boxes.dim(0), k = io.logits.dim(1);
  std::vector<Detection> out;
  out.reserve(q * k);
  for (std::size_t i = 0; i < q; ++i) {
    std::array<double, 8> b{};
    for (std::size_t j = 0; j < kBoxParams; ++j) b[j] = io.boxes[i * kBoxParams + j];
    for (std::size_t c = 0; c < k; ++c) {
      const double logit = io.logits[i * k + c];
      out.push_back({Box3D::from_array(b), static_cast<int>(c), 1.0 / (1.0 + std::exp(-logit)), static_cast<int>(i)});
    }
  }
  return out;
}

/// Highest-scoring k detections, no NMS. Ties go to the lower query index,
/// then the lower class id.
inline std::vector<Detection> top_k(std::vector<Detection> dets, std::size_t k = 300) {
  if (k < 1) throw std::invalid_argument("top_k needs k >= 1");
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.query != b.query) return a.query < b.query;
    return a.class_id < b.class_id;
  });
  if (dets.size() > k) dets.resize(k);
  return dets;
}

}  // namespace poifusion
