#pragma once

// One-to-one assignment of predictions to ground truth and the focal + L1
// set-prediction objective.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "poifusion/decoder.hpp"
#include "poifusion/ops.hpp"
#include "poifusion/scene.hpp"
#include "poifusion/tensor.hpp"

namespace poifusion {

class AssignmentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major cost matrix.
struct CostMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;

  CostMatrix() = default;
  CostMatrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}
  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (query, gt), ordered by gt index
  std::vector<int> unmatched;              // query indices, ascending
  double total_cost = 0.0;
};

/// Minimum-cost assignment of every column (ground truth) to a distinct row
/// (query). Shortest augmenting path with potentials, O(n_gt² · n_q).
inline MatchResult hungarian(const CostMatrix& cost) {
  const std::size_t nq = cost.rows, ng = cost.cols;
  if (nq < ng)
    throw AssignmentError("hungarian: " + std::to_string(nq) + " queries cannot cover " + std::to_string(ng) +
                          " ground-truth boxes");
  for (double v : cost.values)
    if (!std::isfinite(v)) throw AssignmentError("hungarian: non-finite cost");
  MatchResult res;
  if (ng > 0) {
    // Rows of the internal problem are ground truths (1..ng), columns queries (1..nq).
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(ng + 1, 0.0), v(nq + 1, 0.0);
    std::vector<std::size_t> owner(nq + 1, 0), way(nq + 1, 0);
    for (std::size_t i = 1; i <= ng; ++i) {
      owner[0] = i;
      std::size_t j0 = 0;
      std::vector<double> minv(nq + 1, inf);
      std::vector<char> used(nq + 1, 0);
      do {
        used[j0] = 1;
        const std::size_t i0 = owner[j0];
        double delta = inf;
        std::size_t j1 = 0;
        for (std::size_t j = 1; j <= nq; ++j) {
          if (used[j]) continue;
          const double cur = cost(j - 1, i0 - 1) - u[i0] - v[j];
          if (cur < minv[j]) {
            minv[j] = cur;
            way[j] = j0;
          }
          if (minv[j] < delta) {
            delta = minv[j];
            j1 = j;
          }
        }
        for (std::size_t j = 0; j <= nq; ++j) {
          if (used[j]) {
            u[owner[j]] += delta;
            v[j] -= delta;
          } else {
            minv[j] -= delta;
          }
        }
        j0 = j1;
      } while (owner[j0] != 0);
      do {
        const std::size_t j1 = way[j0];
        owner[j0] = owner[j1];
        j0 = j1;
      } while (j0 != 0);
    }
    std::vector<int> gt_to_q(ng, -1);
    for (std::size_t j = 1; j <= nq; ++j)
      if (owner[j] != 0) gt_to_q[owner[j] - 1] = static_cast<int>(j - 1);
    for (std::size_t g = 0; g < ng; ++g) {
      res.pairs.emplace_back(gt_to_q[g], static_cast<int>(g));
      res.total_cost += cost(gt_to_q[g], g);
    }
  }
  std::vector<char> taken(nq, 0);
  for (const auto& [q, g] : res.pairs) taken[q] = 1;
  for (std::size_t q = 0; q < nq; ++q)
    if (!taken[q]) res.unmatched.push_back(static_cast<int>(q));
  return res;
}

struct LossConfig {
  double alpha = 2.0;        // classification weight
  double beta = 0.25;        // regression weight
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;  // < 0 disables the class-balance weighting
  bool deep_supervision = true;
  MatchScope match_scope = MatchScope::per_iteration;
};

inline constexpr double kFocalCostEps = 1e-8;

/// Matching-cost form of focal loss for a predicted probability p of the
/// target class: α_f(1−p)^γ·(−log p) − (1−α_f)p^γ·(−log(1−p)).
inline double focal_cost(double p, double gamma = 2.0, double alpha = 0.25) {
  const double pos = alpha * std::pow(1.0 - p, gamma) * -std::log(p + kFocalCostEps);
  const double neg = (1.0 - alpha) * std::pow(p, gamma) * -std::log(1.0 - p + kFocalCostEps);
  return pos - neg;
}

/// cost(q, g) = α·focal_cost(score[q, class_g]) + β·‖box_q − box_g‖₁.
inline CostMatrix match_cost(const IterationOutput& io, const std::vector<GroundTruth>& gt, const LossConfig& lc) {
  const std::size_t q = io.boxes.dim(0), k = io.logits.dim(1);
  CostMatrix cost(q, gt.size());
  for (std::size_t i = 0; i < q; ++i)
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double logit = io.logits[i * k + gt[g].class_id];
      const double p = 1.0 / (1.0 + std::exp(-logit));
      const auto tb = gt[g].box.to_array();
      double l1 = 0.0;
      for (std::size_t j = 0; j < kBoxParams; ++j) l1 += std::abs(io.boxes[i * kBoxParams + j] - tb[j]);
      cost(i, g) = lc.alpha * focal_cost(p, lc.focal_gamma, lc.focal_alpha) + lc.beta * l1;
    }
  return cost;
}

namespace ops {

inline double log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

/// Σ over all entries of the sigmoid focal loss for binary targets in {0, 1}.
inline Tensor sigmoid_focal_loss(Tape& tape, const Tensor& logits, std::vector<double> targets, double gamma,
                                 double alpha) {
  if (targets.size() != logits.numel()) throw DimensionError("focal loss: target count differs from logits");
  const std::size_t n = logits.numel();
  std::vector<double> slope(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = logits[i];
    const double p = 1.0 / (1.0 + std::exp(-x));
    if (targets[i] > 0.5) {
      const double w = alpha >= 0 ? alpha : 1.0;
      const double logp = log_sigmoid(x);
      const double m = std::pow(1.0 - p, gamma);
      total += -w * m * logp;
      slope[i] = w * m * (gamma * p * logp - (1.0 - p));
    } else {
      const double w = alpha >= 0 ? 1.0 - alpha : 1.0;
      const double log1mp = log_sigmoid(-x);
      const double m = std::pow(p, gamma);
      total += -w * m * log1mp;
      slope[i] = w * m * (p - gamma * (1.0 - p) * log1mp);
    }
  }
  Tensor out = Tensor::scalar(total);
  if (detail::tracks({&logits})) {
    out.set_requires_grad(true);
    tape.record([logits, out, slope = std::move(slope)]() mutable {
      const double g = out.grad()[0];
      auto gl = logits.grad();
      for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += g * slope[i];
    });
  }
  return out;
}

}  // namespace ops

struct LossBreakdown {
  Tensor total;
  double cls = 0.0;  // Σ over supervised iterations of L_cls
  double reg = 0.0;  // Σ over supervised iterations of L_reg
  std::vector<MatchResult> matches;  // one per supervised iteration
};

/// α·L_cls + β·L_reg, each normalized by max(1, #gt), summed over the
/// supervised iterations. Matching is computed on detached values.
inline LossBreakdown set_prediction_loss(Tape& tape, const std::vector<IterationOutput>& outputs,
                                         const std::vector<GroundTruth>& gt, const LossConfig& lc) {
  if (outputs.empty()) throw std::invalid_argument("loss needs at least one iteration output");
  const std::size_t first = lc.deep_supervision ? 0 : outputs.size() - 1;
  const double norm = 1.0 / std::max<double>(1.0, static_cast<double>(gt.size()));
  std::vector<double> gt_flat;
  for (const GroundTruth& g : gt) {
    const auto a = g.box.to_array();
    gt_flat.insert(gt_flat.end(), a.begin(), a.end());
  }
  const Tensor gt_boxes(Shape{gt.size(), kBoxParams}, gt_flat);

  MatchResult final_match;
  if (lc.match_scope == MatchScope::final_only) final_match = hungarian(match_cost(outputs.back(), gt, lc));

  LossBreakdown res;
  Tensor total;
  for (std::size_t it = first; it < outputs.size(); ++it) {
    const IterationOutput& io = outputs[it];
    const std::size_t k = io.logits.dim(1);
    MatchResult m = lc.match_scope == MatchScope::final_only ? final_match : hungarian(match_cost(io, gt, lc));
    std::vector<double> targets(io.logits.numel(), 0.0);
    std::vector<std::size_t> rows;
    for (const auto& [q, g] : m.pairs) {
      targets[static_cast<std::size_t>(q) * k + gt[g].class_id] = 1.0;
      rows.push_back(static_cast<std::size_t>(q));
    }
    Tensor cls = ops::scale(tape, ops::sigmoid_focal_loss(tape, io.logits, targets, lc.focal_gamma, lc.focal_alpha), norm);
    Tensor term = ops::scale(tape, cls, lc.alpha);
    res.cls += cls.item();
    if (!rows.empty()) {
      Tensor pred = ops::gather_rows(tape, io.boxes, rows);
      Tensor reg = ops::scale(tape, ops::sum(tape, ops::abs(tape, ops::sub(tape, pred, gt_boxes))), norm);
      res.reg += reg.item();
      term = ops::add(tape, term, ops::scale(tape, reg, lc.beta));
    }
    total = total.defined() ? ops::add(tape, total, term) : term;
    res.matches.push_back(std::move(m));
  }
  res.total = total;
  if (!std::isfinite(total.item())) throw NumericError("non-finite loss");
  return res;
}

}  // namespace poifusion
