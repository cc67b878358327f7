#pragma once

// Distance-threshold mean average precision: greedy score-ordered matching of
// detections to ground-truth centers per class and threshold, 101-point
// interpolated AP.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "poifusion/decoder.hpp"
#include "poifusion/scene.hpp"

namespace poifusion {

inline constexpr std::array<double, 4> kDistanceThresholds{0.5, 1.0, 2.0, 4.0};
inline constexpr int kRecallPoints = 101;

/// Detections and ground truth for one scene.
struct SceneResult {
  std::vector<Detection> detections;
  std::vector<GroundTruth> ground_truth;
};

inline double bev_center_distance(const Box3D& a, const Box3D& b) { return std::hypot(a.x - b.x, a.y - b.y); }

/// Precision/recall points of one class at one threshold, in score order.
struct PrCurve {
  std::vector<double> precision, recall;
  std::size_t num_gt = 0;
};

inline PrCurve pr_curve(const std::vector<SceneResult>& scenes, int class_id, double threshold) {
  struct Ref {
    double score;
    std::size_t scene, index;
  };
  std::vector<Ref> refs;
  PrCurve pr;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    for (std::size_t i = 0; i < scenes[s].detections.size(); ++i)
      if (scenes[s].detections[i].class_id == class_id) refs.push_back({scenes[s].detections[i].score, s, i});
    for (const GroundTruth& g : scenes[s].ground_truth) pr.num_gt += g.class_id == class_id;
  }
  std::stable_sort(refs.begin(), refs.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });
  std::vector<std::vector<char>> taken(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) taken[s].assign(scenes[s].ground_truth.size(), 0);
  std::size_t tp = 0, fp = 0;
  for (const Ref& r : refs) {
    const Box3D& box = scenes[r.scene].detections[r.index].box;
    const auto& gts = scenes[r.scene].ground_truth;
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_j = gts.size();
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (gts[j].class_id != class_id || taken[r.scene][j]) continue;
      const double d = bev_center_distance(box, gts[j].box);
      if (d < best) best = d, best_j = j;
    }
    if (best_j < gts.size() && best < threshold) {
      taken[r.scene][best_j] = 1;
      ++tp;
    } else {
      ++fp;
    }
    pr.precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    pr.recall.push_back(pr.num_gt ? static_cast<double>(tp) / static_cast<double>(pr.num_gt) : 0.0);
  }
  return pr;
}

/// Mean of the precision envelope sampled at recall 0, 0.01, ..., 1.
inline double interpolated_ap(const PrCurve& pr) {
  if (pr.num_gt == 0) throw std::invalid_argument("AP undefined without ground truth");
  std::vector<double> envelope(pr.precision.size());
  double running = 0.0;
  for (std::size_t i = pr.precision.size(); i-- > 0;) envelope[i] = running = std::max(running, pr.precision[i]);
  double sum = 0.0;
  std::size_t k = 0;
  for (int i = 0; i < kRecallPoints; ++i) {
    const double r = i / double(kRecallPoints - 1);
    while (k < pr.recall.size() && pr.recall[k] < r - 1e-12) ++k;
    sum += k < pr.recall.size() ? envelope[k] : 0.0;
  }
  return sum / kRecallPoints;
}

struct ApTable {
  // ap[class][threshold]; classes without ground truth are absent from the mean.
  std::vector<std::array<std::optional<double>, kDistanceThresholds.size()>> ap;
  double map = 0.0;
};

inline ApTable mean_average_precision(const std::vector<SceneResult>& scenes, int num_classes) {
  if (scenes.empty()) throw std::invalid_argument("no scenes");
  ApTable t;
  t.ap.resize(num_classes);
  double sum = 0.0;
  int count = 0;
  for (int c = 0; c < num_classes; ++c)
    for (std::size_t k = 0; k < kDistanceThresholds.size(); ++k) {
      const PrCurve pr = pr_curve(scenes, c, kDistanceThresholds[k]);
      if (pr.num_gt == 0) continue;
      t.ap[c][k] = interpolated_ap(pr);
      sum += *t.ap[c][k];
      ++count;
    }
  if (count == 0) throw std::invalid_argument("no ground-truth boxes in any scene");
  t.map = sum / count;
  return t;
}

}  // namespace poifusion
