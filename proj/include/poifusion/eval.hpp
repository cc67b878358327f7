#pragma once

// Evaluation: decode held-out scenes (optionally corrupted), distance-threshold
// mAP, per-iteration center error, and the JSON report.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poifusion/assign.hpp"
#include "poifusion/config.hpp"
#include "poifusion/decoder.hpp"
#include "poifusion/features.hpp"
#include "poifusion/metrics.hpp"
#include "poifusion/train.hpp"

#ifndef POIFUSION_REVISION
#define POIFUSION_REVISION "unversioned"
#endif

namespace poifusion {

inline constexpr std::size_t kTopK = 300;
inline constexpr const char* kEvalReportSchema = "poifusion.eval_report/1";

struct EvalResult {
  ApTable ap;
  std::vector<double> center_error;  // mean BEV center error of matched queries, per iteration
};

/// Scene-level inference: optional corruption of the rig and atlas, decode,
/// and the top-k final-iteration detections plus per-iteration center error.
struct SceneEval {
  SceneResult result;
  std::vector<double> center_error_sum;
};

inline SceneEval evaluate_scene(const DecoderParams& params, const RunConfig& rc, const Scene& scene,
                                const Corruption& c) {
  // Features are rendered from the true scene; the model sees the corrupted rig.
  const FeatureAtlas atlas = apply_corruption(encode_oracle_features(scene, rc.features), scene.grid, c);
  const Scene seen = apply_corruption(scene, c);
  Tape tape;
  const auto outs = decode(tape, params, atlas, seen.rig, seen.grid, {0, hash_combine(scene.seed, 0xe7a1)});
  SceneEval se;
  se.result = {top_k(detections_from(outs.back()), kTopK), scene.boxes};
  for (const IterationOutput& io : outs) {
    double sum = 0.0;
    for (const auto& [q, g] : hungarian(match_cost(io, scene.boxes, rc.loss)).pairs)
      sum += std::hypot(io.boxes[q * kBoxParams] - scene.boxes[g].box.x,
                        io.boxes[q * kBoxParams + 1] - scene.boxes[g].box.y);
    se.center_error_sum.push_back(sum);
  }
  return se;
}

inline EvalResult evaluate(const DecoderParams& params, const RunConfig& rc, const std::vector<Scene>& scenes,
                           const Corruption& c = {}) {
  if (scenes.empty()) throw std::invalid_argument("no scenes");
  c.validate();
  std::vector<SceneEval> per(scenes.size());
  parallel_chunks(scenes.size(), rc.optim.workers,
                  [&](std::size_t i) { per[i] = evaluate_scene(params, rc, scenes[i], c); });
  EvalResult r;
  std::vector<SceneResult> results;
  r.center_error.assign(params.config.iterations, 0.0);
  std::size_t num_gt = 0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    results.push_back(std::move(per[i].result));
    for (std::size_t it = 0; it < r.center_error.size(); ++it) r.center_error[it] += per[i].center_error_sum[it];
    num_gt += scenes[i].boxes.size();
  }
  for (double& e : r.center_error) e = num_gt ? e / static_cast<double>(num_gt) : 0.0;
  r.ap = mean_average_precision(results, rc.model.num_classes);
  return r;
}

/// Offsets of the calibration sweep, 0.0 to 1.0 m in 0.2 m steps.
inline std::vector<Corruption> calibration_sweep(std::uint64_t seed) {
  std::vector<Corruption> out;
  for (int i = 0; i <= 5; ++i) out.push_back(Corruption::calib(i / 5.0, seed));
  return out;
}

struct CorruptionRow {
  std::string label;
  EvalResult result;
};

struct EvalReport {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string revision = POIFUSION_REVISION;
  std::vector<std::string> class_names;
  std::size_t num_scenes = 0;
  EvalResult clean;
  std::vector<CorruptionRow> corruptions;
};

inline EvalReport run_evaluation(const DecoderParams& params, const RunConfig& rc, const std::vector<Scene>& scenes,
                                 const std::vector<Corruption>& corruptions = {}) {
  EvalReport rep;
  rep.config_hash = config_hash(rc);
  rep.seed = rc.seed;
  for (const ClassTemplate& c : rc.scene.classes) rep.class_names.push_back(c.name);
  rep.num_scenes = scenes.size();
  rep.clean = evaluate(params, rc, scenes);
  for (const Corruption& c : corruptions) rep.corruptions.push_back({c.label(), evaluate(params, rc, scenes, c)});
  return rep;
}

inline std::string threshold_key(double t) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.1f", t);
  return buf;
}

inline nlohmann::json eval_result_to_json(const EvalResult& r, const std::vector<std::string>& class_names) {
  nlohmann::json ap = nlohmann::json::object();
  for (std::size_t c = 0; c < r.ap.ap.size(); ++c) {
    nlohmann::json row = nlohmann::json::object();
    for (std::size_t k = 0; k < kDistanceThresholds.size(); ++k)
      row[threshold_key(kDistanceThresholds[k])] = r.ap.ap[c][k] ? nlohmann::json(*r.ap.ap[c][k]) : nlohmann::json();
    ap[c < class_names.size() ? class_names[c] : std::to_string(c)] = row;
  }
  return {{"map", r.ap.map}, {"ap", ap}, {"center_error_per_iteration", r.center_error}};
}

inline nlohmann::json eval_report_to_json(const EvalReport& rep) {
  nlohmann::json thresholds = nlohmann::json::array();
  for (double t : kDistanceThresholds) thresholds.push_back(t);
  nlohmann::json rows = nlohmann::json::array();
  for (const CorruptionRow& row : rep.corruptions) {
    nlohmann::json j = eval_result_to_json(row.result, rep.class_names);
    j["label"] = row.label;
    j["delta_map"] = row.result.ap.map - rep.clean.ap.map;
    j["relative_delta_map"] = rep.clean.ap.map > 0 ? (row.result.ap.map - rep.clean.ap.map) / rep.clean.ap.map : 0.0;
    rows.push_back(j);
  }
  return {{"schema", kEvalReportSchema},
          {"config_hash", rep.config_hash},
          {"seed", rep.seed},
          {"revision", rep.revision},
          {"classes", rep.class_names},
          {"thresholds_m", thresholds},
          {"num_scenes", rep.num_scenes},
          {"clean", eval_result_to_json(rep.clean, rep.class_names)},
          {"corruptions", rows}};
}

}  // namespace poifusion
