#pragma once

// Run configuration: every knob of a gen/train/eval run, loaded from JSON with
// a strict schema (unknown keys and wrong types are rejected before any work).
// Schema documented in docs/formats.md.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "poifusion/adamw.hpp"
#include "poifusion/assign.hpp"
#include "poifusion/features.hpp"
#include "poifusion/model_config.hpp"
#include "poifusion/scene.hpp"

namespace poifusion {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct OptimConfig {
  AdamWConfig adamw{3e-4, 0.9, 0.999, 1e-8, 0.01};
  bool one_cycle = false;
  int epochs = 6;
  int batch = 1;    // scenes per optimizer step
  int workers = 1;  // scenes processed concurrently; results do not depend on it
};

struct DataConfig {
  int train_scenes = 200;
  int eval_scenes = 50;
};

struct RunConfig {
  SceneConfig scene;
  FeatureConfig features;
  ModelConfig model;
  LossConfig loss;
  OptimConfig optim;
  DataConfig data;
  std::uint64_t seed = 0;
  std::string output_dir = "run";

  /// Feature channels follow the model width; loss supervision flags follow
  /// the model's ablation switches.
  void resolve() {
    features.channels = model.channels;
    model.num_classes = scene.num_classes();
    loss.deep_supervision = model.deep_supervision;
    loss.match_scope = model.match_scope;
  }

  void validate() const {
    try {
      scene.grid.validate();
      model.validate();
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (scene.classes.empty()) fail("scene.classes must not be empty");
    for (const ClassTemplate& c : scene.classes)
      if (!(c.w > 0 && c.l > 0 && c.h > 0)) fail("class '" + c.name + "' needs positive dimensions");
    if (scene.min_boxes < 0 || scene.max_boxes < scene.min_boxes) fail("scene box count range is invalid");
    if (scene.size_jitter < 0 || scene.size_jitter >= 1) fail("scene.size_jitter must be in [0, 1)");
    if (scene.rig.num_cameras < 0) fail("scene.rig.num_cameras must be >= 0");
    if (!(scene.rig.hfov_deg > 0 && scene.rig.hfov_deg < 180)) fail("scene.rig.hfov_deg must be in (0, 180)");
    if (scene.rig.image_width < 1 || scene.rig.image_height < 1) fail("scene.rig image size must be positive");
    if (!(features.outer_radius > features.inner_radius && features.inner_radius >= 0))
      fail("features: need 0 <= inner_radius < outer_radius");
    if (!(features.image_radius > 0)) fail("features.image_radius must be positive");
    if (!(optim.adamw.lr > 0)) fail("optim.lr must be positive");
    if (optim.adamw.weight_decay < 0) fail("optim.weight_decay must be >= 0");
    if (optim.epochs < 0) fail("optim.epochs must be >= 0");
    if (optim.batch < 1) fail("optim.batch must be >= 1");
    if (optim.workers < 1) fail("optim.workers must be >= 1");
    if (data.train_scenes < 0 || data.eval_scenes < 0) fail("data scene counts must be >= 0");
    if (model.num_classes != scene.num_classes()) fail("model.num_classes must equal the number of scene classes");
  }
};

namespace detail {

/// Reads known keys from one JSON object and rejects everything else.
class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const nlohmann::json& v = j_.at(key);
    bool ok = false;
    if constexpr (std::is_same_v<T, bool>) ok = v.is_boolean();
    else if constexpr (std::is_same_v<T, std::string>) ok = v.is_string();
    else if constexpr (std::is_floating_point_v<T>) ok = v.is_number();
    else if constexpr (std::is_unsigned_v<T>) ok = v.is_number_unsigned();
    else if constexpr (std::is_integral_v<T>) ok = v.is_number_integer();
    if (!ok) throw ConfigError(where(key) + ": wrong type");
    out = v.get<T>();
  }

  template <class E>
  void read_enum(const char* key, E& out, std::initializer_list<std::pair<const char*, E>> names) {
    std::string s;
    read(key, s);
    if (!j_.contains(key)) return;
    for (const auto& [n, e] : names)
      if (s == n) {
        out = e;
        return;
      }
    std::string allowed;
    for (const auto& [n, e] : names) allowed += (allowed.empty() ? "" : ", ") + std::string(n);
    throw ConfigError(where(key) + ": unknown value '" + s + "' (allowed: " + allowed + ")");
  }

  /// Sub-object, or nullptr when absent.
  const nlohmann::json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + where(k) + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using detail::StrictObject;
  RunConfig rc;
  StrictObject root(j, "");
  root.read("seed", rc.seed);
  root.read("output_dir", rc.output_dir);

  if (const auto* s = root.child("scene")) {
    StrictObject o(*s, "scene");
    SceneConfig& sc = rc.scene;
    o.read("min_boxes", sc.min_boxes);
    o.read("max_boxes", sc.max_boxes);
    o.read("size_jitter", sc.size_jitter);
    o.read("ground_z", sc.ground_z);
    o.read("non_overlap", sc.non_overlap);
    o.read("min_center_distance", sc.min_center_distance);
    o.read("max_retries", sc.max_retries);
    if (const auto* g = o.child("grid")) {
      StrictObject go(*g, "scene.grid");
      go.read("x_min", sc.grid.x_min);
      go.read("y_min", sc.grid.y_min);
      go.read("x_max", sc.grid.x_max);
      go.read("y_max", sc.grid.y_max);
      go.read("voxel_x", sc.grid.voxel_x);
      go.read("voxel_y", sc.grid.voxel_y);
      go.read("downsample", sc.grid.downsample);
      go.finish();
    }
    if (const auto* cl = o.child("classes")) {
      if (!cl->is_array()) throw ConfigError("scene.classes: expected an array");
      sc.classes.clear();
      for (std::size_t i = 0; i < cl->size(); ++i) {
        StrictObject co((*cl)[i], "scene.classes[" + std::to_string(i) + "]");
        ClassTemplate t;
        co.read("name", t.name);
        co.read("w", t.w);
        co.read("l", t.l);
        co.read("h", t.h);
        co.finish();
        sc.classes.push_back(t);
      }
    }
    if (const auto* r = o.child("rig")) {
      StrictObject ro(*r, "scene.rig");
      ro.read("num_cameras", sc.rig.num_cameras);
      ro.read("first_yaw_deg", sc.rig.first_yaw_deg);
      ro.read("hfov_deg", sc.rig.hfov_deg);
      ro.read("image_width", sc.rig.image_width);
      ro.read("image_height", sc.rig.image_height);
      ro.read("mount_height", sc.rig.mount_height);
      ro.finish();
    }
    o.finish();
  }

  if (const auto* f = root.child("features")) {
    StrictObject o(*f, "features");
    o.read("inner_radius", rc.features.inner_radius);
    o.read("outer_radius", rc.features.outer_radius);
    o.read("image_radius", rc.features.image_radius);
    o.read("lift_seed", rc.features.lift_seed);
    o.finish();
  }

  if (const auto* m = root.child("model")) {
    StrictObject o(*m, "model");
    ModelConfig& mc = rc.model;
    o.read("num_queries", mc.num_queries);
    o.read("groups", mc.groups);
    o.read("channels", mc.channels);
    o.read("iterations", mc.iterations);
    o.read("heads", mc.heads);
    o.read("ffn_hidden", mc.ffn_hidden);
    o.read("init_std", mc.init_std);
    o.read("cls_prior", mc.cls_prior);
    o.read("per_group_box_transform", mc.per_group_box_transform);
    o.read("deep_supervision", mc.deep_supervision);
    o.read_enum("anchors", mc.anchors,
                {{"center_only", AnchorSet::center_only}, {"center_and_corners", AnchorSet::center_and_corners}});
    o.read_enum("poi_mode", mc.poi_mode,
                {{"anchors_only", PoiMode::anchors_only},
                 {"box_transform", PoiMode::box_transform},
                 {"box_transform_and_shift", PoiMode::box_transform_and_shift}});
    o.read_enum("fusion", mc.fusion, {{"dynamic", FusionMode::dynamic}, {"static", FusionMode::static_weights}});
    o.read_enum("view_selection", mc.view_selection,
                {{"random", ViewSelection::random}, {"lowest_index", ViewSelection::lowest_index}});
    o.read_enum("scale_logits", mc.scale_logits,
                {{"per_query", ScaleLogits::per_query}, {"per_poi", ScaleLogits::per_poi}});
    o.read_enum("refine", mc.refine, {{"compound", RefineMode::compound}, {"from_initial", RefineMode::from_initial}});
    o.read_enum("match_scope", mc.match_scope,
                {{"per_iteration", MatchScope::per_iteration}, {"final_only", MatchScope::final_only}});
    o.finish();
  }

  if (const auto* l = root.child("loss")) {
    StrictObject o(*l, "loss");
    o.read("alpha", rc.loss.alpha);
    o.read("beta", rc.loss.beta);
    o.read("focal_gamma", rc.loss.focal_gamma);
    o.read("focal_alpha", rc.loss.focal_alpha);
    o.finish();
  }

  if (const auto* p = root.child("optim")) {
    StrictObject o(*p, "optim");
    o.read("lr", rc.optim.adamw.lr);
    o.read("beta1", rc.optim.adamw.beta1);
    o.read("beta2", rc.optim.adamw.beta2);
    o.read("eps", rc.optim.adamw.eps);
    o.read("weight_decay", rc.optim.adamw.weight_decay);
    o.read("one_cycle", rc.optim.one_cycle);
    o.read("epochs", rc.optim.epochs);
    o.read("batch", rc.optim.batch);
    o.read("workers", rc.optim.workers);
    o.finish();
  }

  if (const auto* d = root.child("data")) {
    StrictObject o(*d, "data");
    o.read("train_scenes", rc.data.train_scenes);
    o.read("eval_scenes", rc.data.eval_scenes);
    o.finish();
  }
  root.finish();
  rc.resolve();
  rc.validate();
  return rc;
}

/// Full, resolved configuration. Output location is not part of it.
inline nlohmann::json run_config_to_json(const RunConfig& rc) {
  const SceneConfig& sc = rc.scene;
  nlohmann::json classes = nlohmann::json::array();
  for (const ClassTemplate& c : sc.classes) classes.push_back({{"name", c.name}, {"w", c.w}, {"l", c.l}, {"h", c.h}});
  const ModelConfig& m = rc.model;
  return {
      {"seed", rc.seed},
      {"scene",
       {{"min_boxes", sc.min_boxes},
        {"max_boxes", sc.max_boxes},
        {"size_jitter", sc.size_jitter},
        {"ground_z", sc.ground_z},
        {"non_overlap", sc.non_overlap},
        {"min_center_distance", sc.min_center_distance},
        {"max_retries", sc.max_retries},
        {"grid", grid_to_json(sc.grid)},
        {"classes", classes},
        {"rig",
         {{"num_cameras", sc.rig.num_cameras},
          {"first_yaw_deg", sc.rig.first_yaw_deg},
          {"hfov_deg", sc.rig.hfov_deg},
          {"image_width", sc.rig.image_width},
          {"image_height", sc.rig.image_height},
          {"mount_height", sc.rig.mount_height}}}}},
      {"features",
       {{"inner_radius", rc.features.inner_radius},
        {"outer_radius", rc.features.outer_radius},
        {"image_radius", rc.features.image_radius},
        {"lift_seed", rc.features.lift_seed}}},
      {"model",
       {{"num_queries", m.num_queries},
        {"groups", m.groups},
        {"channels", m.channels},
        {"iterations", m.iterations},
        {"heads", m.heads},
        {"ffn_hidden", m.ffn_hidden},
        {"init_std", m.init_std},
        {"cls_prior", m.cls_prior},
        {"per_group_box_transform", m.per_group_box_transform},
        {"deep_supervision", m.deep_supervision},
        {"anchors", to_string(m.anchors)},
        {"poi_mode", to_string(m.poi_mode)},
        {"fusion", to_string(m.fusion)},
        {"view_selection", to_string(m.view_selection)},
        {"scale_logits", to_string(m.scale_logits)},
        {"refine", to_string(m.refine)},
        {"match_scope", to_string(m.match_scope)}}},
      {"loss",
       {{"alpha", rc.loss.alpha},
        {"beta", rc.loss.beta},
        {"focal_gamma", rc.loss.focal_gamma},
        {"focal_alpha", rc.loss.focal_alpha}}},
      {"optim",
       {{"lr", rc.optim.adamw.lr},
        {"beta1", rc.optim.adamw.beta1},
        {"beta2", rc.optim.adamw.beta2},
        {"eps", rc.optim.adamw.eps},
        {"weight_decay", rc.optim.adamw.weight_decay},
        {"one_cycle", rc.optim.one_cycle},
        {"epochs", rc.optim.epochs},
        {"batch", rc.optim.batch},
        {"workers", rc.optim.workers}}},
      {"data", {{"train_scenes", rc.data.train_scenes}, {"eval_scenes", rc.data.eval_scenes}}},
  };
}

inline RunConfig default_run_config() {
  RunConfig rc;
  rc.resolve();
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse " + path + ": " + e.what());
  }
  RunConfig rc = run_config_from_json(j);
  return rc;
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Hash of the canonical (sorted-key, compact) JSON of the resolved config.
/// Workers do not change results and are excluded.
inline std::string config_hash(const RunConfig& rc) {
  nlohmann::json j = run_config_to_json(rc);
  j["optim"].erase("workers");
  return hex64(fnv1a64(j.dump()));
}

}  // namespace poifusion
