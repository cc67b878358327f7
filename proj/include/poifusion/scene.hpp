#pragma once

// Synthetic ground-truth scenes: boxes on a BEV range plus a camera rig.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poifusion/geometry.hpp"
#include "poifusion/random.hpp"

namespace poifusion {

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ClassTemplate {
  std::string name;
  double w = 1.0, l = 1.0, h = 1.0;
};

struct RigConfig {
  int num_cameras = 2;
  double first_yaw_deg = 0.0;
  double hfov_deg = 120.0;
  int image_width = 256;
  int image_height = 128;
  double mount_height = 0.0;
};

struct SceneConfig {
  BevGrid grid;
  int min_boxes = 2;
  int max_boxes = 6;
  std::vector<ClassTemplate> classes = {
      {"car", 1.9, 4.5, 1.6}, {"pedestrian", 0.7, 0.7, 1.8}, {"cyclist", 0.7, 1.8, 1.5}};
  double size_jitter = 0.1;
  double ground_z = -1.8;
  bool non_overlap = true;
  double min_center_distance = 0.0;
  int max_retries = 2000;
  RigConfig rig;

  int num_classes() const { return static_cast<int>(classes.size()); }
};

struct GroundTruth {
  Box3D box;
  int class_id = 0;
};

struct Scene {
  std::vector<GroundTruth> boxes;
  std::vector<CameraModel> rig;
  BevGrid grid;
  int num_classes = 1;
  std::uint64_t seed = 0;
};

inline std::vector<CameraModel> make_rig(const RigConfig& rc) {
  std::vector<CameraModel> rig;
  for (int i = 0; i < rc.num_cameras; ++i) {
    const double yaw = (rc.first_yaw_deg + 360.0 * i / rc.num_cameras) * std::numbers::pi / 180.0;
    rig.push_back(make_camera(yaw, rc.hfov_deg * std::numbers::pi / 180.0, rc.image_width, rc.image_height,
                              {0.0, 0.0, rc.mount_height}));
  }
  return rig;
}

inline Scene generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
  if (cfg.min_boxes < 0 || cfg.max_boxes < cfg.min_boxes) throw GenerationError("invalid box count range");
  if (cfg.classes.empty()) throw GenerationError("scene config needs at least one class");
  cfg.grid.validate();
  Scene scene;
  scene.grid = cfg.grid;
  scene.num_classes = cfg.num_classes();
  scene.seed = seed;
  scene.rig = make_rig(cfg.rig);

  Rng rng(seed);
  const int n = cfg.min_boxes + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_boxes - cfg.min_boxes + 1)));
  for (int k = 0; k < n; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < cfg.max_retries && !placed; ++attempt) {
      GroundTruth gt;
      gt.class_id = static_cast<int>(rng.below(cfg.classes.size()));
      const ClassTemplate& tpl = cfg.classes[gt.class_id];
      auto jitter = [&](double v) { return v * (1.0 + cfg.size_jitter * rng.uniform(-1.0, 1.0)); };
      gt.box.w = jitter(tpl.w);
      gt.box.l = jitter(tpl.l);
      gt.box.h = jitter(tpl.h);
      const double margin = 0.5 * std::max({gt.box.w, gt.box.l, gt.box.h});
      gt.box.x = rng.uniform(cfg.grid.x_min + margin, cfg.grid.x_max - margin);
      gt.box.y = rng.uniform(cfg.grid.y_min + margin, cfg.grid.y_max - margin);
      gt.box.z = cfg.ground_z + 0.5 * gt.box.h;
      const double theta = rng.uniform(-std::numbers::pi, std::numbers::pi);
      gt.box.sin_theta = std::sin(theta);
      gt.box.cos_theta = std::cos(theta);
      bool ok = true;
      for (const GroundTruth& other : scene.boxes) {
        if (cfg.non_overlap && bev_overlaps(gt.box, other.box)) ok = false;
        if (std::hypot(gt.box.x - other.box.x, gt.box.y - other.box.y) < cfg.min_center_distance) ok = false;
        if (!ok) break;
      }
      if (ok) {
        scene.boxes.push_back(gt);
        placed = true;
      }
    }
    if (!placed)
      throw GenerationError("could not place box " + std::to_string(k) + " after " +
                            std::to_string(cfg.max_retries) + " attempts");
  }
  return scene;
}

// ---------------------------------------------------------------------------
// JSON serialization. Schema documented in docs/formats.md.

inline nlohmann::json grid_to_json(const BevGrid& g) {
  return {{"x_min", g.x_min}, {"y_min", g.y_min}, {"x_max", g.x_max}, {"y_max", g.y_max},
          {"voxel_x", g.voxel_x}, {"voxel_y", g.voxel_y}, {"downsample", g.downsample}};
}

inline BevGrid grid_from_json(const nlohmann::json& j) {
  BevGrid g;
  g.x_min = j.at("x_min").get<double>();
  g.y_min = j.at("y_min").get<double>();
  g.x_max = j.at("x_max").get<double>();
  g.y_max = j.at("y_max").get<double>();
  g.voxel_x = j.at("voxel_x").get<double>();
  g.voxel_y = j.at("voxel_y").get<double>();
  g.downsample = j.at("downsample").get<int>();
  g.validate();
  return g;
}

namespace detail {

inline nlohmann::json mat_to_json(const Mat3& m) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& row : m)
    for (double v : row) a.push_back(v);
  return a;
}

inline Mat3 mat_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 9) throw FormatError("expected a row-major 3x3 matrix (9 numbers)");
  Mat3 m{};
  for (int i = 0; i < 9; ++i) m[i / 3][i % 3] = j[i].get<double>();
  return m;
}

}  // namespace detail

inline nlohmann::json camera_to_json(const CameraModel& c) {
  return {{"intrinsics", detail::mat_to_json(c.intrinsics)},
          {"rotation", detail::mat_to_json(c.rotation)},
          {"translation", {c.translation[0], c.translation[1], c.translation[2]}},
          {"width", c.width},
          {"height", c.height}};
}

inline CameraModel camera_from_json(const nlohmann::json& j) {
  CameraModel c;
  c.intrinsics = detail::mat_from_json(j.at("intrinsics"));
  c.rotation = detail::mat_from_json(j.at("rotation"));
  const auto& t = j.at("translation");
  if (!t.is_array() || t.size() != 3) throw FormatError("camera translation must have 3 entries");
  c.translation = {t[0].get<double>(), t[1].get<double>(), t[2].get<double>()};
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  c.validate();
  return c;
}

inline constexpr int kSceneFormatVersion = 1;

inline nlohmann::json scene_to_json(const Scene& s) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const GroundTruth& gt : s.boxes) {
    const auto a = gt.box.to_array();
    boxes.push_back({{"class_id", gt.class_id}, {"box", std::vector<double>(a.begin(), a.end())}});
  }
  nlohmann::json cams = nlohmann::json::array();
  for (const CameraModel& c : s.rig) cams.push_back(camera_to_json(c));
  return {{"version", kSceneFormatVersion}, {"seed", s.seed},       {"num_classes", s.num_classes},
          {"grid", grid_to_json(s.grid)},   {"boxes", boxes},        {"cameras", cams}};
}

inline Scene scene_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != kSceneFormatVersion) throw FormatError("unsupported scene version");
    Scene s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.num_classes = j.at("num_classes").get<int>();
    s.grid = grid_from_json(j.at("grid"));
    for (const auto& jb : j.at("boxes")) {
      GroundTruth gt;
      gt.class_id = jb.at("class_id").get<int>();
      const auto& a = jb.at("box");
      if (!a.is_array() || a.size() != 8) throw FormatError("box must have 8 numbers");
      std::array<double, 8> v{};
      for (int i = 0; i < 8; ++i) v[i] = a[i].get<double>();
      gt.box = Box3D::from_array(v);
      if (gt.class_id < 0 || gt.class_id >= s.num_classes) throw FormatError("class_id out of range");
      if (!(gt.box.w > 0 && gt.box.l > 0 && gt.box.h > 0)) throw FormatError("box dimensions must be positive");
      s.boxes.push_back(gt);
    }
    for (const auto& jc : j.at("cameras")) s.rig.push_back(camera_from_json(jc));
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed scene JSON: ") + e.what());
  } catch (const GeometryError& e) {
    throw FormatError(std::string("invalid scene geometry: ") + e.what());
  }
}

inline std::string scene_to_string(const Scene& s) { return scene_to_json(s).dump(1) + "\n"; }

inline Scene load_scene(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open scene file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("cannot parse " + path + ": " + e.what());
  }
  return scene_from_json(j);
}

}  // namespace poifusion
