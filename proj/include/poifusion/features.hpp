#pragma once

// Analytic stand-ins for the image and voxel encoders.
//
// Each scene is rendered into a handful of smooth low-dimensional fields on the
// BEV grid and on every camera's P2..P5 feature lattice. A fixed, seeded linear
// lift maps those fields to C channels. The lift depends only on the encoder
// config, never on the scene, so a model trained on one scene sees the same
// channel semantics on every other.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "poifusion/geometry.hpp"
#include "poifusion/random.hpp"
#include "poifusion/scene.hpp"
#include "poifusion/tensor.hpp"

namespace poifusion {

inline constexpr int kPyramidLevels = 4;
inline constexpr std::array<int, kPyramidLevels> kPyramidStrides = {4, 8, 16, 32};

struct FeatureConfig {
  int channels = 256;
  /// Box influence: full strength inside inner_radius, smooth falloff to zero
  /// at outer_radius (meters, BEV distance from the box center).
  double inner_radius = 3.0;
  double outer_radius = 4.5;
  /// Radius of the image-space bumps (meters, ray-to-center distance).
  double image_radius = 2.0;
  std::uint64_t lift_seed = 7;
};

/// Indices of the BEV analytic fields. Class bumps follow kBevClassBase.
struct BevField {
  static constexpr int ramp_x = 0;
  static constexpr int ramp_y = 1;
  static constexpr int offset_x = 2;
  static constexpr int offset_y = 3;
  static constexpr int center_z = 4;
  static constexpr int size_w = 5;
  static constexpr int size_l = 6;
  static constexpr int size_h = 7;
  static constexpr int heading_sin = 8;
  static constexpr int heading_cos = 9;
  static constexpr int signed_distance = 10;
  static constexpr int class_base = 11;
  static int count(int num_classes) { return class_base + num_classes; }
};

struct ImageField {
  static constexpr int ramp_u = 0;
  static constexpr int ramp_v = 1;
  static constexpr int depth = 2;
  static constexpr int class_base = 3;
  static int count(int num_classes) { return class_base + num_classes; }
};

/// Metres per unit of the coordinate-ramp fields.
inline constexpr double kRampScale = 10.0;
/// Metres per unit of the center-offset fields.
inline constexpr double kOffsetScale = 2.0;
/// Metres per unit of the image depth field.
inline constexpr double kDepthScale = 20.0;

/// A C×H×W feature map for one pyramid level plus its stride in pixels.
struct PyramidLevel {
  Tensor map;
  int stride = 1;
};

struct FeatureAtlas {
  Tensor bev;  // C × H × W, W along x, H along y
  std::vector<std::array<PyramidLevel, kPyramidLevels>> pyramids;  // per camera
};

/// Lift matrix C × F (row-major), entries N(0, 1/F).
inline std::vector<double> lift_matrix(int channels, int fields, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> m(static_cast<std::size_t>(channels) * fields);
  const double s = 1.0 / std::sqrt(static_cast<double>(fields));
  for (double& v : m) v = rng.normal(0.0, s);
  return m;
}

inline std::vector<double> bev_lift(const FeatureConfig& fc, int num_classes) {
  return lift_matrix(fc.channels, BevField::count(num_classes), hash_combine(fc.lift_seed, 1));
}

inline std::vector<double> image_lift(const FeatureConfig& fc, int num_classes) {
  return lift_matrix(fc.channels, ImageField::count(num_classes), hash_combine(fc.lift_seed, 2));
}

namespace detail {

inline double taper(double r, double inner, double outer) {
  if (r <= inner) return 1.0;
  if (r >= outer) return 0.0;
  const double t = (r - inner) / (outer - inner);
  return 1.0 - t * t * (3.0 - 2.0 * t);
}

inline double bump(double r, double radius) {
  if (r >= radius) return 0.0;
  const double q = 1.0 - (r / radius) * (r / radius);
  return q * q;
}

/// Signed distance from a BEV point to the box footprint boundary (negative inside).
inline double footprint_signed_distance(const Box3D& b, double px, double py) {
  const double th = b.heading();
  const double c = std::cos(th), s = std::sin(th);
  const double dx = px - b.x, dy = py - b.y;
  const double lx = std::abs(c * dx + s * dy) - 0.5 * b.l;
  const double ly = std::abs(-s * dx + c * dy) - 0.5 * b.w;
  const double ox = std::max(lx, 0.0), oy = std::max(ly, 0.0);
  return std::hypot(ox, oy) + std::min(std::max(lx, ly), 0.0);
}

inline void lift_into(std::span<double> out, std::size_t cells, std::size_t cell, const std::vector<double>& fields,
                      const std::vector<double>& lift, int channels) {
  const std::size_t f = fields.size();
  for (int ch = 0; ch < channels; ++ch) {
    double acc = 0.0;
    const double* row = lift.data() + static_cast<std::size_t>(ch) * f;
    for (std::size_t k = 0; k < f; ++k) acc += row[k] * fields[k];
    out[static_cast<std::size_t>(ch) * cells + cell] = acc;
  }
}

}  // namespace detail

/// Low-dimensional BEV fields at a metric point.
inline std::vector<double> bev_fields_at(const Scene& scene, const FeatureConfig& fc, double px, double py) {
  std::vector<double> f(BevField::count(scene.num_classes), 0.0);
  f[BevField::ramp_x] = px / kRampScale;
  f[BevField::ramp_y] = py / kRampScale;
  double total = 0.0;
  std::vector<double> weights(scene.boxes.size());
  for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
    const Box3D& b = scene.boxes[i].box;
    weights[i] = detail::taper(std::hypot(px - b.x, py - b.y), fc.inner_radius, fc.outer_radius);
    total += weights[i];
  }
  const double norm = std::max(1.0, total);
  for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
    const Box3D& b = scene.boxes[i].box;
    const double r = std::hypot(px - b.x, py - b.y);
    f[BevField::class_base + scene.boxes[i].class_id] += detail::bump(r, fc.outer_radius);
    const double w = weights[i] / norm;
    if (w == 0.0) continue;
    const double th = b.heading();
    f[BevField::offset_x] += w * (b.x - px) / kOffsetScale;
    f[BevField::offset_y] += w * (b.y - py) / kOffsetScale;
    f[BevField::center_z] += w * b.z;
    f[BevField::size_w] += w * b.w * 0.5;
    f[BevField::size_l] += w * b.l * 0.5;
    f[BevField::size_h] += w * b.h * 0.5;
    f[BevField::heading_sin] += w * std::sin(th);
    f[BevField::heading_cos] += w * std::cos(th);
    f[BevField::signed_distance] += w * std::tanh(detail::footprint_signed_distance(b, px, py));
  }
  return f;
}

/// Low-dimensional image fields for the pixel (u, v) of camera `cam`.
inline std::vector<double> image_fields_at(const Scene& scene, const CameraModel& cam, const FeatureConfig& fc,
                                           double u, double v) {
  std::vector<double> f(ImageField::count(scene.num_classes), 0.0);
  f[ImageField::ramp_u] = u / cam.width - 0.5;
  f[ImageField::ramp_v] = v / cam.height - 0.5;
  const Vec3 dir_cam{(u - cam.cx()) / cam.fx(), (v - cam.cy()) / cam.fy(), 1.0};
  Vec3 dir = transposed(cam.rotation) * dir_cam;
  dir = (1.0 / norm(dir)) * dir;
  const Vec3 origin = cam.position();
  for (const GroundTruth& gt : scene.boxes) {
    const Vec3 rel = gt.box.center() - origin;
    const double t = dot(rel, dir);
    if (t <= kNearPlane) continue;
    const double rho = norm(rel - t * dir);
    const double k = detail::bump(rho, fc.image_radius);
    if (k == 0.0) continue;
    f[ImageField::class_base + gt.class_id] += k;
    f[ImageField::depth] += k * t / kDepthScale;
  }
  return f;
}

inline FeatureAtlas encode_oracle_features(const Scene& scene, const FeatureConfig& fc) {
  const BevGrid& g = scene.grid;
  const int w = g.width(), h = g.height(), c = fc.channels;
  FeatureAtlas atlas;
  atlas.bev = Tensor(Shape{static_cast<std::size_t>(c), static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  const auto blift = bev_lift(fc, scene.num_classes);
  const std::size_t cells = static_cast<std::size_t>(w) * h;
  for (int n = 0; n < h; ++n)
    for (int m = 0; m < w; ++m) {
      const auto [px, py] = bev_to_metric({static_cast<double>(m), static_cast<double>(n)}, g);
      detail::lift_into(atlas.bev.data(), cells, static_cast<std::size_t>(n) * w + m,
                        bev_fields_at(scene, fc, px, py), blift, c);
    }

  const auto ilift = image_lift(fc, scene.num_classes);
  for (const CameraModel& cam : scene.rig) {
    std::array<PyramidLevel, kPyramidLevels> pyr;
    for (int lvl = 0; lvl < kPyramidLevels; ++lvl) {
      const int stride = kPyramidStrides[lvl];
      const int lw = (cam.width + stride - 1) / stride, lh = (cam.height + stride - 1) / stride;
      Tensor map(Shape{static_cast<std::size_t>(c), static_cast<std::size_t>(lh), static_cast<std::size_t>(lw)});
      const std::size_t lcells = static_cast<std::size_t>(lw) * lh;
      for (int r = 0; r < lh; ++r)
        for (int col = 0; col < lw; ++col)
          detail::lift_into(map.data(), lcells, static_cast<std::size_t>(r) * lw + col,
                            image_fields_at(scene, cam, fc, col * stride, r * stride), ilift, c);
      pyr[lvl] = {map, stride};
    }
    atlas.pyramids.push_back(std::move(pyr));
  }
  return atlas;
}

// ---------------------------------------------------------------------------
// Corruptions applied at inference.

/// Shortest decimal form that reads back to the same double.
inline std::string format_number(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

struct Corruption {
  enum class Kind { none, calib_offset, camera_drop, lidar_sector };
  Kind kind = Kind::none;
  double max_offset = 0.0;       // meters, calib_offset
  std::vector<int> cameras;      // camera_drop; empty means all
  double center_deg = 0.0;       // lidar_sector
  double width_deg = 0.0;        // lidar_sector, in [0, 360)
  std::uint64_t seed = 0;

  static Corruption calib(double max_offset, std::uint64_t seed) {
    Corruption c;
    c.kind = Kind::calib_offset;
    c.max_offset = max_offset;
    c.seed = seed;
    return c;
  }
  static Corruption drop_cameras(std::vector<int> cams) {
    Corruption c;
    c.kind = Kind::camera_drop;
    c.cameras = std::move(cams);
    return c;
  }
  static Corruption lidar(double center_deg, double width_deg) {
    Corruption c;
    c.kind = Kind::lidar_sector;
    c.center_deg = center_deg;
    c.width_deg = width_deg;
    return c;
  }

  void validate() const {
    if (max_offset < 0.0) throw std::invalid_argument("calibration offset must be >= 0");
    if (width_deg < 0.0 || width_deg >= 360.0) throw std::invalid_argument("sector width must be in [0, 360)");
  }

  std::string label() const {
    switch (kind) {
      case Kind::none: return "clean";
      case Kind::calib_offset: return "calib:" + format_number(max_offset);
      case Kind::camera_drop: {
        if (cameras.empty()) return "camdrop:all";
        std::string s = "camdrop:";
        for (std::size_t i = 0; i < cameras.size(); ++i) s += (i ? "," : "") + std::to_string(cameras[i]);
        return s;
      }
      case Kind::lidar_sector: return "lidar:" + format_number(center_deg) + "," + format_number(width_deg);
    }
    return "unknown";
  }
};

/// Parses "calib:<max_offset_m>", "camdrop:all", "camdrop:<i>,<j>,...",
/// "lidar:<center_deg>,<width_deg>", or "none".
inline Corruption parse_corruption(const std::string& spec, std::uint64_t seed = 0) {
  auto fail = [&](const std::string& why) -> Corruption {
    throw std::invalid_argument("bad corruption spec '" + spec + "': " + why);
  };
  auto number = [&](const std::string& t) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(t, &used);
    } catch (const std::exception&) {
      fail("'" + t + "' is not a number");
    }
    if (used != t.size() || !std::isfinite(v)) fail("'" + t + "' is not a number");
    return v;
  };
  auto split = [](const std::string& t) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    for (std::size_t pos; (pos = t.find(',', start)) != std::string::npos; start = pos + 1)
      parts.push_back(t.substr(start, pos - start));
    parts.push_back(t.substr(start));
    return parts;
  };
  if (spec == "none" || spec.empty()) return {};
  const std::size_t colon = spec.find(':');
  if (colon == std::string::npos) return fail("expected <kind>:<args>");
  const std::string kind = spec.substr(0, colon), args = spec.substr(colon + 1);
  Corruption c;
  if (kind == "calib") {
    c = Corruption::calib(number(args), seed);
  } else if (kind == "camdrop") {
    std::vector<int> cams;
    if (args != "all") {
      for (const std::string& t : split(args)) {
        const double v = number(t);
        if (v < 0 || v != std::floor(v)) fail("camera index must be a non-negative integer");
        cams.push_back(static_cast<int>(v));
      }
    }
    c = Corruption::drop_cameras(std::move(cams));
  } else if (kind == "lidar") {
    const auto parts = split(args);
    if (parts.size() != 2) fail("lidar needs <center_deg>,<width_deg>");
    c = Corruption::lidar(number(parts[0]), number(parts[1]));
  } else {
    fail("unknown kind '" + kind + "'");
  }
  c.validate();
  return c;
}

/// Perturbs the rig the decoder projects with. Sensor data (the atlas) is left
/// as rendered from the true geometry, which is what makes it a misalignment.
inline Scene apply_corruption(Scene scene, const Corruption& c) {
  c.validate();
  if (c.kind != Corruption::Kind::calib_offset || c.max_offset == 0.0) return scene;
  Rng rng(hash_combine(c.seed, scene.seed));
  for (CameraModel& cam : scene.rig)
    for (double& t : cam.translation) t += rng.uniform(-c.max_offset, c.max_offset);
  return scene;
}

inline bool azimuth_in_sector(double x, double y, double center_deg, double width_deg) {
  const double az = std::atan2(y, x) * 180.0 / std::numbers::pi;
  double d = std::fmod(az - center_deg + 540.0, 360.0) - 180.0;
  return std::abs(d) <= 0.5 * width_deg;
}

/// Zero-fills dropped cameras or the BEV cells inside a LiDAR sector.
inline FeatureAtlas apply_corruption(FeatureAtlas atlas, const BevGrid& grid, const Corruption& c) {
  c.validate();
  if (c.kind == Corruption::Kind::camera_drop) {
    for (std::size_t cam = 0; cam < atlas.pyramids.size(); ++cam) {
      const bool drop = c.cameras.empty() ||
                        std::find(c.cameras.begin(), c.cameras.end(), static_cast<int>(cam)) != c.cameras.end();
      if (!drop) continue;
      for (PyramidLevel& lvl : atlas.pyramids[cam]) {
        Tensor zeroed(lvl.map.shape());
        lvl.map = zeroed;
      }
    }
  } else if (c.kind == Corruption::Kind::lidar_sector && c.width_deg > 0.0) {
    Tensor bev = atlas.bev.detached();
    const std::size_t ch = bev.dim(0), h = bev.dim(1), w = bev.dim(2);
    for (std::size_t n = 0; n < h; ++n)
      for (std::size_t m = 0; m < w; ++m) {
        const auto [x, y] = bev_to_metric({static_cast<double>(m), static_cast<double>(n)}, grid);
        if (!azimuth_in_sector(x, y, c.center_deg, c.width_deg)) continue;
        for (std::size_t k = 0; k < ch; ++k) bev[(k * h + n) * w + m] = 0.0;
      }
    atlas.bev = bev;
  }
  return atlas;
}

}  // namespace poifusion
