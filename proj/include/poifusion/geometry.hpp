#pragma once

// 3D boxes, BEV grid coordinates, and pinhole camera projection.
//
// Frames: the LiDAR/ego frame is right-handed with +z up. Heading is measured
// in the BEV plane from +x toward +y. Camera frames follow the usual optical
// convention (+z forward, +x right, +y down).

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace poifusion {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<std::array<double, 3>, 3>;

class GeometryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

inline Vec3 operator*(const Mat3& m, const Vec3& v) {
  return {dot(m[0], v), dot(m[1], v), dot(m[2], v)};
}

inline Mat3 transposed(const Mat3& m) {
  Mat3 t{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) t[i][j] = m[j][i];
  return t;
}

inline double determinant(const Mat3& m) {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

inline Mat3 rotation_z(double theta) {
  const double c = std::cos(theta), s = std::sin(theta);
  return Mat3{{{c, -s, 0.0}, {s, c, 0.0}, {0.0, 0.0, 1.0}}};
}

/// [x, y, z, w, l, h, sinθ, cosθ]. (sin, cos) need not be unit length.
struct Box3D {
  double x = 0.0, y = 0.0, z = 0.0;
  double w = 1.0, l = 1.0, h = 1.0;
  double sin_theta = 0.0, cos_theta = 1.0;

  static Box3D from_array(const std::array<double, 8>& a) {
    return {a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7]};
  }
  std::array<double, 8> to_array() const { return {x, y, z, w, l, h, sin_theta, cos_theta}; }

  Vec3 center() const { return {x, y, z}; }

  double heading() const {
    if (sin_theta == 0.0 && cos_theta == 0.0) throw GeometryError("degenerate heading: (sin, cos) = (0, 0)");
    return std::atan2(sin_theta, cos_theta);
  }

  friend bool operator==(const Box3D&, const Box3D&) = default;
};

/// Local corner signs in canonical order: index = 4·sz + 2·sy + sx, bit 0 is
/// the negative side. x is along the heading (length), y lateral (width).
inline constexpr std::array<std::array<double, 3>, 8> kCornerSigns = {{
    {-1, -1, -1}, {+1, -1, -1}, {-1, +1, -1}, {+1, +1, -1},
    {-1, -1, +1}, {+1, -1, +1}, {-1, +1, +1}, {+1, +1, +1},
}};

inline std::array<Vec3, 8> box_corners(const Box3D& b) {
  if (!(b.w > 0.0 && b.l > 0.0 && b.h > 0.0)) throw GeometryError("box dimensions must be positive");
  const double theta = b.heading();
  const double c = std::cos(theta), s = std::sin(theta);
  std::array<Vec3, 8> out{};
  for (std::size_t i = 0; i < 8; ++i) {
    const double lx = kCornerSigns[i][0] * 0.5 * b.l;
    const double ly = kCornerSigns[i][1] * 0.5 * b.w;
    const double lz = kCornerSigns[i][2] * 0.5 * b.h;
    out[i] = {b.x + c * lx - s * ly, b.y + s * lx + c * ly, b.z + lz};
  }
  return out;
}

/// BEV footprint corners (counter-clockwise) of a box.
inline std::array<std::array<double, 2>, 4> bev_footprint(const Box3D& b) {
  const auto c = box_corners(b);
  // Bottom face in canonical order is (-,-), (+,-), (-,+), (+,+); reorder CCW.
  return {{{c[0][0], c[0][1]}, {c[1][0], c[1][1]}, {c[3][0], c[3][1]}, {c[2][0], c[2][1]}}};
}

/// Separating-axis overlap test for two BEV footprints (touching counts as
/// not overlapping).
inline bool bev_overlaps(const Box3D& a, const Box3D& b) {
  const auto pa = bev_footprint(a), pb = bev_footprint(b);
  for (const auto* poly : {&pa, &pb}) {
    for (std::size_t i = 0; i < 4; ++i) {
      const auto& p0 = (*poly)[i];
      const auto& p1 = (*poly)[(i + 1) % 4];
      const double nx = -(p1[1] - p0[1]), ny = p1[0] - p0[0];
      double amin = INFINITY, amax = -INFINITY, bmin = INFINITY, bmax = -INFINITY;
      for (const auto& q : pa) {
        const double d = nx * q[0] + ny * q[1];
        amin = std::min(amin, d);
        amax = std::max(amax, d);
      }
      for (const auto& q : pb) {
        const double d = nx * q[0] + ny * q[1];
        bmin = std::min(bmin, d);
        bmax = std::max(bmax, d);
      }
      if (amax <= bmin || bmax <= amin) return false;
    }
  }
  return true;
}

struct BevGrid {
  double x_min = -14.4, y_min = -14.4, x_max = 14.4, y_max = 14.4;
  double voxel_x = 0.075, voxel_y = 0.075;
  int downsample = 8;

  double cell_x() const { return voxel_x * downsample; }
  double cell_y() const { return voxel_y * downsample; }

  /// Feature map width (along x) and height (along y).
  int width() const { return extent(x_max - x_min, cell_x(), "x"); }
  int height() const { return extent(y_max - y_min, cell_y(), "y"); }

  void validate() const {
    if (!(x_max > x_min) || !(y_max > y_min)) throw GeometryError("BEV range must have max > min");
    if (!(voxel_x > 0.0) || !(voxel_y > 0.0) || downsample < 1)
      throw GeometryError("BEV voxel sizes and downsample must be positive");
    (void)width();
    (void)height();
  }

  bool contains(double x, double y) const { return x > x_min && x < x_max && y > y_min && y < y_max; }

 private:
  static int extent(double range, double cell, const char* axis) {
    const double n = range / cell;
    const double r = std::round(n);
    if (std::abs(n - r) > 1e-6 || r < 1)
      throw GeometryError(std::string("BEV ") + axis + " range is not an integral number of feature cells");
    return static_cast<int>(r);
  }
};

/// Continuous BEV feature coordinates (m along x, n along y), in cells.
struct BevCoord {
  double m = 0.0, n = 0.0;
};

inline BevCoord project_bev(const Vec3& p, const BevGrid& g) {
  return {(p[0] - g.x_min) / g.cell_x(), (p[1] - g.y_min) / g.cell_y()};
}

inline std::array<double, 2> bev_to_metric(const BevCoord& c, const BevGrid& g) {
  return {g.x_min + c.m * g.cell_x(), g.y_min + c.n * g.cell_y()};
}

inline constexpr double kNearPlane = 0.1;

struct CameraModel {
  Mat3 intrinsics{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  Mat3 rotation{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  Vec3 translation{0, 0, 0};
  int width = 1, height = 1;

  double fx() const { return intrinsics[0][0]; }
  double fy() const { return intrinsics[1][1]; }
  double cx() const { return intrinsics[0][2]; }
  double cy() const { return intrinsics[1][2]; }

  /// Camera center in the LiDAR frame.
  Vec3 position() const { return -1.0 * (transposed(rotation) * translation); }

  void validate() const {
    if (!(fx() > 0.0) || !(fy() > 0.0)) throw GeometryError("camera focal lengths must be positive");
    if (intrinsics[0][1] != 0.0 || intrinsics[1][0] != 0.0 || intrinsics[2][0] != 0.0 ||
        intrinsics[2][1] != 0.0 || intrinsics[2][2] != 1.0)
      throw GeometryError("camera intrinsics must be [[fx,0,cx],[0,fy,cy],[0,0,1]]");
    const Mat3 rtr = [&] {
      Mat3 out{};
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) out[i][j] = dot(rotation[i], rotation[j]);
      return out;
    }();
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        if (std::abs(rtr[i][j] - (i == j ? 1.0 : 0.0)) > 1e-9)
          throw GeometryError("camera rotation is not orthonormal");
    if (std::abs(determinant(rotation) - 1.0) > 1e-9) throw GeometryError("camera rotation has det != +1");
    if (width < 1 || height < 1) throw GeometryError("camera image size must be positive");
  }
};

/// Camera looking horizontally along yaw `yaw` (radians, BEV convention) from
/// `position`, with horizontal field of view `hfov` and the principal point at
/// the image center.
inline CameraModel make_camera(double yaw, double hfov, int width, int height, const Vec3& position) {
  CameraModel cam;
  const double f = 0.5 * width / std::tan(0.5 * hfov);
  cam.intrinsics = Mat3{{{f, 0.0, 0.5 * width}, {0.0, f, 0.5 * height}, {0.0, 0.0, 1.0}}};
  const double c = std::cos(yaw), s = std::sin(yaw);
  cam.rotation = Mat3{{{s, -c, 0.0}, {0.0, 0.0, -1.0}, {c, s, 0.0}}};
  cam.translation = -1.0 * (cam.rotation * position);
  cam.width = width;
  cam.height = height;
  return cam;
}

struct PixelProjection {
  double u = 0.0, v = 0.0, depth = 0.0;
};

/// Perspective projection with homogeneous divide. Empty when the point is
/// closer than the near plane or lands outside [0,width]×[0,height].
inline std::optional<PixelProjection> project_camera(const Vec3& p, const CameraModel& cam) {
  const Vec3 q = cam.rotation * p + cam.translation;
  if (q[2] <= kNearPlane) return std::nullopt;
  const double u = cam.fx() * q[0] / q[2] + cam.cx();
  const double v = cam.fy() * q[1] / q[2] + cam.cy();
  if (u < 0.0 || u > cam.width || v < 0.0 || v > cam.height) return std::nullopt;
  return PixelProjection{u, v, q[2]};
}

inline std::vector<int> visible_views(const Vec3& p, const std::vector<CameraModel>& rig) {
  std::vector<int> out;
  for (std::size_t i = 0; i < rig.size(); ++i)
    if (project_camera(p, rig[i])) out.push_back(static_cast<int>(i));
  return out;
}

}  // namespace poifusion
