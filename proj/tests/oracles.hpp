#pragma once

// Test-side reference implementations. Nothing here calls the code it checks.

#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "poifusion/tensor.hpp"

namespace oracle {

inline double rel_err(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Central differences of a scalar function of one tensor's values.
inline std::vector<double> fd_gradient(const std::function<double()>& f, poifusion::Tensor& x, double h = 1e-5) {
  std::vector<double> out(x.numel());
  auto d = x.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double saved = d[i];
    d[i] = saved + h;
    const double up = f();
    d[i] = saved - h;
    const double down = f();
    d[i] = saved;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

inline double worst_rel(std::span<const double> analytic, const std::vector<double>& numeric, double floor = 1e-6) {
  double w = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) w = std::max(w, rel_err(analytic[i], numeric[i], floor));
  return w;
}

inline std::vector<double> normal_values(std::size_t n, unsigned seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, sd);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

inline std::vector<double> uniform_values(std::size_t n, unsigned seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

/// Minimum total cost over all injective gt→query assignments (rows = queries,
/// cols = gt), by exhaustive enumeration.
inline double brute_force_assignment(const std::vector<double>& cost, std::size_t nq, std::size_t ng) {
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> pick(ng);
  std::vector<bool> used(nq, false);
  const double floor = cost.empty() ? 0.0 : *std::min_element(cost.begin(), cost.end());
  std::function<void(std::size_t, double)> rec = [&](std::size_t g, double acc) {
    if (acc + static_cast<double>(ng - g) * floor >= best) return;  // cannot improve
    if (g == ng) {
      best = acc;
      return;
    }
    for (std::size_t q = 0; q < nq; ++q) {
      if (used[q]) continue;
      used[q] = true;
      rec(g + 1, acc + cost[q * ng + g]);
      used[q] = false;
    }
  };
  rec(0, 0.0);
  return ng == 0 ? 0.0 : best;
}

/// Box corners via an Eigen rotation matrix applied to the local corner set.
/// Local axes: x along length, y along width, z up; order sz-major, then sy, then sx.
inline std::array<Eigen::Vector3d, 8> corners(double x, double y, double z, double w, double l, double h,
                                              double theta) {
  const Eigen::Matrix3d R = Eigen::AngleAxisd(theta, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  std::array<Eigen::Vector3d, 8> out;
  int k = 0;
  for (int sz : {-1, 1})
    for (int sy : {-1, 1})
      for (int sx : {-1, 1}) out[k++] = R * Eigen::Vector3d(sx * l / 2, sy * w / 2, sz * h / 2) + Eigen::Vector3d(x, y, z);
  return out;
}

/// Direct bilinear interpolation of a single-channel map at continuous (u, v)
/// with zero padding outside, where integer coordinates are cell centers.
inline double bilinear(const std::vector<double>& map, int h, int w, double u, double v) {
  const double x0 = std::floor(u), y0 = std::floor(v);
  double acc = 0.0;
  for (int dy = 0; dy <= 1; ++dy)
    for (int dx = 0; dx <= 1; ++dx) {
      const int xi = static_cast<int>(x0) + dx, yi = static_cast<int>(y0) + dy;
      const double wt = (dx ? u - x0 : 1 - (u - x0)) * (dy ? v - y0 : 1 - (v - y0));
      if (xi >= 0 && xi < w && yi >= 0 && yi < h) acc += wt * map[static_cast<std::size_t>(yi * w + xi)];
    }
  return acc;
}

using Polygon = std::vector<std::array<double, 2>>;

inline double polygon_area(const Polygon& p) {
  double a = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& u = p[i];
    const auto& v = p[(i + 1) % p.size()];
    a += u[0] * v[1] - v[0] * u[1];
  }
  return 0.5 * std::abs(a);
}

/// Sutherland–Hodgman clip of `subject` by the convex counter-clockwise `clip`.
inline Polygon clip_polygon(Polygon subject, const Polygon& clip) {
  for (std::size_t i = 0; i < clip.size() && !subject.empty(); ++i) {
    const auto a = clip[i], b = clip[(i + 1) % clip.size()];
    auto side = [&](const std::array<double, 2>& p) {
      return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    };
    Polygon out;
    for (std::size_t k = 0; k < subject.size(); ++k) {
      const auto p = subject[k], q = subject[(k + 1) % subject.size()];
      const double sp = side(p), sq = side(q);
      if (sp >= 0) out.push_back(p);
      if ((sp >= 0) != (sq >= 0)) {
        const double t = sp / (sp - sq);
        out.push_back({p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])});
      }
    }
    subject = std::move(out);
  }
  return subject;
}

/// Counter-clockwise BEV rectangle of a box with heading theta.
inline Polygon footprint(double x, double y, double w, double l, double theta) {
  const Eigen::Rotation2Dd r(theta);
  Polygon p;
  for (auto [sx, sy] : std::array<std::pair<int, int>, 4>{{{-1, -1}, {1, -1}, {1, 1}, {-1, 1}}}) {
    const Eigen::Vector2d q = r * Eigen::Vector2d(sx * l / 2, sy * w / 2);
    p.push_back({q.x() + x, q.y() + y});
  }
  return p;
}

inline double bev_iou(const Polygon& a, const Polygon& b) {
  const double inter = polygon_area(clip_polygon(a, b));
  return inter / (polygon_area(a) + polygon_area(b) - inter);
}

}  // namespace oracle
