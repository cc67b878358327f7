#pragma once

// Object queries: a 3D box plus a feature vector, both learnable.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "poifusion/geometry.hpp"
#include "poifusion/random.hpp"

namespace poifusion {

struct ObjectQuery {
  Box3D box;
  std::vector<double> feat;
};

inline constexpr double kInitWidth = 6.0;
inline constexpr double kInitLength = 3.0;
inline constexpr double kInitHeight = 2.0;

/// Centers on a ⌈√n⌉×⌈√n⌉ lattice of cell midpoints over the BEV range,
/// truncated to n in row-major order; z = 0, dims (6, 3, 2), heading 0.
/// Features are N(0, feat_std²) from `seed`.
inline std::vector<ObjectQuery> init_queries(int n, const BevGrid& grid, std::uint64_t seed, int feat_dim = 256,
                                             double feat_std = 0.02) {
  if (n < 1) throw std::invalid_argument("init_queries needs n >= 1");
  const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
  const double dx = (grid.x_max - grid.x_min) / side;
  const double dy = (grid.y_max - grid.y_min) / side;
  Rng rng(seed);
  std::vector<ObjectQuery> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    ObjectQuery q;
    const int row = i / side, col = i % side;
    q.box = {grid.x_min + (col + 0.5) * dx, grid.y_min + (row + 0.5) * dy, 0.0, kInitWidth, kInitLength,
             kInitHeight, 0.0, 1.0};
    q.feat.resize(feat_dim);
    for (double& v : q.feat) v = rng.normal(0.0, feat_std);
    out.push_back(std::move(q));
  }
  return out;
}

}  // namespace poifusion
