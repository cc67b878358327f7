#pragma once

// Differentiable tensor operations. Every op computes its forward value eagerly
// and, when any input tracks gradients, records an adjoint on the tape.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <vector>

#include "poifusion/tensor.hpp"

namespace poifusion::ops {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap cmap(std::span<const double> s, std::size_t rows, std::size_t cols) {
  return ConstMap(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline MutMap mmap(std::span<double> s, std::size_t rows, std::size_t cols) {
  return MutMap(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline bool tracks(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

inline bool is_scalar(const Tensor& t) { return t.numel() == 1 && t.rank() == 0; }

inline std::size_t last_dim(const Tensor& t) {
  if (t.rank() == 0) throw DimensionError("operation needs rank >= 1");
  return t.shape().back();
}

inline Shape with_last(Shape s, std::size_t last) {
  s.back() = last;
  return s;
}

template <class F>
Tensor unary(Tape& tape, const Tensor& x, F&& forward_and_slope) {
  Tensor out(x.shape());
  std::vector<double> slope(x.numel());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = forward_and_slope(xv[i], slope[i]);
  if (tracks({&x})) {
    out.set_requires_grad(true);
    tape.record([x, out, slope = std::move(slope)]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * slope[i];
    });
  }
  return out;
}

}  // namespace detail

/// Matrix product. Supports [m×k]·[k×n], batched [B×m×k]·[B×k×n], and
/// [B×m×k]·[k×n] with the right operand shared across the batch.
inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  using detail::cmap;
  using detail::mmap;
  if (a.rank() < 2 || b.rank() < 2)
    throw DimensionError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const bool shared_rhs = a.rank() == 3 && b.rank() == 2;
  if (!shared_rhs && a.rank() != b.rank())
    throw DimensionError("matmul rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t batch = (a.rank() == 3 && !shared_rhs) ? a.dim(0) : 1;
  if (a.rank() == 3 && !shared_rhs && b.dim(0) != batch)
    throw DimensionError("matmul batch mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t m = shared_rhs ? a.dim(0) * a.dim(1) : a.dim(a.rank() - 2);
  const std::size_t k = a.shape().back();
  const std::size_t kb = b.dim(b.rank() - 2);
  const std::size_t n = b.shape().back();
  if (k != kb)
    throw DimensionError("matmul inner dimensions differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));

  Shape out_shape = a.shape();
  out_shape.back() = n;
  Tensor out(out_shape);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    auto av = a.data().subspan(bi * m * k, m * k);
    auto bv = shared_rhs ? b.data() : b.data().subspan(bi * k * n, k * n);
    auto ov = out.data().subspan(bi * m * n, m * n);
    mmap(ov, m, n).noalias() = cmap(av, m, k) * cmap(bv, k, n);
  }
  if (detail::tracks({&a, &b})) {
    out.set_requires_grad(true);
    tape.record([a, b, out, batch, m, k, n, shared_rhs]() mutable {
      for (std::size_t bi = 0; bi < batch; ++bi) {
        auto gc = cmap(std::span<const double>(out.grad()).subspan(bi * m * n, m * n), m, n);
        if (a.requires_grad()) {
          auto bv = shared_rhs ? b.data() : b.data().subspan(bi * k * n, k * n);
          mmap(a.grad().subspan(bi * m * k, m * k), m, k).noalias() += gc * cmap(bv, k, n).transpose();
        }
        if (b.requires_grad()) {
          auto av = a.data().subspan(bi * m * k, m * k);
          auto gb = shared_rhs ? b.grad() : b.grad().subspan(bi * k * n, k * n);
          mmap(gb, k, n).noalias() += cmap(av, m, k).transpose() * gc;
        }
      }
    });
  }
  return out;
}

/// Swap the last two axes.
inline Tensor transpose(Tape& tape, const Tensor& a) {
  if (a.rank() < 2) throw DimensionError("transpose needs rank >= 2");
  const std::size_t batch = a.rank() == 3 ? a.dim(0) : 1;
  const std::size_t r = a.dim(a.rank() - 2), c = a.shape().back();
  Shape s = a.shape();
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  Tensor out(s);
  for (std::size_t bi = 0; bi < batch; ++bi)
    detail::mmap(out.data().subspan(bi * r * c, r * c), c, r) =
        detail::cmap(a.data().subspan(bi * r * c, r * c), r, c).transpose();
  if (detail::tracks({&a})) {
    out.set_requires_grad(true);
    tape.record([a, out, batch, r, c]() mutable {
      for (std::size_t bi = 0; bi < batch; ++bi)
        detail::mmap(a.grad().subspan(bi * r * c, r * c), r, c) +=
            detail::cmap(std::span<const double>(out.grad()).subspan(bi * r * c, r * c), c, r).transpose();
    });
  }
  return out;
}

/// y = x·w + b over the last axis of x (any leading dims). b may be undefined.
inline Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b = {}) {
  using detail::cmap;
  using detail::mmap;
  if (w.rank() != 2) throw DimensionError("linear weight must be rank 2, got " + shape_str(w.shape()));
  const std::size_t in = detail::last_dim(x);
  if (w.dim(0) != in)
    throw DimensionError("linear: input width " + std::to_string(in) + " vs weight " + shape_str(w.shape()));
  const std::size_t out_w = w.dim(1);
  if (b.defined() && (b.rank() != 1 || b.dim(0) != out_w))
    throw DimensionError("linear: bias shape " + shape_str(b.shape()) + " vs output width " +
                         std::to_string(out_w));
  const std::size_t rows = x.numel() / in;
  Tensor out(detail::with_last(x.shape(), out_w));
  auto om = mmap(out.data(), rows, out_w);
  om.noalias() = cmap(x.data(), rows, in) * cmap(w.data(), in, out_w);
  if (b.defined()) om.rowwise() += cmap(b.data(), 1, out_w).row(0);
  if (detail::tracks({&x, &w, &b})) {
    out.set_requires_grad(true);
    tape.record([x, w, b, out, rows, in, out_w]() mutable {
      auto g = cmap(out.grad(), rows, out_w);
      if (x.requires_grad()) mmap(x.grad(), rows, in).noalias() += g * cmap(w.data(), in, out_w).transpose();
      if (w.requires_grad()) mmap(w.grad(), in, out_w).noalias() += cmap(x.data(), rows, in).transpose() * g;
      if (b.defined() && b.requires_grad()) mmap(b.grad(), 1, out_w) += g.colwise().sum();
    });
  }
  return out;
}

namespace detail {

// Elementwise binary op with exact-shape or scalar operands.
template <class F, class DA, class DB>
Tensor binary(Tape& tape, const Tensor& a, const Tensor& b, const char* name, F f, DA da, DB db) {
  const bool a_s = is_scalar(a) && !is_scalar(b);
  const bool b_s = is_scalar(b) && !is_scalar(a);
  if (!a_s && !b_s && a.shape() != b.shape())
    throw DimensionError(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  Tensor out(a_s ? b.shape() : a.shape());
  const std::size_t n = out.numel();
  auto av = a.data();
  auto bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < n; ++i) ov[i] = f(av[a_s ? 0 : i], bv[b_s ? 0 : i]);
  if (tracks({&a, &b})) {
    out.set_requires_grad(true);
    tape.record([a, b, out, a_s, b_s, n, da, db]() mutable {
      auto g = out.grad();
      auto av = a.data();
      auto bv = b.data();
      for (std::size_t i = 0; i < n; ++i) {
        const double x = av[a_s ? 0 : i], y = bv[b_s ? 0 : i];
        if (a.requires_grad()) a.grad()[a_s ? 0 : i] += g[i] * da(x, y);
        if (b.requires_grad()) b.grad()[b_s ? 0 : i] += g[i] * db(x, y);
      }
    });
  }
  return out;
}

}  // namespace detail

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary(
      tape, a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary(
      tape, a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary(
      tape, a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor scale(Tape& tape, const Tensor& x, double c) {
  return detail::unary(tape, x, [c](double v, double& s) {
    s = c;
    return c * v;
  });
}

inline Tensor add_scalar(Tape& tape, const Tensor& x, double c) {
  return detail::unary(tape, x, [c](double v, double& s) {
    s = 1.0;
    return v + c;
  });
}

/// Subgradient 0 at exactly 0.
inline Tensor relu(Tape& tape, const Tensor& x) {
  return detail::unary(tape, x, [](double v, double& s) {
    s = v > 0.0 ? 1.0 : 0.0;
    return v > 0.0 ? v : 0.0;
  });
}

inline Tensor abs(Tape& tape, const Tensor& x) {
  return detail::unary(tape, x, [](double v, double& s) {
    s = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
    return std::abs(v);
  });
}

inline Tensor exp(Tape& tape, const Tensor& x) {
  return detail::unary(tape, x, [](double v, double& s) {
    s = std::exp(v);
    return s;
  });
}

inline Tensor sigmoid(Tape& tape, const Tensor& x) {
  return detail::unary(tape, x, [](double v, double& s) {
    const double y = 1.0 / (1.0 + std::exp(-v));
    s = y * (1.0 - y);
    return y;
  });
}

inline Tensor softplus(Tape& tape, const Tensor& x) {
  return detail::unary(tape, x, [](double v, double& s) {
    s = 1.0 / (1.0 + std::exp(-v));
    return v > 30.0 ? v : std::log1p(std::exp(v));
  });
}

inline Tensor sum(Tape& tape, const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor out = Tensor::scalar(acc);
  if (detail::tracks({&x})) {
    out.set_requires_grad(true);
    tape.record([x, out]() mutable {
      const double g = out.grad()[0];
      for (double& gx : x.grad()) gx += g;
    });
  }
  return out;
}

inline Tensor mean(Tape& tape, const Tensor& x) {
  return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.numel()));
}

/// Same values under a new shape of equal size.
inline Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  Tensor out = x.view_as(std::move(shape));
  if (detail::tracks({&x})) {
    out.set_requires_grad(true);
    tape.record([x, out]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

/// Concatenate along the last axis; leading dims must agree.
inline Tensor concat(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& lead = parts.front().shape();
  if (lead.empty()) throw DimensionError("concat needs rank >= 1");
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != lead.size() || !std::equal(lead.begin(), lead.end() - 1, p.shape().begin()))
      throw DimensionError("concat: incompatible shapes " + shape_str(lead) + " and " + shape_str(p.shape()));
    total += p.shape().back();
  }
  const std::size_t rows = parts.front().numel() / lead.back();
  Tensor out(detail::with_last(lead, total));
  auto ov = out.data();
  std::size_t offset = 0;
  bool any = false;
  for (const Tensor& p : parts) {
    const std::size_t w = p.shape().back();
    auto pv = p.data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pv.begin() + r * w, w, ov.begin() + r * total + offset);
    offset += w;
    any = any || p.requires_grad();
  }
  if (any) {
    out.set_requires_grad(true);
    tape.record([parts, out, rows, total]() mutable {
      auto g = out.grad();
      std::size_t offset = 0;
      for (const Tensor& p : parts) {
        const std::size_t w = p.shape().back();
        if (p.requires_grad()) {
          auto gp = p.grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c) gp[r * w + c] += g[r * total + offset + c];
        }
        offset += w;
      }
    });
  }
  return out;
}

/// Columns [begin, end) of the last axis.
inline Tensor slice_last(Tape& tape, const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t w = detail::last_dim(x);
  if (begin >= end || end > w)
    throw DimensionError("slice_last: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of width " + std::to_string(w));
  const std::size_t rows = x.numel() / w, n = end - begin;
  Tensor out(detail::with_last(x.shape(), n));
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(xv.begin() + r * w + begin, n, ov.begin() + r * n);
  if (detail::tracks({&x})) {
    out.set_requires_grad(true);
    tape.record([x, out, rows, w, begin, n]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < n; ++c) gx[r * w + begin + c] += g[r * n + c];
    });
  }
  return out;
}

/// Rows of a rank-2 tensor picked by index (repeats allowed).
inline Tensor gather_rows(Tape& tape, const Tensor& x, std::vector<std::size_t> rows) {
  if (x.rank() != 2) throw DimensionError("gather_rows needs rank 2, got " + shape_str(x.shape()));
  const std::size_t w = x.dim(1);
  Tensor out(Shape{rows.size(), w});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.dim(0)) throw DimensionError("gather_rows: index out of range");
    std::copy_n(x.data().begin() + rows[i] * w, w, out.data().begin() + i * w);
  }
  if (detail::tracks({&x})) {
    out.set_requires_grad(true);
    tape.record([x, out, rows = std::move(rows), w]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t c = 0; c < w; ++c) gx[rows[i] * w + c] += g[i * w + c];
    });
  }
  return out;
}

/// [R×C] -> [R·k × C], each row repeated k times consecutively.
inline Tensor repeat_rows(Tape& tape, const Tensor& x, std::size_t k) {
  if (x.rank() != 2) throw DimensionError("repeat_rows needs rank 2, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor out(Shape{r * k, c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < k; ++j)
      std::copy_n(x.data().begin() + i * c, c, out.data().begin() + (i * k + j) * c);
  if (detail::tracks({&x})) {
    out.set_requires_grad(true);
    tape.record([x, out, r, c, k]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < k; ++j)
          for (std::size_t q = 0; q < c; ++q) gx[i * c + q] += g[(i * k + j) * c + q];
    });
  }
  return out;
}

/// [A×B×C] -> [A × k·B × C], the B-block tiled k times along axis 1.
inline Tensor tile_middle(Tape& tape, const Tensor& x, std::size_t k) {
  if (x.rank() != 3) throw DimensionError("tile_middle needs rank 3, got " + shape_str(x.shape()));
  const std::size_t a = x.dim(0), block = x.dim(1) * x.dim(2);
  Tensor out(Shape{a, k * x.dim(1), x.dim(2)});
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < k; ++j)
      std::copy_n(x.data().begin() + i * block, block, out.data().begin() + (i * k + j) * block);
  if (detail::tracks({&x})) {
    out.set_requires_grad(true);
    tape.record([x, out, a, block, k]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < a; ++i)
        for (std::size_t j = 0; j < k; ++j)
          for (std::size_t q = 0; q < block; ++q) gx[i * block + q] += g[(i * k + j) * block + q];
    });
  }
  return out;
}

/// [A×B×C] -> [B×A×C].
inline Tensor swap_leading(Tape& tape, const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("swap_leading needs rank 3, got " + shape_str(x.shape()));
  const std::size_t a = x.dim(0), b = x.dim(1), c = x.dim(2);
  Tensor out(Shape{b, a, c});
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < b; ++j)
      std::copy_n(x.data().begin() + (i * b + j) * c, c, out.data().begin() + (j * a + i) * c);
  if (detail::tracks({&x})) {
    out.set_requires_grad(true);
    tape.record([x, out, a, b, c]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < a; ++i)
        for (std::size_t j = 0; j < b; ++j)
          for (std::size_t q = 0; q < c; ++q) gx[(i * b + j) * c + q] += g[(j * a + i) * c + q];
    });
  }
  return out;
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalize each row of the last axis to zero mean and unit variance, then
/// apply gamma/beta. Either affine tensor may be undefined.
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma = {}, const Tensor& beta = {},
                         double eps = kLayerNormEps) {
  const std::size_t c = detail::last_dim(x);
  if (c < 2) throw DimensionError("layer_norm needs at least 2 channels");
  for (const Tensor* p : {&gamma, &beta})
    if (p->defined() && (p->rank() != 1 || p->dim(0) != c))
      throw DimensionError("layer_norm affine shape " + shape_str(p->shape()) + " vs width " +
                           std::to_string(c));
  const std::size_t rows = x.numel() / c;
  Tensor out(x.shape());
  std::vector<double> xhat(x.numel()), inv_std(rows);
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * c;
    double mu = 0.0;
    for (std::size_t i = 0; i < c; ++i) mu += row[i];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t i = 0; i < c; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t i = 0; i < c; ++i) {
      const double h = (row[i] - mu) * is;
      xhat[r * c + i] = h;
      ov[r * c + i] = h * (gamma.defined() ? gamma.data()[i] : 1.0) + (beta.defined() ? beta.data()[i] : 0.0);
    }
  }
  if (detail::tracks({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    tape.record([x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, c]() mutable {
      auto g = out.grad();
      std::vector<double> dh(c);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g.data() + r * c;
        const double* hr = xhat.data() + r * c;
        double sum_dh = 0.0, sum_dh_h = 0.0;
        for (std::size_t i = 0; i < c; ++i) {
          dh[i] = gr[i] * (gamma.defined() ? gamma.data()[i] : 1.0);
          sum_dh += dh[i];
          sum_dh_h += dh[i] * hr[i];
          if (gamma.defined() && gamma.requires_grad()) gamma.grad()[i] += gr[i] * hr[i];
          if (beta.defined() && beta.requires_grad()) beta.grad()[i] += gr[i];
        }
        if (x.requires_grad()) {
          const double inv_c = 1.0 / static_cast<double>(c);
          double* gx = x.grad().data() + r * c;
          for (std::size_t i = 0; i < c; ++i)
            gx[i] += inv_std[r] * (dh[i] - inv_c * sum_dh - hr[i] * inv_c * sum_dh_h);
        }
      }
    });
  }
  return out;
}

/// Softmax over the last axis, max-shifted.
inline Tensor softmax(Tape& tape, const Tensor& x) {
  const std::size_t c = detail::last_dim(x);
  if (c < 1) throw DimensionError("softmax over empty axis");
  const std::size_t rows = x.numel() / c;
  Tensor out(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * c;
    double* o = ov.data() + r * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t i = 0; i < c; ++i) z += (o[i] = std::exp(row[i] - mx));
    for (std::size_t i = 0; i < c; ++i) o[i] /= z;
  }
  if (detail::tracks({&x})) {
    out.set_requires_grad(true);
    tape.record([x, out, rows, c]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t i = 0; i < c; ++i) dot += g[r * c + i] * y[r * c + i];
        for (std::size_t i = 0; i < c; ++i) gx[r * c + i] += y[r * c + i] * (g[r * c + i] - dot);
      }
    });
  }
  return out;
}

}  // namespace poifusion::ops
