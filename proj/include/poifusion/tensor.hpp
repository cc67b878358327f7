#pragma once

// Dense 64-bit tensors and the reverse-mode tape that records their adjoints.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace poifusion {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline constexpr std::size_t kMaxRank = 3;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

/// Cache-line aligned allocation. Vectorized reductions peel by pointer
/// alignment, so a fixed alignment keeps results independent of the heap.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

struct TensorNode {
  Shape shape;
  std::shared_ptr<Buffer> storage;
  Buffer grad;
  bool requires_grad = false;
};

}  // namespace detail

/// Shared handle to a row-major tensor of doubles. Copies alias the same node;
/// use detached() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : Tensor(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad) {}

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape.size() > kMaxRank)
      throw DimensionError("tensor rank " + std::to_string(shape.size()) + " exceeds 3");
    if (values.size() != shape_numel(shape))
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    node_ = std::make_shared<detail::TensorNode>();
    node_->shape = std::move(shape);
    node_->storage = std::make_shared<detail::Buffer>(values.begin(), values.end());
    set_requires_grad(requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor(Shape{}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->storage->size(); }

  std::span<double> data() { return *node_->storage; }
  std::span<const double> data() const { return *node_->storage; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on)
      node_->grad.assign(numel(), 0.0);
    else
      node_->grad.clear();
  }

  /// Gradient buffer; empty unless requires_grad().
  // Gradient buffers are accumulation targets shared by every handle to the
  // node, so they stay writable through const handles.
  std::span<double> grad() const { return node_->grad; }

  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  double item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return (*node_->storage)[0];
  }

  double& operator[](std::size_t i) { return (*node_->storage)[i]; }
  double operator[](std::size_t i) const { return (*node_->storage)[i]; }

  /// Independent copy of the values without gradient tracking.
  Tensor detached() const {
    return Tensor(shape(), std::vector<double>(node_->storage->begin(), node_->storage->end()), false);
  }

  /// Same value storage, private gradient buffer. Used to give each worker its
  /// own gradient accumulator over shared parameters.
  Tensor shared_view() const {
    Tensor out;
    out.node_ = std::make_shared<detail::TensorNode>();
    out.node_->shape = node_->shape;
    out.node_->storage = node_->storage;
    out.set_requires_grad(node_->requires_grad);
    return out;
  }

  /// New node over the same value storage with a different shape of equal
  /// size and no gradient tracking.
  Tensor view_as(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw DimensionError("cannot view " + shape_str(this->shape()) + " as " + shape_str(shape));
    Tensor out;
    out.node_ = std::make_shared<detail::TensorNode>();
    out.node_->shape = std::move(shape);
    out.node_->storage = node_->storage;
    return out;
  }

  bool is_same(const Tensor& other) const { return node_ == other.node_; }

  bool all_finite() const {
    for (double v : data())
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  friend class Tape;
  std::shared_ptr<detail::TensorNode> node_;
};

/// Ordered record of adjoint closures. backward() replays them in exact
/// reverse order; every adjoint accumulates into its inputs' gradients.
class Tape {
 public:
  void record(std::function<void()> adjoint) { adjoints_.push_back(std::move(adjoint)); }

  std::size_t size() const { return adjoints_.size(); }

  void backward(Tensor root) {
    if (root.numel() != 1)
      throw DimensionError("backward() needs a scalar root, got " + shape_str(root.shape()));
    if (!root.requires_grad()) return;
    root.grad()[0] += 1.0;
    for (auto it = adjoints_.rbegin(); it != adjoints_.rend(); ++it) (*it)();
    adjoints_.clear();
  }

  void clear() { adjoints_.clear(); }

 private:
  std::vector<std::function<void()>> adjoints_;
};

}  // namespace poifusion
