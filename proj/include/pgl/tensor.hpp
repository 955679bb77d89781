#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pgl {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Raised when an operation produces NaN or Inf from finite inputs.
class NumericError : public Error {
 public:
  using Error::Error;
};

class GradError : public Error {
 public:
  using Error::Error;
};

/// Dimension sizes, outermost first. An empty shape denotes a scalar.
using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Live/peak byte counters over all tensor storage, used for the memory column
/// of training reports.
class MemoryStats {
 public:
  static void add(std::size_t bytes) {
    auto now = live().fetch_add(bytes, std::memory_order_relaxed) + bytes;
    auto prev = peak().load(std::memory_order_relaxed);
    while (now > prev && !peak().compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
    }
  }
  static void remove(std::size_t bytes) { live().fetch_sub(bytes, std::memory_order_relaxed); }
  static std::size_t live_bytes() { return live().load(std::memory_order_relaxed); }
  static std::size_t peak_bytes() { return peak().load(std::memory_order_relaxed); }
  static void reset_peak() { peak().store(live_bytes(), std::memory_order_relaxed); }

 private:
  static std::atomic<std::size_t>& live() {
    static std::atomic<std::size_t> v{0};
    return v;
  }
  static std::atomic<std::size_t>& peak() {
    static std::atomic<std::size_t> v{0};
    return v;
  }
};

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  // Identity on the tape that recorded this tensor; 0 means "not on any tape".
  std::uint64_t tape_id = 0;
  std::size_t node = 0;

  TensorImpl(Shape s, std::vector<double> d, bool rg)
      : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
    MemoryStats::add(data.size() * sizeof(double));
  }
  ~TensorImpl() { MemoryStats::remove(data.size() * sizeof(double)); }
  TensorImpl(const TensorImpl&) = delete;
  TensorImpl& operator=(const TensorImpl&) = delete;
};

}  // namespace detail

/// Dense row-major float64 array. Copies share storage and identity; the
/// contents are never modified after construction.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in shape " + to_string(shape));
    }
    if (pgl::numel(shape) != data.size()) {
      throw ShapeError("tensor: shape " + to_string(shape) + " needs " + std::to_string(pgl::numel(shape)) +
                       " elements, got " + std::to_string(data.size()));
    }
    impl_ = std::make_shared<detail::TensorImpl>(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = pgl::numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor scalar(double v, bool requires_grad = false) { return Tensor({}, {v}, requires_grad); }
  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v), requires_grad);
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim() const { return impl_->shape.size(); }
  std::size_t size(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }
  std::span<const double> data() const { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }

  double item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }

  /// Fresh leaf with the same values, detached from any tape.
  Tensor detach(bool requires_grad = false) const { return Tensor(shape(), values(), requires_grad); }

  /// Node index on the tape `tape_id`, if this tensor was recorded there.
  std::optional<std::size_t> node_on(std::uint64_t tape_id) const {
    if (impl_ && tape_id != 0 && impl_->tape_id == tape_id) return impl_->node;
    return std::nullopt;
  }

  bool same_as(const Tensor& other) const { return impl_ == other.impl_; }
  detail::TensorImpl* impl() const { return impl_.get(); }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

inline bool all_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace pgl
