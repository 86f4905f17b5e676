#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <new>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cascade/errors.hpp"

namespace cascade {

using Shape = std::vector<std::size_t>;

/// Allocator with a fixed 64-byte boundary. Eigen picks vectorised code
/// paths by pointer alignment, so a fixed boundary keeps results bitwise
/// reproducible from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until first needed
  bool requires_grad = false;
};

}  // namespace detail

/// Dense row-major tensor. Copies share storage (handle semantics), so a
/// parameter and the graph nodes that reference it see the same buffer.
/// Models run on `Tensor` (float); gradient checks instantiate double.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  BasicTensor(Shape shape, Buffer<T> data, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    for (std::size_t extent : shape) {
      if (extent == 0) {
        throw DimensionError("tensor extents must be positive, got " +
                             shape_string(shape));
      }
    }
    if (shape_size(shape) != data.size()) {
      throw DimensionError("shape " + shape_string(shape) + " needs " +
                           std::to_string(shape_size(shape)) +
                           " values, got " + std::to_string(data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  BasicTensor(Shape shape, const std::vector<T>& data, bool requires_grad = false)
      : BasicTensor(std::move(shape), Buffer<T>(data.begin(), data.end()), requires_grad) {}

  BasicTensor(Shape shape, std::initializer_list<T> data, bool requires_grad = false)
      : BasicTensor(std::move(shape), Buffer<T>(data), requires_grad) {}

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_size(shape);
    return BasicTensor(std::move(shape), Buffer<T>(n, T(0)), requires_grad);
  }

  static BasicTensor scalar(T value, bool requires_grad = false) {
    return BasicTensor({1}, {value}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t size() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  /// Direct write access. Reserved for initialisation, optimisers and
  /// checkpoint loading; graph ops never mutate their inputs.
  std::span<T> mutable_data() { return impl_->data; }

  T item() const {
    if (size() != 1) {
      throw UsageError("item() on tensor of shape " + shape_string(shape()));
    }
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  /// Gradient buffer, allocated (zero-filled) on first access. Gradients are
  /// bookkeeping on the shared storage, so this is available on const handles.
  std::span<T> grad_buffer() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
    return impl_->grad;
  }
  void zero_grad() const {
    std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }
  /// Drops the gradient buffer; has_grad() is false until the next backward
  /// pass reaches this tensor.
  void clear_grad() const {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
  }

  bool all_finite() const {
    return std::all_of(impl_->data.begin(), impl_->data.end(),
                       [](T v) { return std::isfinite(v); });
  }

  void check_finite(std::string_view what) const {
    if (!all_finite()) {
      throw NumericError("non-finite value in " + std::string(what));
    }
  }

  BasicTensor detached_copy() const {
    return BasicTensor(impl_->shape, impl_->data, false);
  }

  bool same_storage(const BasicTensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

using Tensor = BasicTensor<float>;

/// Ordered record of differentiable operations executed while the tape is
/// active on the current thread. backward() replays the closures in exact
/// reverse order of recording.
class Tape {
 public:
  using Backward = std::function<void()>;

  /// Registers the gradient propagation for `output`. Entries whose output
  /// never received a gradient are skipped during replay.
  template <typename T>
  void record(const BasicTensor<T>& output, Backward fn) {
    entries_.push_back([output, fn = std::move(fn)] {
      if (output.has_grad()) fn();
    });
  }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  template <typename T>
  void backward(BasicTensor<T> loss) {
    if (loss.size() != 1) {
      throw UsageError("backward() needs a scalar loss, got shape " +
                       shape_string(loss.shape()));
    }
    if (!loss.requires_grad()) {
      throw UsageError("backward() on a tensor that is not on the tape");
    }
    loss.grad_buffer()[0] = T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    entries_.clear();
  }

 private:
  std::vector<Backward> entries_;
};

namespace detail {
inline Tape*& active_tape_slot() {
  thread_local Tape* tape = nullptr;
  return tape;
}
}  // namespace detail

inline Tape* active_tape() { return detail::active_tape_slot(); }

/// Makes `tape` the recording target for the current thread while alive.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(detail::active_tape_slot()) {
    detail::active_tape_slot() = &tape;
  }
  ~TapeScope() { detail::active_tape_slot() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

}  // namespace cascade
