#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "voxreg/common.hpp"

namespace voxreg {

template <typename T>
class Tensor;

template <typename T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

// Reverse-mode tape is recorded only while grad mode is on. Validation and
// prediction passes run under NoGradGuard so no graph is kept alive.
bool grad_mode_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Dense row-major ND array (last index fastest) with an optional gradient
// buffer. A Tensor doubles as a node of the recorded computation: kernels
// attach parents plus a backward closure to their outputs, and backward()
// sweeps the tape in reverse topological order.
template <typename T>
class Tensor {
 public:
  using Ptr = std::shared_ptr<Tensor<T>>;

  static Ptr create(std::vector<std::size_t> shape, bool requires_grad = false) {
    auto t = Ptr(new Tensor(std::move(shape)));
    t->requires_grad_ = requires_grad;
    t->needs_grad_ = requires_grad;
    return t;
  }

  static Ptr full(std::vector<std::size_t> shape, T value, bool requires_grad = false) {
    auto t = create(std::move(shape), requires_grad);
    std::fill(t->data_.begin(), t->data_.end(), value);
    return t;
  }

  static Ptr from_data(std::vector<std::size_t> shape, std::vector<T> data, bool requires_grad = false) {
    auto t = Ptr(new Tensor(std::move(shape), std::move(data)));
    t->requires_grad_ = requires_grad;
    t->needs_grad_ = requires_grad;
    return t;
  }

  static Ptr scalar(T value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T& at(std::size_t flat) { return data_[flat]; }
  T at(std::size_t flat) const { return data_[flat]; }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool v) {
    requires_grad_ = v;
    needs_grad_ = needs_grad_ || v;
  }

  // True when this node, or anything upstream of it, wants a gradient.
  bool needs_grad() const { return needs_grad_; }

  bool has_grad() const { return !grad_.empty(); }

  // Gradient buffer, zero-initialized on first access.
  std::span<T> grad() {
    if (grad_.empty()) grad_.assign(data_.size(), T(0));
    return grad_;
  }

  void zero_grad() { std::fill(grad_.begin(), grad_.end(), T(0)); }

  void accumulate_grad(std::span<const T> g) {
    auto dst = grad();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  }

  // Deep copy of the values; the copy is a fresh leaf.
  Ptr clone_values() const { return from_data(shape_, data_); }

  // --- tape wiring (used by kernels) ---

  void set_parents(std::vector<Ptr> parents) {
    parents_ = std::move(parents);
    for (const auto& p : parents_)
      if (p->needs_grad_) needs_grad_ = true;
  }

  void set_backward(std::function<void()> fn) { backward_fn_ = std::move(fn); }

  const std::vector<Ptr>& parents() const { return parents_; }
  bool has_backward() const { return static_cast<bool>(backward_fn_); }
  void run_backward() { backward_fn_(); }

  // Drops tape linkage, keeping values (and any accumulated grad).
  void detach() {
    parents_.clear();
    backward_fn_ = nullptr;
    needs_grad_ = requires_grad_;
  }

 private:
  explicit Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
    data_.assign(checked_numel(shape_), T(0));
  }

  Tensor(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_numel(shape_) != data_.size())
      throw ConfigError("tensor: data length " + std::to_string(data_.size()) +
                        " does not match shape product " + std::to_string(checked_numel(shape_)));
  }

  static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
      if (e == 0) throw ConfigError("tensor: zero extent in shape");
      n *= e;
    }
    return n;
  }

  std::vector<std::size_t> shape_;
  std::vector<T> data_;
  std::vector<T> grad_;
  bool requires_grad_ = false;
  bool needs_grad_ = false;

  std::vector<Ptr> parents_;
  std::function<void()> backward_fn_;
};

// Seeds d(loss)/d(loss) = 1 and propagates gradients to every tensor
// reachable from `loss` that wants them. Gradients accumulate additively
// across fan-out and across repeated calls. `loss` must hold exactly one
// scalar. A cycle in the recorded graph raises InternalError.
template <typename T>
void backward(const TensorPtr<T>& loss);

extern template void backward<float>(const TensorPtr<float>&);
extern template void backward<double>(const TensorPtr<double>&);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace voxreg
