#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <vector>

#include "voxreg/rng.hpp"
#include "voxreg/tensor.hpp"

namespace voxreg {

// 3D convolution geometry. Axis order everywhere is (D, H, W).
struct ConvSpec {
  int in_channels = 0;
  int out_channels = 0;
  std::array<int, 3> kernel{3, 3, 3};
  std::array<int, 3> stride{1, 1, 1};
  std::array<int, 3> padding{0, 0, 0};

  // floor((in + 2*pad - kernel) / stride) + 1 per axis; ConfigError when any
  // output extent would fall below 1.
  std::array<std::size_t, 3> output_extent(const std::array<std::size_t, 3>& in) const;

  void validate() const;
};

// Per-channel affine + running statistics of one batch-norm layer. gamma and
// beta are trainable tensors; the running buffers are updated in training
// forward passes and drive normalization at inference.
template <typename T>
struct BatchNormState {
  TensorPtr<T> gamma;
  TensorPtr<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T epsilon = T(1e-5);

  static BatchNormState make(std::size_t channels, bool requires_grad = true) {
    BatchNormState s;
    s.gamma = Tensor<T>::full({channels}, T(1), requires_grad);
    s.beta = Tensor<T>::full({channels}, T(0), requires_grad);
    s.running_mean.assign(channels, T(0));
    s.running_var.assign(channels, T(1));
    return s;
  }

  std::size_t channels() const { return gamma ? gamma->numel() : 0; }
};

// --- differentiable kernels ---
// Inputs are [N, Cin, D, H, W] unless noted. Every kernel validates shapes up
// front and registers an exact backward rule when grad mode is on. Reduction
// order per output element is fixed, so results do not depend on the thread
// cap.

template <typename T>
TensorPtr<T> conv3d(const TensorPtr<T>& input, const TensorPtr<T>& weight, const TensorPtr<T>& bias,
                    const ConvSpec& spec);

template <typename T>
TensorPtr<T> relu(const TensorPtr<T>& input);

// Accepts [N, C, D, H, W] or [N, C] (treated as spatial 1x1x1). Training mode
// requires at least two values per channel; inference normalizes by the
// running statistics.
template <typename T>
TensorPtr<T> batchnorm3d(const TensorPtr<T>& input, BatchNormState<T>& state, bool training);

// Non-overlapping window maximum with floor semantics (odd trailing voxels
// dropped). Backward routes the gradient to the argmax voxel, first in scan
// order on ties.
template <typename T>
TensorPtr<T> maxpool3d(const TensorPtr<T>& input, int kernel = 2, int stride = 2);

// Channel dropout: zeroes whole (n, c) slabs with probability `rate` and
// scales survivors by 1/(1-rate). Identity at inference. The mask is a pure
// function of the stream. Also accepts [N, C], where it degenerates to
// per-feature dropout.
template <typename T>
TensorPtr<T> dropout3d(const TensorPtr<T>& input, double rate, bool training, RngStream& rng);

// input [N, F] x weight [O, F] + bias [O] -> [N, O].
template <typename T>
TensorPtr<T> linear(const TensorPtr<T>& input, const TensorPtr<T>& weight, const TensorPtr<T>& bias);

// [N, C, D, H, W] -> [N, C], mean over the spatial axes.
template <typename T>
TensorPtr<T> global_avg_pool(const TensorPtr<T>& input);

// Mean squared error over equal-length vectors; returns a scalar node.
template <typename T>
TensorPtr<T> mse_loss(const TensorPtr<T>& pred, const TensorPtr<T>& target);

// --- elementwise / layout plumbing ---

template <typename T>
TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b);

template <typename T>
TensorPtr<T> scale(const TensorPtr<T>& input, T factor);

// wa*a + wb*b in a single expression per element (the output blend relies on
// this exact arithmetic form).
template <typename T>
TensorPtr<T> add_scaled(const TensorPtr<T>& a, const TensorPtr<T>& b, T wa, T wb);

// Column-wise concatenation of [N, Fa] and [N, Fb] -> [N, Fa+Fb].
template <typename T>
TensorPtr<T> concat_cols(const TensorPtr<T>& a, const TensorPtr<T>& b);

template <typename T>
TensorPtr<T> reshape(const TensorPtr<T>& input, std::vector<std::size_t> shape);

#define VOXREG_EXTERN_OPS(T)                                                                           \
  extern template TensorPtr<T> conv3d<T>(const TensorPtr<T>&, const TensorPtr<T>&, const TensorPtr<T>&, \
                                          const ConvSpec&);                                            \
  extern template TensorPtr<T> relu<T>(const TensorPtr<T>&);                                           \
  extern template TensorPtr<T> batchnorm3d<T>(const TensorPtr<T>&, BatchNormState<T>&, bool);          \
  extern template TensorPtr<T> maxpool3d<T>(const TensorPtr<T>&, int, int);                            \
  extern template TensorPtr<T> dropout3d<T>(const TensorPtr<T>&, double, bool, RngStream&);            \
  extern template TensorPtr<T> linear<T>(const TensorPtr<T>&, const TensorPtr<T>&, const TensorPtr<T>&); \
  extern template TensorPtr<T> global_avg_pool<T>(const TensorPtr<T>&);                                \
  extern template TensorPtr<T> mse_loss<T>(const TensorPtr<T>&, const TensorPtr<T>&);                  \
  extern template TensorPtr<T> add<T>(const TensorPtr<T>&, const TensorPtr<T>&);                       \
  extern template TensorPtr<T> scale<T>(const TensorPtr<T>&, T);                                       \
  extern template TensorPtr<T> add_scaled<T>(const TensorPtr<T>&, const TensorPtr<T>&, T, T);          \
  extern template TensorPtr<T> concat_cols<T>(const TensorPtr<T>&, const TensorPtr<T>&);               \
  extern template TensorPtr<T> reshape<T>(const TensorPtr<T>&, std::vector<std::size_t>);

VOXREG_EXTERN_OPS(float)
VOXREG_EXTERN_OPS(double)
#undef VOXREG_EXTERN_OPS

}  // namespace voxreg
