#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "voxreg/ops.hpp"
#include "voxreg/rng.hpp"
#include "voxreg/tensor.hpp"

namespace voxreg {

// Architecture hyperparameters of the volumetric regressor: four double-conv
// blocks by default (16/32/64/128 filters), a stride-2 stem, pooling +
// channel dropout between blocks, a 1024-unit FC head ending in one linear
// unit, and an auxiliary head tapped off an intermediate block whose
// prediction is blended 0.4/0.6 with the main output.
struct VoxCNNConfig {
  int in_channels = 2;
  int base_filters = 16;
  int n_blocks = 4;
  int stem_stride = 2;
  int fc_hidden = 1024;
  double aux_weight = 0.4;
  double main_weight = 0.6;
  int aux_tap_block = 3;
  int tabular_dim = 0;
  double dropout_conv = 0.1;
  double dropout_fc = 0.5;
  std::array<std::size_t, 3> input_extent{32, 32, 32};
  // Alternative loss reading: 0.6*MSE(main) + 0.4*MSE(aux) instead of one MSE
  // on the blended output.
  bool aux_as_separate_loss = false;
  // "gap" keeps the model input-extent-agnostic; "flatten" feeds the raw
  // final feature map to the FC head (its width then depends on input_extent).
  enum class HeadPooling : std::uint8_t { kGap = 0, kFlatten = 1 };
  HeadPooling head_pooling = HeadPooling::kGap;

  int filters_in_block(int b) const { return base_filters << (b - 1); }

  void validate() const;

  // key=value serialization (one pair per line, fixed key order); the same
  // text embeds into checkpoints and run configs.
  std::string to_kv() const;
  static VoxCNNConfig from_kv(const std::string& text);
  void apply_override(const std::string& key, const std::string& value);
};

struct StageShape {
  std::string stage;
  std::size_t channels;
  std::array<std::size_t, 3> extent;
};

// Symbolic shape propagation for the configured layer sequence. Throws
// ConfigError naming the first stage whose extent collapses below 1 (or
// below the pooling kernel).
std::vector<StageShape> propagate_shapes(const VoxCNNConfig& config);

template <typename T>
struct ConvBlockParams {
  ConvSpec spec1, spec2;
  TensorPtr<T> conv1_w, conv1_b;
  BatchNormState<T> bn1;
  TensorPtr<T> conv2_w, conv2_b;
  BatchNormState<T> bn2;
};

template <typename T>
struct ForwardResult {
  TensorPtr<T> main;      // [N]
  TensorPtr<T> aux;       // [N]
  TensorPtr<T> combined;  // main_weight*main + aux_weight*aux
};

// One entry of the canonical parameter listing. Trainable entries alias the
// parameter tensors; buffer entries alias batch-norm running statistics.
template <typename T>
struct ParamEntry {
  std::string name;
  bool trainable;
  std::vector<std::size_t> shape;
  std::span<T> values;
};

template <typename T>
class VoxCNNModel {
 public:
  VoxCNNConfig config;
  std::vector<ConvBlockParams<T>> blocks;
  TensorPtr<T> fc1_w, fc1_b;
  BatchNormState<T> fc_bn;
  TensorPtr<T> out_w, out_b;
  TensorPtr<T> aux_w, aux_b;

  // Trainable parameters in canonical order (the checkpoint contract).
  std::vector<std::pair<std::string, TensorPtr<T>>> named_parameters();

  // Canonical order including batch-norm running buffers.
  std::vector<ParamEntry<T>> all_entries();

  std::size_t parameter_count();  // trainable scalars only

  void zero_grad();

  // volumes [N, in_channels, D, H, W]; tabular [N, tabular_dim] or null.
  // In training mode batch norms mutate running statistics and dropout draws
  // masks from `rng` (required when any dropout rate is positive).
  ForwardResult<T> forward(const TensorPtr<T>& volumes, const TensorPtr<T>& tabular, bool training,
                           RngStream* rng = nullptr);

  // Deep copy of all values (parameters + running stats), tape-free.
  VoxCNNModel<T> clone() const;
};

template <typename T>
VoxCNNModel<T> build_model(const VoxCNNConfig& config, RngStream& rng);

// Stacks the T1 volume and gray-matter mask as channels 0 and 1 of one model
// input; channel order is part of the checkpoint contract. `context` names
// the subject in error messages.
template <typename T>
TensorPtr<T> stack_channels(const TensorPtr<T>& t1, const TensorPtr<T>& gm_mask,
                            const std::string& context = "");

template <typename T>
std::pair<TensorPtr<T>, TensorPtr<T>> unstack_channels(const TensorPtr<T>& stacked);

extern template class VoxCNNModel<float>;
extern template class VoxCNNModel<double>;
extern template VoxCNNModel<float> build_model<float>(const VoxCNNConfig&, RngStream&);
extern template VoxCNNModel<double> build_model<double>(const VoxCNNConfig&, RngStream&);
extern template TensorPtr<float> stack_channels<float>(const TensorPtr<float>&, const TensorPtr<float>&,
                                                       const std::string&);
extern template TensorPtr<double> stack_channels<double>(const TensorPtr<double>&,
                                                         const TensorPtr<double>&, const std::string&);
extern template std::pair<TensorPtr<float>, TensorPtr<float>> unstack_channels<float>(
    const TensorPtr<float>&);
extern template std::pair<TensorPtr<double>, TensorPtr<double>> unstack_channels<double>(
    const TensorPtr<double>&);

}  // namespace voxreg
