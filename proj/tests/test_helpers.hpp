#pragma once

#include <vector>

#include "voxreg/rng.hpp"
#include "voxreg/tensor.hpp"

namespace voxreg::test {

template <typename T>
TensorPtr<T> random_tensor(std::vector<std::size_t> shape, RngStream& rng, bool requires_grad = false,
                           double scale = 1.0) {
  auto t = Tensor<T>::create(std::move(shape), requires_grad);
  for (auto& v : t->data()) v = static_cast<T>(rng.normal() * scale);
  return t;
}

inline std::vector<double> to_double(std::span<const float> s) {
  return std::vector<double>(s.begin(), s.end());
}

}  // namespace voxreg::test
