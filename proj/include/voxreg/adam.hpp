#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "voxreg/tensor.hpp"

namespace voxreg {

template <typename T>
struct AdamState {
  std::size_t step_count = 0;
  std::vector<T> m;  // first-moment estimate, shaped like the parameter
  std::vector<T> v;  // second-moment estimate, >= 0 componentwise
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T epsilon = T(1e-8);
  T learning_rate = T(3e-5);
};

// Bias-corrected Adam update in place:
//   m <- b1*m + (1-b1)*g,  v <- b2*v + (1-b2)*g^2
//   param -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
// A non-finite gradient aborts with a NumericError naming the parameter.
template <typename T>
void adam_step(Tensor<T>& param, AdamState<T>& state, const std::string& name = "");

// Convenience wrapper over a named parameter list; keeps one AdamState per
// parameter and steps them in declaration order.
template <typename T>
class AdamOptimizer {
 public:
  AdamOptimizer(T learning_rate, T beta1 = T(0.9), T beta2 = T(0.999), T epsilon = T(1e-8))
      : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon) {}

  void add_parameter(std::string name, TensorPtr<T> param) {
    AdamState<T> s;
    s.beta1 = beta1_;
    s.beta2 = beta2_;
    s.epsilon = eps_;
    s.learning_rate = lr_;
    entries_.push_back({std::move(name), std::move(param), std::move(s)});
  }

  void step() {
    for (auto& e : entries_) adam_step(*e.param, e.state, e.name);
  }

  void zero_grad() {
    for (auto& e : entries_) e.param->zero_grad();
  }

  struct Entry {
    std::string name;
    TensorPtr<T> param;
    AdamState<T> state;
  };

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  T lr_, beta1_, beta2_, eps_;
  std::vector<Entry> entries_;
};

extern template void adam_step<float>(Tensor<float>&, AdamState<float>&, const std::string&);
extern template void adam_step<double>(Tensor<double>&, AdamState<double>&, const std::string&);

}  // namespace voxreg
