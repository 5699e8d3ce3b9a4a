#include "voxreg/adam.hpp"

#include <cmath>

namespace voxreg {

template <typename T>
void adam_step(Tensor<T>& param, AdamState<T>& state, const std::string& name) {
  const std::size_t n = param.numel();
  if (state.m.empty()) state.m.assign(n, T(0));
  if (state.v.empty()) state.v.assign(n, T(0));
  if (state.m.size() != n || state.v.size() != n)
    throw ConfigError("adam_step: moment buffers do not match parameter size for '" + name + "'");

  auto g = param.grad();
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(static_cast<double>(g[i])))
      throw NumericError("adam_step: non-finite gradient in parameter '" +
                         (name.empty() ? std::string("<unnamed>") : name) + "' at flat index " +
                         std::to_string(i));

  state.step_count += 1;
  const T b1 = state.beta1, b2 = state.beta2;
  const T bc1 = T(1) - std::pow(b1, static_cast<T>(state.step_count));
  const T bc2 = T(1) - std::pow(b2, static_cast<T>(state.step_count));
  auto p = param.data();
  T* m = state.m.data();
  T* v = state.v.data();
  const T lr = state.learning_rate, eps = state.epsilon;
  parallel_for(n, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      const T mhat = m[i] / bc1;
      const T vhat = v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  });
}

template void adam_step<float>(Tensor<float>&, AdamState<float>&, const std::string&);
template void adam_step<double>(Tensor<double>&, AdamState<double>&, const std::string&);

}  // namespace voxreg
