#include "voxreg/tensor.hpp"

#include <unordered_map>

namespace voxreg {

namespace {
thread_local bool g_grad_mode = true;
}

bool grad_mode_enabled() { return g_grad_mode; }

NoGradGuard::NoGradGuard() : previous_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = previous_; }

template <typename T>
void backward(const TensorPtr<T>& loss) {
  if (!loss) throw InternalError("backward: null loss");
  if (loss->numel() != 1) throw InternalError("backward: loss must hold exactly one scalar");

  // Iterative post-order DFS over parents; states detect back-edges.
  enum class State : unsigned char { kOpen, kDone };
  std::unordered_map<Tensor<T>*, State> state;
  std::vector<Tensor<T>*> order;  // parents before children
  std::vector<std::pair<Tensor<T>*, std::size_t>> stack;
  stack.emplace_back(loss.get(), 0);
  state[loss.get()] = State::kOpen;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents().size()) {
      Tensor<T>* parent = node->parents()[next++].get();
      auto it = state.find(parent);
      if (it == state.end()) {
        state[parent] = State::kOpen;
        stack.emplace_back(parent, 0);
      } else if (it->second == State::kOpen) {
        throw InternalError("backward: cycle in recorded computation");
      }
    } else {
      state[node] = State::kDone;
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior nodes restart from zero on every sweep; only leaves (no recorded
  // backward) accumulate across repeated calls.
  for (Tensor<T>* node : order)
    if (node->has_backward()) node->zero_grad();

  loss->grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Tensor<T>* node = *it;
    if (node->has_backward() && node->needs_grad()) node->run_backward();
  }
}

template void backward<float>(const TensorPtr<float>&);
template void backward<double>(const TensorPtr<double>&);

template class Tensor<float>;
template class Tensor<double>;

}  // namespace voxreg
