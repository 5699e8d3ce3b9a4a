#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "voxreg/tensor.hpp"

namespace voxreg {

struct GradCheckReport {
  bool pass = false;
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t worst_index = 0;  // flat index into the checked tensor
};

using DoubleOp = std::function<TensorPtr<double>(const TensorPtr<double>&)>;

// Central-difference oracle (h defaults to 1e-5, double precision). The op's
// output is reduced to a scalar through a fixed random projection; the
// analytic gradient from backward() is compared against
// (s(x+h*e_i) - s(x-h*e_i)) / 2h componentwise with
//   rel_err = |a - n| / max(|a| + |n|, denom_floor).
// The op must be deterministic and differentiable at `input`; ops with
// internal randomness or batch statistics must rebuild that state inside the
// closure so all evaluations see identical conditions.
GradCheckReport grad_check(const DoubleOp& op, const TensorPtr<double>& input, double tolerance,
                           double h = 1e-5, double denom_floor = 1e-6,
                           std::uint64_t projection_seed = 0x9d2c5680);

// Same oracle restricted to the listed flat components of `input`; used where
// perturbing every component is out of budget.
GradCheckReport grad_check_at(const DoubleOp& op, const TensorPtr<double>& input,
                              const std::vector<std::size_t>& indices, double tolerance,
                              double h = 1e-5, double denom_floor = 1e-6,
                              std::uint64_t projection_seed = 0x9d2c5680);

}  // namespace voxreg
