#include "voxreg/gradcheck.hpp"

#include <cmath>

#include "voxreg/ops.hpp"
#include "voxreg/rng.hpp"

namespace voxreg {

namespace {

std::vector<double> projection_weights(std::size_t n, std::uint64_t seed) {
  // kept away from zero so no output component is silently ignored
  RngStream rng(seed);
  std::vector<double> w(n);
  for (auto& v : w) v = 0.25 + rng.uniform();
  return w;
}

double project(const TensorPtr<double>& y, const std::vector<double>& w) {
  double s = 0.0;
  const auto d = y->data();
  for (std::size_t i = 0; i < d.size(); ++i) s += w[i] * d[i];
  return s;
}

}  // namespace

GradCheckReport grad_check_at(const DoubleOp& op, const TensorPtr<double>& input,
                              const std::vector<std::size_t>& indices, double tolerance, double h,
                              double denom_floor, std::uint64_t projection_seed) {
  // analytic pass on a private copy of the input
  auto x = input->clone_values();
  x->set_requires_grad(true);
  auto y = op(x);
  const auto w = projection_weights(y->numel(), projection_seed);

  // scalarize: s = sum_i w_i * y_i, built from tape ops so backward covers it
  auto weight_row = Tensor<double>::from_data({1, y->numel()}, std::vector<double>(w));
  auto zero_bias = Tensor<double>::full({1}, 0.0);
  auto s = linear(reshape(y, {std::size_t(1), y->numel()}), weight_row, zero_bias);
  backward(reshape(s, {std::size_t(1)}));
  std::vector<double> analytic(x->grad().begin(), x->grad().end());

  GradCheckReport report;
  report.checked = indices.size();
  {
    NoGradGuard ng;
    auto probe = input->clone_values();
    for (std::size_t idx : indices) {
      const double saved = probe->at(idx);
      probe->at(idx) = saved + h;
      const double splus = project(op(probe), w);
      probe->at(idx) = saved - h;
      const double sminus = project(op(probe), w);
      probe->at(idx) = saved;
      const double numeric = (splus - sminus) / (2.0 * h);
      const double a = analytic[idx];
      const double rel = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), denom_floor);
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_index = idx;
      }
    }
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

GradCheckReport grad_check(const DoubleOp& op, const TensorPtr<double>& input, double tolerance,
                           double h, double denom_floor, std::uint64_t projection_seed) {
  std::vector<std::size_t> all(input->numel());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return grad_check_at(op, input, all, tolerance, h, denom_floor, projection_seed);
}

}  // namespace voxreg
