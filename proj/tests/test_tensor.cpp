#include <cmath>

#include "doctest.h"
#include "test_helpers.hpp"
#include "voxreg/adam.hpp"
#include "voxreg/ops.hpp"
#include "voxreg/tensor.hpp"

using namespace voxreg;

TEST_CASE("tensor shape/data length invariant is enforced") {
  CHECK_THROWS_AS(Tensor<double>::from_data({2, 3}, {1.0, 2.0}), ConfigError);
  CHECK_THROWS_AS(Tensor<double>::create({2, 0, 3}), ConfigError);
  auto t = Tensor<double>::create({2, 3});
  CHECK(t->numel() == 6);
  CHECK(t->grad().size() == 6);
}

TEST_CASE("backward of mse against zero gives the quadratic derivative") {
  // loss = mse(x, 0) with scalar x = 3 -> d(loss)/dx = 2*3 = 6
  auto x = Tensor<double>::scalar(3.0, true);
  auto target = Tensor<double>::scalar(0.0);
  auto loss = mse_loss(x, target);
  CHECK(loss->at(0) == doctest::Approx(9.0));
  backward(loss);
  CHECK(x->grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("tensor not used by the loss keeps a zero gradient") {
  auto x = Tensor<double>::scalar(3.0, true);
  auto unused = Tensor<double>::scalar(5.0, true);
  auto loss = mse_loss(x, Tensor<double>::scalar(0.0));
  backward(loss);
  CHECK(unused->grad()[0] == 0.0);
}

TEST_CASE("fan-out accumulates: y = f(x) + f(x) doubles the gradient") {
  RngStream rng(7);
  auto x = test::random_tensor<double>({4}, rng, true);

  auto fx = relu(x);
  auto y = add(fx, fx);
  backward(mse_loss(y, Tensor<double>::create({4})));
  std::vector<double> doubled(x->grad().begin(), x->grad().end());

  auto x2 = x->clone_values();
  x2->set_requires_grad(true);
  auto y2 = relu(x2);
  auto y2s = scale(y2, 2.0);  // same function, single use
  backward(mse_loss(y2s, Tensor<double>::create({4})));
  for (std::size_t i = 0; i < 4; ++i) CHECK(doubled[i] == doctest::Approx(x2->grad()[i]));
}

TEST_CASE("repeated backward without reset accumulates leaf gradients") {
  auto x = Tensor<double>::scalar(3.0, true);
  auto loss = mse_loss(x, Tensor<double>::scalar(0.0));
  backward(loss);
  backward(loss);
  CHECK(x->grad()[0] == doctest::Approx(12.0));
}

TEST_CASE("backward rejects a recorded cycle") {
  auto a = Tensor<double>::scalar(1.0, true);
  auto b = scale(a, 2.0);
  // manufacture a cycle by hand; kernels never produce one
  a->set_parents({b});
  CHECK_THROWS_AS(backward(mse_loss(b, Tensor<double>::scalar(0.0))), InternalError);
}

TEST_CASE("no-grad mode records no tape") {
  auto x = Tensor<double>::scalar(2.0, true);
  NoGradGuard ng;
  auto y = scale(x, 3.0);
  CHECK_FALSE(y->has_backward());
  CHECK(y->parents().empty());
}

TEST_CASE("adam: zero gradient leaves the parameter unchanged") {
  auto p = Tensor<double>::from_data({3}, {1.0, -2.0, 0.5});
  p->set_requires_grad(true);
  p->grad();  // allocate zeros
  AdamState<double> s;
  adam_step(*p, s, "p");
  CHECK(p->at(0) == 1.0);
  CHECK(p->at(1) == -2.0);
  CHECK(p->at(2) == 0.5);
  CHECK(s.step_count == 1);
}

TEST_CASE("adam: first-step magnitude is about the learning rate") {
  auto p = Tensor<double>::scalar(0.0, true);
  p->grad()[0] = 0.37;  // any g != 0 with |g| >> eps
  AdamState<double> s;
  s.learning_rate = 1e-3;
  adam_step(*p, s);
  CHECK(std::abs(p->at(0)) == doctest::Approx(1e-3).epsilon(1e-6));
}

TEST_CASE("adam: 200 steps on (w-5)^2 converge near the minimum") {
  auto w = Tensor<double>::scalar(0.0, true);
  AdamState<double> s;
  s.learning_rate = 0.1;
  for (int i = 0; i < 200; ++i) {
    w->zero_grad();
    w->grad()[0] = 2.0 * (w->at(0) - 5.0);
    adam_step(*w, s);
  }
  CHECK(std::abs(w->at(0) - 5.0) < 0.1);
}

TEST_CASE("adam: non-finite gradient aborts naming the parameter") {
  auto p = Tensor<double>::scalar(1.0, true);
  p->grad()[0] = std::nan("");
  AdamState<double> s;
  CHECK_THROWS_WITH_AS(adam_step(*p, s, "block1.conv1.weight"),
                       doctest::Contains("block1.conv1.weight"), NumericError);
}
