#include "doctest.h"
#include "test_helpers.hpp"
#include "voxreg/gradcheck.hpp"
#include "voxreg/ops.hpp"

using namespace voxreg;

namespace {
constexpr double kTol = 1e-4;
constexpr int kSeeds = 6;  // the acceptance suite runs the full 20-seed sweep
}  // namespace

TEST_CASE("grad_check self-test: relu away from the kink passes") {
  auto x = Tensor<double>::from_data({4}, {0.5, 1.0, 2.0, 3.5});
  auto rep = grad_check([](const TensorPtr<double>& t) { return relu(t); }, x, kTol);
  CHECK(rep.pass);
}

TEST_CASE("conv3d gradients match central differences") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    RngStream rng(100 + seed);
    auto x = test::random_tensor<double>({1, 2, 4, 4, 4}, rng);
    auto w = test::random_tensor<double>({3, 2, 3, 3, 3}, rng, false, 0.5);
    auto b = test::random_tensor<double>({3}, rng);
    ConvSpec spec{.in_channels = 2, .out_channels = 3, .stride = {2, 1, 1}, .padding = {1, 1, 1}};

    auto wrt_input = [&](const TensorPtr<double>& t) { return conv3d(t, w, b, spec); };
    auto wrt_weight = [&](const TensorPtr<double>& t) { return conv3d(x, t, b, spec); };
    auto wrt_bias = [&](const TensorPtr<double>& t) { return conv3d(x, w, t, spec); };
    CHECK(grad_check(wrt_input, x, kTol).pass);
    CHECK(grad_check(wrt_weight, w, kTol).pass);
    CHECK(grad_check(wrt_bias, b, kTol).pass);
  }
}

TEST_CASE("batchnorm3d gradients match central differences") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    RngStream rng(200 + seed);
    auto x = test::random_tensor<double>({2, 3, 3, 3, 3}, rng);
    auto gamma = test::random_tensor<double>({3}, rng, false, 0.3);
    for (auto& g : gamma->data()) g += 1.0;
    auto beta = test::random_tensor<double>({3}, rng, false, 0.3);

    // state rebuilt per evaluation so running-stat updates cannot leak between
    // finite-difference probes
    auto bn_with = [&](const TensorPtr<double>& xi, const TensorPtr<double>& g,
                       const TensorPtr<double>& bt) {
      BatchNormState<double> st;
      st.gamma = g;
      st.beta = bt;
      st.running_mean.assign(3, 0.0);
      st.running_var.assign(3, 1.0);
      return batchnorm3d(xi, st, true);
    };
    CHECK(grad_check([&](const TensorPtr<double>& t) { return bn_with(t, gamma, beta); }, x, kTol).pass);
    CHECK(grad_check([&](const TensorPtr<double>& t) { return bn_with(x, t, beta); }, gamma, kTol).pass);
    CHECK(grad_check([&](const TensorPtr<double>& t) { return bn_with(x, gamma, t); }, beta, kTol).pass);
  }
}

TEST_CASE("batchnorm3d input gradient in inference mode") {
  RngStream rng(77);
  auto x = test::random_tensor<double>({2, 2, 2, 2, 2}, rng);
  auto rep = grad_check(
      [&](const TensorPtr<double>& t) {
        BatchNormState<double> st = BatchNormState<double>::make(2);
        st.running_mean = {0.2, -0.4};
        st.running_var = {1.4, 0.7};
        return batchnorm3d(t, st, false);
      },
      x, kTol);
  CHECK(rep.pass);
}

TEST_CASE("maxpool3d gradient at non-tied inputs passes the oracle") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    RngStream rng(300 + seed);
    auto x = test::random_tensor<double>({1, 2, 4, 6, 4}, rng);  // continuous draws: ties have measure zero
    CHECK(grad_check([](const TensorPtr<double>& t) { return maxpool3d(t); }, x, kTol).pass);
  }
}

TEST_CASE("dropout3d gradient under a fixed stream") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    RngStream rng(400 + seed);
    auto x = test::random_tensor<double>({2, 4, 2, 2, 2}, rng);
    auto rep = grad_check(
        [seed](const TensorPtr<double>& t) {
          RngStream mask_rng(9000 + seed);  // identical mask for every probe
          return dropout3d(t, 0.35, true, mask_rng);
        },
        x, kTol);
    CHECK(rep.pass);
  }
}

TEST_CASE("linear gradients match central differences") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    RngStream rng(500 + seed);
    auto x = test::random_tensor<double>({3, 5}, rng);
    auto w = test::random_tensor<double>({2, 5}, rng);
    auto b = test::random_tensor<double>({2}, rng);
    CHECK(grad_check([&](const TensorPtr<double>& t) { return linear(t, w, b); }, x, kTol).pass);
    CHECK(grad_check([&](const TensorPtr<double>& t) { return linear(x, t, b); }, w, kTol).pass);
    CHECK(grad_check([&](const TensorPtr<double>& t) { return linear(x, w, t); }, b, kTol).pass);
  }
}

TEST_CASE("global_avg_pool and mse_loss gradients") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    RngStream rng(600 + seed);
    auto x = test::random_tensor<double>({2, 3, 2, 3, 2}, rng);
    CHECK(grad_check([](const TensorPtr<double>& t) { return global_avg_pool(t); }, x, kTol).pass);

    auto pred = test::random_tensor<double>({6}, rng);
    auto target = test::random_tensor<double>({6}, rng);
    auto rep = grad_check(
        [&](const TensorPtr<double>& t) { return mse_loss(t, target); }, pred, 1e-6);
    CHECK(rep.pass);
  }
}

TEST_CASE("relu gradient away from zero, including the documented points") {
  auto x = Tensor<double>::from_data({2}, {-0.5, 0.5});
  auto rep = grad_check([](const TensorPtr<double>& t) { return relu(t); }, x, kTol);
  CHECK(rep.pass);
}

TEST_CASE("blend and concat plumbing gradients") {
  RngStream rng(700);
  auto a = test::random_tensor<double>({4}, rng);
  auto b = test::random_tensor<double>({4}, rng);
  CHECK(grad_check([&](const TensorPtr<double>& t) { return add_scaled(t, b, 0.6, 0.4); }, a, kTol).pass);
  CHECK(grad_check([&](const TensorPtr<double>& t) { return add_scaled(a, t, 0.6, 0.4); }, b, kTol).pass);

  auto m = test::random_tensor<double>({3, 2}, rng);
  auto n = test::random_tensor<double>({3, 4}, rng);
  CHECK(grad_check([&](const TensorPtr<double>& t) { return concat_cols(t, n); }, m, kTol).pass);
  CHECK(grad_check([&](const TensorPtr<double>& t) { return concat_cols(m, t); }, n, kTol).pass);
}
