#include <catch2/catch_amalgamated.hpp>

#include "segkd/ops.hpp"
#include "support.hpp"

using namespace segkd;
using testutil::max_rel_grad_error;
using testutil::random_tensor;

TEST_CASE("conv2d matches a hand-computed value") {
  // 3x3 input, 3x3 kernel of ones, stride 1, pad 1: center output is the sum.
  Tensor<double> x({1, 1, 3, 3});
  for (int i = 0; i < 9; ++i) x[i] = i + 1;
  Var<double> xv = constant(x);
  Var<double> w = constant(Tensor<double>::ones({1, 1, 3, 3}));
  Var<double> out = conv2d(xv, w, Var<double>{}, 1, 1);
  REQUIRE(out.value().shape == std::vector<std::int64_t>{1, 1, 3, 3});
  CHECK(out.value().at(0, 0, 1, 1) == Catch::Approx(45.0));
  CHECK(out.value().at(0, 0, 0, 0) == Catch::Approx(1 + 2 + 4 + 5));
}

TEST_CASE("conv2d gradients match finite differences") {
  Var<double> x(random_tensor({2, 3, 6, 6}, 11), true);
  Var<double> w(random_tensor({4, 3, 3, 3}, 12, -0.5, 0.5), true);
  Var<double> b(random_tensor({4}, 13), true);
  auto fn = [&] { return mean_all(mul(conv2d(x, w, b, 2, 1), conv2d(x, w, b, 2, 1))); };
  CHECK(max_rel_grad_error(fn, {&x, &w, &b}) < 1e-5);
}

TEST_CASE("conv_transpose2d shape and gradients") {
  Var<double> x(random_tensor({2, 3, 5, 5}, 21), true);
  Var<double> w(random_tensor({3, 2, 3, 3}, 22, -0.5, 0.5), true);
  Var<double> b(random_tensor({2}, 23), true);
  Var<double> y = conv_transpose2d(x, w, b, 2, 1, 1);
  REQUIRE(y.value().shape == std::vector<std::int64_t>{2, 2, 10, 10});
  auto fn = [&] { return mean_all(mul(conv_transpose2d(x, w, b, 2, 1, 1),
                                      conv_transpose2d(x, w, b, 2, 1, 1))); };
  CHECK(max_rel_grad_error(fn, {&x, &w, &b}) < 1e-5);

  SECTION("kernel 2 stride 2 doubles the resolution") {
    Var<double> w2(random_tensor({3, 2, 2, 2}, 24), true);
    Var<double> y2 = conv_transpose2d(x, w2, Var<double>{}, 2, 0, 0);
    REQUIRE(y2.value().shape == std::vector<std::int64_t>{2, 2, 10, 10});
  }
}

TEST_CASE("batch_norm_train normalizes and backpropagates") {
  Var<double> x(random_tensor({3, 4, 5, 5}, 31, -2, 2), true);
  Var<double> gamma(random_tensor({4}, 32, 0.5, 1.5), true);
  Var<double> beta(random_tensor({4}, 33), true);

  std::vector<double> bm, bv;
  Var<double> y = batch_norm_train(x, gamma, beta, 1e-5, &bm, &bv);
  // Per-channel mean of the output is beta, stddev is |gamma|.
  const std::int64_t N = 3, C = 4, HW = 25;
  for (std::int64_t c = 0; c < C; ++c) {
    double mean = 0;
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t i = 0; i < HW; ++i) mean += y.value()[(n * C + c) * HW + i];
    mean /= double(N * HW);
    CHECK(mean == Catch::Approx(beta.value()[c]).margin(1e-10));
  }

  auto fn = [&] {
    std::vector<double> m, v;
    return mean_all(mul(batch_norm_train(x, gamma, beta, 1e-5, &m, &v),
                        constant(random_tensor({3, 4, 5, 5}, 34))));
  };
  CHECK(max_rel_grad_error(fn, {&x, &gamma, &beta}) < 1e-4);
}

TEST_CASE("batch_norm_eval applies running statistics") {
  Var<double> x(random_tensor({2, 2, 3, 3}, 41), true);
  Var<double> gamma = parameter(Tensor<double>::ones({2}));
  Var<double> beta = parameter(Tensor<double>::zeros({2}));
  std::vector<double> rm{0.5, -0.5}, rv{4.0, 1.0};
  Var<double> y = batch_norm_eval(x, gamma, beta, rm, rv, 0.0);
  CHECK(y.value()[0] == Catch::Approx((x.value()[0] - 0.5) / 2.0));
  auto fn = [&] {
    return mean_all(mul(batch_norm_eval(x, gamma, beta, rm, rv, 0.0),
                        constant(random_tensor({2, 2, 3, 3}, 42))));
  };
  CHECK(max_rel_grad_error(fn, {&x, &gamma, &beta}) < 1e-6);
}

TEST_CASE("max_pool2d forward and backward") {
  Tensor<double> x({1, 1, 4, 4});
  for (int i = 0; i < 16; ++i) x[i] = i;
  Var<double> xv(x, true);
  Var<double> y = max_pool2d(xv, 2, 2, 0);
  REQUIRE(y.value().shape == std::vector<std::int64_t>{1, 1, 2, 2});
  CHECK(y.value()[0] == 5);
  CHECK(y.value()[3] == 15);

  Var<double> xr(random_tensor({2, 3, 6, 6}, 51), true);
  auto fn = [&] { return mean_all(mul(max_pool2d(xr, 3, 2, 1), max_pool2d(xr, 3, 2, 1))); };
  CHECK(max_rel_grad_error(fn, {&xr}) < 1e-5);
}

TEST_CASE("bilinear_resize is identity at equal size and differentiable") {
  Var<double> x(random_tensor({1, 2, 5, 5}, 61), true);
  Var<double> same = bilinear_resize(x, 5, 5);
  for (std::int64_t i = 0; i < x.value().numel(); ++i)
    REQUIRE(same.value()[i] == x.value()[i]);

  auto fn = [&] { return mean_all(mul(bilinear_resize(x, 9, 7), bilinear_resize(x, 9, 7))); };
  CHECK(max_rel_grad_error(fn, {&x}) < 1e-5);

  SECTION("downscale gradients") {
    auto fd = [&] { return mean_all(mul(bilinear_resize(x, 2, 3), bilinear_resize(x, 2, 3))); };
    CHECK(max_rel_grad_error(fd, {&x}) < 1e-5);
  }
}

TEST_CASE("concat, mul broadcast, softmax and scalar ops backpropagate") {
  Var<double> a(random_tensor({2, 3, 4, 4}, 71), true);
  Var<double> b(random_tensor({2, 2, 4, 4}, 72), true);
  Var<double> coeff(random_tensor({2, 1, 4, 4}, 73, 0.1, 0.9), true);

  auto fn = [&] {
    Var<double> cat = concat_channels<double>({a, b});
    Var<double> gated = mul(cat, coeff);
    Var<double> sm = softmax_channels(gated);
    Var<double> act = sigmoid(relu(sm));
    return div(sum_all(act), affine(sum_all(mul(act, act)), 1.0, 3.0));
  };
  CHECK(max_rel_grad_error(fn, {&a, &b, &coeff}) < 1e-5);
}

TEST_CASE("log and clamp") {
  Var<double> x(random_tensor({2, 1, 3, 3}, 81, 0.2, 0.8), true);
  auto fn = [&] { return mean_all(vlog(clamp(x, 1e-7, 1.0 - 1e-7))); };
  CHECK(max_rel_grad_error(fn, {&x}) < 1e-6);

  Tensor<double> wide({4});
  wide[0] = -2;
  wide[1] = 0.5;
  wide[2] = 2;
  wide[3] = 1;
  Var<double> w(wide, true);
  Var<double> y = clamp(w, 0.0, 1.0);
  CHECK(y.value()[0] == 0.0);
  CHECK(y.value()[1] == 0.5);
  CHECK(y.value()[2] == 1.0);
  backward(sum_all(y));
  CHECK(w.grad()[0] == 0.0);  // clipped entries get no gradient
  CHECK(w.grad()[1] == 1.0);
  CHECK(w.grad()[2] == 0.0);
}

TEST_CASE("no-grad mode records nothing") {
  Var<double> x(random_tensor({2, 2}, 91), true);
  NoGradGuard ng;
  Var<double> y = mul_scalar(x, 3.0);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("softmax_channels sums to one per pixel") {
  Var<double> x(random_tensor({2, 5, 3, 3}, 95, -3, 3), false);
  Var<double> y = softmax_channels(x);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t i = 0; i < 9; ++i) {
      double s = 0;
      for (std::int64_t c = 0; c < 5; ++c) s += y.value()[(n * 5 + c) * 9 + i];
      CHECK(s == Catch::Approx(1.0).epsilon(1e-9));
    }
}
