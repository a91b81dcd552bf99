#include <doctest.h>

#include <cmath>

#include "spansr/gradcheck.hpp"
#include "spansr/nn_ops.hpp"

using namespace spansr;

namespace {

ConvKernel<double> dirac_kernel(index_t channels) {
  ConvKernel<double> k(channels, channels, 3);
  for (index_t c = 0; c < channels; ++c) k.weights.at(c, c, 1, 1) = 1.0;
  return k;
}

}  // namespace

TEST_CASE("conv2d matches hand-counted oracles") {
  // Dirac kernel is the identity
  auto x = fill_random<double>(Shape4{2, 3, 5, 5}, 21, UniformDist{-1, 1});
  CHECK(max_abs_diff(conv2d_forward(x, dirac_kernel(3), 1), x) < 1e-15);

  // all-ones 3x3 kernel over all-ones input counts the overlap
  Tensor4<double> ones = Tensor4<double>::ones(Shape4{1, 1, 3, 3});
  ConvKernel<double> k(1, 1, 3);
  for (index_t i = 0; i < 9; ++i) k.weights[i] = 1.0;
  auto out = conv2d_forward(ones, k, 1);
  const double expect[9] = {4, 6, 4, 6, 9, 6, 4, 6, 4};
  for (index_t i = 0; i < 9; ++i) CHECK(out[i] == doctest::Approx(expect[i]));

  // bias-only kernel emits a constant
  ConvKernel<double> biask(2, 3, 3);
  biask.bias[0] = 0.25;
  biask.bias[1] = -1.5;
  auto bias_out = conv2d_forward(x, biask, 1);
  for (index_t n = 0; n < 2; ++n)
    for (index_t i = 0; i < 25; ++i) {
      CHECK(bias_out[n * 50 + i] == 0.25);
      CHECK(bias_out[n * 50 + 25 + i] == -1.5);
    }

  ConvKernel<double> wrong(1, 4, 3);
  CHECK_THROWS_AS(conv2d_forward(x, wrong, 1), std::invalid_argument);
}

TEST_CASE("im2col path agrees with the direct loop") {
  for (index_t ks : {1, 3}) {
    auto x = fill_random<float>(Shape4{2, 4, 7, 9}, 33, UniformDist{-1, 1});
    ConvKernel<float> k(5, 4, ks);
    k.weights = fill_random<float>(k.weights.shape(), 34, UniformDist{-1, 1});
    k.bias = fill_random<float>(k.bias.shape(), 35, UniformDist{-1, 1});
    const index_t pad = (ks - 1) / 2;
    auto a = conv2d_forward(x, k, pad);
    auto b = conv2d_forward_direct(x, k, pad);
    CHECK(max_abs_diff(a, b) / std::max(1.0f, max_abs_diff(a, Tensor4<float>::zeros(a.shape()))) <
          1e-5f);
  }
}

TEST_CASE("conv2d_forward is linear in x with zero bias") {
  auto x = fill_random<float>(Shape4{1, 3, 6, 6}, 40, UniformDist{-1, 1});
  auto y = fill_random<float>(Shape4{1, 3, 6, 6}, 41, UniformDist{-1, 1});
  ConvKernel<float> k(4, 3, 3);
  k.weights = fill_random<float>(k.weights.shape(), 42, UniformDist{-1, 1});
  const float alpha = 0.7f, beta = -1.3f;
  Tensor4<float> mix = elementwise_add(scaled(x, alpha), scaled(y, beta));
  Tensor4<float> lhs = conv2d_forward(mix, k, 1);
  Tensor4<float> rhs =
      elementwise_add(scaled(conv2d_forward(x, k, 1), alpha), scaled(conv2d_forward(y, k, 1), beta));
  for (index_t i = 0; i < lhs.size(); ++i) {
    CHECK(std::abs(lhs[i] - rhs[i]) / std::max({std::abs(lhs[i]), std::abs(rhs[i]), 1.0f}) < 1e-5f);
  }
}

TEST_CASE("conv2d_backward") {
  auto x = fill_random<double>(Shape4{1, 2, 4, 4}, 50, UniformDist{-1, 1});
  ConvKernel<double> k(3, 2, 3);
  k.weights = fill_random<double>(k.weights.shape(), 51, UniformDist{-1, 1});

  SUBCASE("zero upstream gradient gives zero grads") {
    auto g = conv2d_backward(x, k, Tensor4<double>::zeros(Shape4{1, 3, 4, 4}), 1);
    CHECK(max_abs_diff(g.d_input, Tensor4<double>::zeros(x.shape())) == 0.0);
    CHECK(max_abs_diff(g.d_weights, Tensor4<double>::zeros(k.weights.shape())) == 0.0);
  }
  SUBCASE("Dirac kernel passes the gradient through") {
    auto d_out = fill_random<double>(Shape4{1, 2, 4, 4}, 52, UniformDist{-1, 1});
    auto g = conv2d_backward(x, dirac_kernel(2), d_out, 1);
    CHECK(max_abs_diff(g.d_input, d_out) < 1e-15);
  }
  SUBCASE("shape contract") {
    CHECK_THROWS_AS(conv2d_backward(x, k, Tensor4<double>(Shape4{1, 3, 5, 5}), 1),
                    std::invalid_argument);
  }
  SUBCASE("finite differences") {
    auto res = gradcheck::check_conv(60, 3, "conv3");
    CHECK(res.max_rel_err < 1e-6);
    auto res1 = gradcheck::check_conv(61, 1, "conv1");
    CHECK(res1.max_rel_err < 1e-6);
  }
}

TEST_CASE("act_silu") {
  Tensor4<double> x(Shape4{1, 1, 1, 2});
  x[0] = 0.0;
  x[1] = 10.0;
  auto y = act_silu(x);
  CHECK(y[0] == 0.0);
  CHECK(y[1] == doctest::Approx(9.99955).epsilon(1e-5));
  CHECK(gradcheck::check_silu(70).max_rel_err < 1e-6);
}

TEST_CASE("act_attention is odd, bounded and monotone") {
  Tensor4<double> probe(Shape4{1, 1, 1, 1});
  probe[0] = 0.0;
  CHECK(act_attention(probe)[0] == 0.0);
  probe[0] = 2.0;
  CHECK(act_attention(probe)[0] == doctest::Approx(0.380797).epsilon(1e-5));

  auto xs = fill_random<double>(Shape4{1, 1, 100, 100}, 71, UniformDist{-8, 8});
  auto neg = scaled(xs, -1.0);
  auto fx = act_attention(xs, 1.0, 1.0);
  auto fneg = act_attention(neg, 1.0, 1.0);
  for (index_t i = 0; i < xs.size(); ++i) {
    CHECK(std::abs(fx[i] + fneg[i]) <= 1e-12);           // oddness
    CHECK(std::abs(fx[i]) < 0.5);                         // bounded in (-b/2, b/2)
    if (xs[i] != 0.0) CHECK(xs[i] * fx[i] > 0.0);         // sign agreement
  }
  auto deriv = act_attention_deriv(xs, 1.3, 0.7);
  for (index_t i = 0; i < deriv.size(); ++i) CHECK(deriv[i] > 0.0);

  CHECK_THROWS_AS(act_attention(xs, -1.0, 1.0), std::invalid_argument);
  CHECK(gradcheck::check_attention(72).max_rel_err < 1e-6);
}

TEST_CASE("pixel_shuffle") {
  // r=1 identity
  auto x = fill_random<double>(Shape4{1, 3, 4, 4}, 80, UniformDist{-1, 1});
  CHECK(max_abs_diff(pixel_shuffle(x, 1), x) == 0.0);

  // documented index map for (1,4,1,1) -> (1,1,2,2)
  Tensor4<double> v(Shape4{1, 4, 1, 1});
  for (index_t i = 0; i < 4; ++i) v[i] = static_cast<double>(i + 1);
  auto shuffled = pixel_shuffle(v, 2);
  CHECK(shuffled.shape() == Shape4{1, 1, 2, 2});
  for (index_t i = 0; i < 4; ++i) CHECK(shuffled[i] == static_cast<double>(i + 1));

  CHECK(pixel_shuffle(Tensor4<double>(Shape4{2, 48, 5, 7}), 4).shape() == Shape4{2, 3, 20, 28});
  CHECK_THROWS_AS(pixel_shuffle(Tensor4<double>(Shape4{1, 3, 2, 2}), 2), std::invalid_argument);
}

TEST_CASE("pixel_unshuffle inverts pixel_shuffle bit-exactly") {
  std::uint64_t seed = 90;
  for (index_t r : {1, 2, 3, 4}) {
    for (int trial = 0; trial < 3; ++trial) {
      Xoshiro256pp rng(seed++);
      Shape4 s{static_cast<index_t>(1 + rng.below(2)), r * r * static_cast<index_t>(1 + rng.below(4)),
               static_cast<index_t>(1 + rng.below(6)), static_cast<index_t>(1 + rng.below(6))};
      auto x = fill_random<float>(s, seed++, NormalDist{0, 3});
      CHECK(max_abs_diff(pixel_unshuffle(pixel_shuffle(x, r), r), x) == 0.0f);
    }
  }
}

TEST_CASE("forward/backward pairs pass randomized finite-difference checks") {
  for (std::uint64_t seed : {201, 202, 203}) {
    for (const auto& res : gradcheck::run_suite(seed)) {
      INFO(res.op, " seed ", seed, " err ", res.max_rel_err);
      CHECK(res.passed());
    }
  }
}

TEST_CASE("threaded conv is bit-identical to serial") {
  auto x = fill_random<float>(Shape4{2, 8, 16, 16}, 300, UniformDist{-1, 1});
  ConvKernel<float> k(8, 8, 3);
  k.weights = fill_random<float>(k.weights.shape(), 301, UniformDist{-1, 1});
  auto serial = conv2d_forward(x, k, 1);
  set_thread_count(4);
  auto threaded = conv2d_forward(x, k, 1);
  set_thread_count(1);
  CHECK(max_abs_diff(serial, threaded) == 0.0f);
}
