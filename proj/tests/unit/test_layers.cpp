#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "fedfreeze/errors.hpp"
#include "fedfreeze/layers.hpp"
#include "oracles.hpp"

using namespace fedfreeze;

namespace {

struct ConvCase {
  std::size_t n, ci, co, h, k, stride, padding;
};

class ConvAgainstDirect : public ::testing::TestWithParam<ConvCase> {};

TEST_P(ConvAgainstDirect, ForwardMatchesDirectSummation) {
  const ConvCase c = GetParam();
  std::mt19937_64 rng(7);
  auto x = oracle::random_tensor<double>({c.n, c.ci, c.h, c.h}, rng);
  auto w = oracle::random_tensor<double>({c.co, c.ci, c.k, c.k}, rng);
  auto b = oracle::random_tensor<double>({c.co}, rng);
  const auto y = conv2d_forward(x, w, b, {c.stride, c.padding});
  const auto ref = oracle::direct_conv(x, w, b, c.stride, c.padding);
  ASSERT_EQ(y.shape(), ref.shape());
  EXPECT_LT(oracle::max_abs_diff(y, ref), 1e-12);

  // float path against the same oracle
  const auto yf = conv2d_forward(x.cast<float>(), w.cast<float>(), b.cast<float>(), {c.stride, c.padding});
  EXPECT_LT(oracle::max_abs_diff(yf, ref), 1e-4);
}

TEST_P(ConvAgainstDirect, BackwardMatchesFiniteDifferences) {
  const ConvCase c = GetParam();
  std::mt19937_64 rng(11);
  auto x = oracle::random_tensor<double>({c.n, c.ci, c.h, c.h}, rng);
  auto w = oracle::random_tensor<double>({c.co, c.ci, c.k, c.k}, rng);
  auto b = oracle::random_tensor<double>({c.co}, rng);
  const ConvGeometry g{c.stride, c.padding};
  const auto ref_y = oracle::direct_conv(x, w, b, c.stride, c.padding);
  auto up = oracle::random_tensor<double>(ref_y.shape(), rng);

  const auto grads = conv2d_backward(x, w, up, g);
  auto gx = oracle::numeric_gradient(
      [&](const Tensor64& v) { return oracle::dot(oracle::direct_conv(v, w, b, c.stride, c.padding), up); }, x);
  auto gw = oracle::numeric_gradient(
      [&](const Tensor64& v) { return oracle::dot(oracle::direct_conv(x, v, b, c.stride, c.padding), up); }, w);
  auto gb = oracle::numeric_gradient(
      [&](const Tensor64& v) { return oracle::dot(oracle::direct_conv(x, w, v, c.stride, c.padding), up); }, b);
  EXPECT_LT(oracle::max_abs_diff(grads.input, gx), 1e-7);
  EXPECT_LT(oracle::max_abs_diff(grads.weight, gw), 1e-7);
  EXPECT_LT(oracle::max_abs_diff(grads.bias, gb), 1e-7);
}

INSTANTIATE_TEST_SUITE_P(Shapes, ConvAgainstDirect,
                         ::testing::Values(ConvCase{2, 3, 4, 5, 3, 1, 1}, ConvCase{1, 2, 3, 7, 3, 2, 1}, ConvCase{2, 2, 3, 6, 4, 2, 1},
                                           ConvCase{3, 1, 2, 4, 1, 1, 0}, ConvCase{2, 2, 2, 7, 3, 2, 0}));

TEST(Conv, SkippedGradientsStayEmpty) {
  std::mt19937_64 rng(3);
  auto x = oracle::random_tensor<float>({1, 2, 4, 4}, rng);
  auto w = oracle::random_tensor<float>({3, 2, 3, 3}, rng);
  auto up = oracle::random_tensor<float>({1, 3, 4, 4}, rng);
  const auto only_params = conv2d_backward(x, w, up, {1, 1}, false, true);
  EXPECT_TRUE(only_params.input.empty());
  EXPECT_FALSE(only_params.weight.empty());
  const auto only_input = conv2d_backward(x, w, up, {1, 1}, true, false);
  EXPECT_TRUE(only_input.weight.empty());
  EXPECT_TRUE(only_input.bias.empty());
  EXPECT_FALSE(only_input.input.empty());
}

TEST(Conv, RejectsBadGeometry) {
  Tensor x({1, 2, 5, 5});
  Tensor w({3, 2, 3, 3});
  Tensor b({3});
  EXPECT_THROW(conv2d_forward(x, w, b, {0, 1}), DimensionError);
  EXPECT_THROW(conv2d_forward(Tensor({1, 2, 6, 6}), w, b, {2, 0}), DimensionError);
  EXPECT_THROW(conv2d_forward(Tensor({1, 3, 5, 5}), w, b, {1, 1}), DimensionError);
  EXPECT_THROW(conv2d_forward(x, w, Tensor({2}), {1, 1}), DimensionError);
  EXPECT_THROW(conv2d_forward(Tensor({2, 5, 5}), w, b, {1, 1}), DimensionError);
}


// Batch norm as a plain function of x, gamma, beta in batch-statistics mode.
double bn_batch_objective(const Tensor64& x, const Tensor64& gamma, const Tensor64& beta, const Tensor64& up) {
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  double total = 0.0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean = 0.0;
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t i = 0; i < plane; ++i) mean += x[(s * c + ch) * plane + i];
    mean /= static_cast<double>(n * plane);
    double var = 0.0;
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t i = 0; i < plane; ++i) var += std::pow(x[(s * c + ch) * plane + i] - mean, 2);
    var /= static_cast<double>(n * plane);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t j = (s * c + ch) * plane + i;
        total += up[j] * (gamma[ch] * (x[j] - mean) / std::sqrt(var + kBnEpsilon) + beta[ch]);
      }
  }
  return total;
}

TEST(BatchNorm, BatchStatisticsAreBiasedMoments) {
  std::mt19937_64 rng(5);
  auto x = oracle::random_tensor<double>({3, 2, 2, 2}, rng, -2.0, 3.0);
  Tensor64 gamma({2}, 1.0), beta({2}, 0.0);
  const auto out = batchnorm_forward(x, gamma, beta, BnMode::batch_stats);
  for (std::size_t ch = 0; ch < 2; ++ch) {
    std::vector<double> vals;
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t i = 0; i < 4; ++i) vals.push_back(x[(s * 2 + ch) * 4 + i]);
    double mean = 0.0;
    for (double v : vals) mean += v;
    mean /= vals.size();
    double var = 0.0;
    for (double v : vals) var += (v - mean) * (v - mean);
    var /= vals.size();
    EXPECT_NEAR(out.used.mean[ch], mean, 1e-12);
    EXPECT_NEAR(out.used.var[ch], var, 1e-12);
  }
  // normalized output has zero mean and (almost) unit variance per channel
  double m0 = 0.0;
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t i = 0; i < 4; ++i) m0 += out.y[(s * 2) * 4 + i];
  EXPECT_NEAR(m0, 0.0, 1e-10);
}

TEST(BatchNorm, BatchModeBackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  auto x = oracle::random_tensor<double>({3, 2, 3, 3}, rng);
  auto gamma = oracle::random_tensor<double>({2}, rng, 0.5, 1.5);
  auto beta = oracle::random_tensor<double>({2}, rng);
  auto up = oracle::random_tensor<double>(x.shape(), rng);
  const auto fwd = batchnorm_forward(x, gamma, beta, BnMode::batch_stats);
  const auto g = batchnorm_backward(fwd.cache, up);
  auto gx = oracle::numeric_gradient([&](const Tensor64& v) { return bn_batch_objective(v, gamma, beta, up); }, x);
  auto gg = oracle::numeric_gradient([&](const Tensor64& v) { return bn_batch_objective(x, v, beta, up); }, gamma);
  auto gb = oracle::numeric_gradient([&](const Tensor64& v) { return bn_batch_objective(x, gamma, v, up); }, beta);
  EXPECT_LT(oracle::max_abs_diff(g.input, gx), 1e-6);
  EXPECT_LT(oracle::max_abs_diff(g.gamma, gg), 1e-6);
  EXPECT_LT(oracle::max_abs_diff(g.beta, gb), 1e-6);
}

TEST(BatchNorm, FixedModeBackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  auto x = oracle::random_tensor<double>({2, 3, 2, 2}, rng);
  auto gamma = oracle::random_tensor<double>({3}, rng, 0.5, 1.5);
  auto beta = oracle::random_tensor<double>({3}, rng);
  BnStats<double> stats{oracle::random_tensor<double>({3}, rng), oracle::random_tensor<double>({3}, rng, 0.2, 2.0)};
  auto up = oracle::random_tensor<double>(x.shape(), rng);
  auto objective = [&](const Tensor64& xv, const Tensor64& gv, const Tensor64& bv) {
    return oracle::dot(batchnorm_forward(xv, gv, bv, BnMode::fixed_stats, &stats).y, up);
  };
  const auto fwd = batchnorm_forward(x, gamma, beta, BnMode::fixed_stats, &stats);
  EXPECT_EQ(fwd.used.mean, stats.mean);
  const auto g = batchnorm_backward(fwd.cache, up);
  auto gx = oracle::numeric_gradient([&](const Tensor64& v) { return objective(v, gamma, beta); }, x);
  auto gg = oracle::numeric_gradient([&](const Tensor64& v) { return objective(x, v, beta); }, gamma);
  auto gb = oracle::numeric_gradient([&](const Tensor64& v) { return objective(x, gamma, v); }, beta);
  EXPECT_LT(oracle::max_abs_diff(g.input, gx), 1e-7);
  EXPECT_LT(oracle::max_abs_diff(g.gamma, gg), 1e-7);
  EXPECT_LT(oracle::max_abs_diff(g.beta, gb), 1e-7);
}

TEST(BatchNorm, ErrorCases) {
  Tensor x({2, 2, 2, 2});
  Tensor gamma({2}, 1.0f), beta({2});
  EXPECT_THROW(batchnorm_forward(x, gamma, beta, BnMode::fixed_stats), StateError);
  BnStats<float> bad{Tensor({2}), Tensor({2}, -1.0f)};
  EXPECT_THROW(batchnorm_forward(x, gamma, beta, BnMode::fixed_stats, &bad), InputError);
  EXPECT_THROW(batchnorm_forward(x, Tensor({3}), beta, BnMode::batch_stats), DimensionError);
  EXPECT_THROW(batchnorm_backward(BnCache<float>{}, x), StateError);
}

TEST(Relu, ForwardAndMask) {
  Tensor x({1, 1, 1, 4}, std::vector<float>{-1.0f, 0.0f, 0.5f, 2.0f});
  const auto y = relu(x);
  EXPECT_EQ(y.values(), (std::vector<float>{0.0f, 0.0f, 0.5f, 2.0f}));
  const auto g = relu_backward(x, Tensor({1, 1, 1, 4}, 3.0f));
  EXPECT_EQ(g.values(), (std::vector<float>{0.0f, 0.0f, 3.0f, 3.0f}));
}

TEST(OutputBlock, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(17);
  auto x = oracle::random_tensor<double>({3, 4, 2, 2}, rng);
  auto w = oracle::random_tensor<double>({5, 4}, rng);
  auto b = oracle::random_tensor<double>({5}, rng);
  auto up = oracle::random_tensor<double>({3, 5}, rng);
  const auto g = output_block_backward(x, w, up);
  auto f = [&](const Tensor64& xv, const Tensor64& wv, const Tensor64& bv) {
    return oracle::dot(output_block_forward(xv, wv, bv), up);
  };
  EXPECT_LT(oracle::max_abs_diff(g.input, oracle::numeric_gradient([&](const Tensor64& v) { return f(v, w, b); }, x)), 1e-8);
  EXPECT_LT(oracle::max_abs_diff(g.weight, oracle::numeric_gradient([&](const Tensor64& v) { return f(x, v, b); }, w)), 1e-8);
  EXPECT_LT(oracle::max_abs_diff(g.bias, oracle::numeric_gradient([&](const Tensor64& v) { return f(x, w, v); }, b)), 1e-8);
}

TEST(Loss, CrossEntropyValueAndGradient) {
  Tensor64 logits({2, 3}, std::vector<double>{1.0, 2.0, 0.5, -1.0, 0.0, 3.0});
  const std::vector<int> labels{1, 0};
  const auto r = softmax_cross_entropy(logits, labels);
  auto nll = [](double a, double b, double c, double pick) {
    return -(pick - std::log(std::exp(a) + std::exp(b) + std::exp(c)));
  };
  EXPECT_NEAR(r.loss, 0.5 * (nll(1.0, 2.0, 0.5, 2.0) + nll(-1.0, 0.0, 3.0, -1.0)), 1e-12);
  auto g = oracle::numeric_gradient(
      [&](const Tensor64& v) { return softmax_cross_entropy(v, labels).loss; }, logits);
  EXPECT_LT(oracle::max_abs_diff(r.grad_logits, g), 1e-8);
}

TEST(Loss, RejectsBadLabels) {
  Tensor logits({2, 3});
  EXPECT_THROW(softmax_cross_entropy(logits, std::vector<int>{0, 3}), InputError);
  EXPECT_THROW(softmax_cross_entropy(logits, std::vector<int>{0, -1}), InputError);
  EXPECT_THROW(softmax_cross_entropy(logits, std::vector<int>{0}), DimensionError);
}

TEST(Sgd, StepAndValidation) {
  Tensor w({2}, std::vector<float>{1.0f, -1.0f});
  Tensor g({2}, std::vector<float>{0.5f, 0.25f});
  EXPECT_EQ(sgd_step(w, g, 0.1).values(), (std::vector<float>{0.95f, -1.025f}));
  EXPECT_THROW(sgd_step(w, g, -0.1), InputError);
  EXPECT_THROW(sgd_step(w, Tensor({3}), 0.1), DimensionError);
}

}  // namespace
