#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "fedfreeze/errors.hpp"
#include "fedfreeze/quantization.hpp"
#include "fedfreeze/quantized_block.hpp"
#include "oracles.hpp"
#include "quant_fixture.hpp"

using namespace fedfreeze;

namespace {

TEST(Quantize, DirectFormula) {
  QuantParams qp;
  qp.scale = 0.1f;
  EXPECT_EQ(quantize_value(0.0, qp), 0);
  EXPECT_EQ(quantize_value(1.2, qp), 12);
  EXPECT_EQ(quantize_value(20.0, qp), 127);
  EXPECT_EQ(quantize_value(-20.0, qp), -127);
  const auto q = quantize<std::int8_t>(Tensor({1}, std::vector<float>{1.2f}), qp);
  EXPECT_NEAR(dequantize(q)[0], 1.2f, 1e-6f);
}

TEST(Quantize, RoundsHalfToEven) {
  QuantParams qp;
  qp.scale = 1.0f;
  EXPECT_EQ(quantize_value(2.5, qp), 2);
  EXPECT_EQ(quantize_value(3.5, qp), 4);
  EXPECT_EQ(quantize_value(-2.5, qp), -2);
}

TEST(Quantize, SymmetricScale) {
  EXPECT_NEAR(symmetric_params(2.54).scale, 0.02f, 1e-8f);
  EXPECT_EQ(symmetric_params(0.0).scale, kMinQuantScale);
  const QuantParams a = affine_params(-1.0, 3.0);
  EXPECT_EQ(a.signedness, Signedness::unsigned8);
  EXPECT_NEAR(a.scale, 4.0 / 255.0, 1e-7);
  EXPECT_EQ(a.zero_point, 64);
  EXPECT_EQ(affine_params(0.0, 0.0).scale, kMinQuantScale);
}

TEST(Quantize, RoundTripWithinHalfStep) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const double lo = -3.0 * u(rng), hi = 3.0 * u(rng) + 1e-3;
    const Tensor x = oracle::random_tensor<float>({64}, rng, lo, hi);
    const QuantParams aff = affine_params(lo, hi);
    const Tensor ra = dequantize(quantize<std::uint8_t>(x, aff));
    EXPECT_LE(oracle::max_abs_diff(ra, x), aff.scale * 0.5 + 1e-6);
    const QuantParams sym = symmetric_params(std::max(-lo, hi));
    const Tensor rs = dequantize(quantize<std::int8_t>(x, sym));
    EXPECT_LE(oracle::max_abs_diff(rs, x), sym.scale * 0.5 + 1e-6);
  }
}

TEST(Quantize, ValidatesParams) {
  QuantParams bad;
  bad.scale = 0.0f;
  EXPECT_THROW(bad.validate(), InputError);
  QuantParams zp;
  zp.zero_point = 3;
  EXPECT_THROW(zp.validate(), InputError);
  EXPECT_THROW(quantize<std::uint8_t>(Tensor({1}), QuantParams{}), InputError);
}

TEST(Fusion, IdentityStatistics) {
  std::mt19937_64 rng(1);
  const Tensor w = oracle::random_tensor<float>({2, 1, 3, 3}, rng);
  const Tensor b = oracle::random_tensor<float>({2}, rng);
  const auto f = fuse_conv_bn(w, b, Tensor({2}, 1.0f), Tensor({2}), Tensor({2}), Tensor({2}, 1.0f), 0.0);
  EXPECT_EQ(f.weight, w);
  EXPECT_EQ(f.bias, b);
}

TEST(Fusion, HandExample) {
  const Tensor64 w({1, 1, 1, 1}, std::vector<double>{0.3});
  const Tensor64 b({1}, std::vector<double>{0.7});
  const auto f = fuse_conv_bn(w, b, Tensor64({1}, 2.0), Tensor64({1}, 1.0), Tensor64({1}, 0.5), Tensor64({1}, 0.25),
                              0.0);
  EXPECT_DOUBLE_EQ(f.weight[0], 4.0 * 0.3);
  EXPECT_DOUBLE_EQ(f.bias[0], 4.0 * 0.7 - 1.0);
}

TEST(Fusion, MatchesUnfusedComposition) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor64 x = oracle::random_tensor<double>({2, 3, 5, 5}, rng);
    const Tensor64 w = oracle::random_tensor<double>({4, 3, 3, 3}, rng);
    const Tensor64 b = oracle::random_tensor<double>({4}, rng);
    const Tensor64 gamma = oracle::random_tensor<double>({4}, rng, 0.2, 2.0);
    const Tensor64 beta = oracle::random_tensor<double>({4}, rng);
    const BnStats<double> st{oracle::random_tensor<double>({4}, rng), oracle::random_tensor<double>({4}, rng, 0.05, 3.0)};
    const ConvGeometry g{1, 1};
    const auto ref = batchnorm_forward(oracle::direct_conv(x, w, b, 1, 1), gamma, beta, BnMode::fixed_stats, &st).y;
    const auto f = fuse_conv_bn(w, b, gamma, beta, st.mean, st.var);
    EXPECT_LT(oracle::max_abs_diff(conv2d_forward(x, f.weight, f.bias, g), ref), 1e-12);

    const auto ff = fuse_conv_bn(w.cast<float>(), b.cast<float>(), gamma.cast<float>(), beta.cast<float>(),
                                 st.mean.cast<float>(), st.var.cast<float>());
    const auto yf = conv2d_forward(x.cast<float>(), ff.weight, ff.bias, g);
    EXPECT_LT(oracle::max_abs_diff(yf, ref), 1e-5);
  }
}

TEST(Fusion, RejectsNegativeVariance) {
  EXPECT_THROW(fuse_conv_bn(Tensor({1, 1, 1, 1}), Tensor({1}), Tensor({1}), Tensor({1}), Tensor({1}),
                            Tensor({1}, -0.5f)),
               InputError);
}

TEST(QuantBlock, ForwardWithinThreeOutputSteps) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    auto c = fixture::make_calibrated_block(rng, 4, 8, 16, 8 + trial % 2, 1 + trial % 2);
    const auto y = quant_block_forward(c.block, quantize<std::uint8_t>(c.x, c.block.input_params));
    const Tensor yd = dequantize(y);
    EXPECT_LE(oracle::max_abs_diff(yd, c.fused_out), 3.0 * c.block.output_params.scale);
    EXPECT_GE(*std::min_element(yd.values().begin(), yd.values().end()), 0.0f);
  }
}

TEST(QuantBlock, ZeroInputGivesRequantizedBias) {
  std::mt19937_64 rng(32);
  auto c = fixture::make_calibrated_block(rng);
  ActivationTensor zero;
  zero.shape = c.x.shape();
  zero.params = c.block.input_params;
  zero.data.assign(c.x.size(), static_cast<std::uint8_t>(c.block.input_params.zero_point));
  const auto y = quant_block_forward(c.block, zero);
  const double m = static_cast<double>(c.block.input_params.scale) * c.block.weight.params.scale /
                   c.block.output_params.scale;
  const std::size_t plane = y.shape[2] * y.shape[3];
  for (std::size_t i = 0; i < y.data.size(); ++i) {
    const std::size_t ch = (i / plane) % y.shape[1];
    // interior positions see only the bias; with padding zero-valued taps also contribute nothing
    const double r = std::nearbyint(c.block.bias[ch] * m);
    const double q = std::clamp(std::max(r, 0.0) + c.block.output_params.zero_point, 0.0, 255.0);
    EXPECT_EQ(y.data[i], static_cast<std::uint8_t>(q));
  }
}

TEST(QuantBlock, BackwardWithinFiveGradientSteps) {
  std::mt19937_64 rng(33);
  for (int trial = 0; trial < 100; ++trial) {
    auto c = fixture::make_calibrated_block(rng, 4, 8, 16, 8 + trial % 2, 1 + trial % 2);
    QuantBlockCache cache;
    quant_block_forward(c.block, quantize<std::uint8_t>(c.x, c.block.input_params), &cache);
    const Tensor g = quant_block_backward_input(c.block, c.upstream, cache);
    const Tensor ref = fixture::fused_backward(c, cache.relu_mask);
    // step of the quantized upstream gradient
    const double step = c.block.gradient_params(4).scale;
    EXPECT_LE(oracle::max_abs_diff(g, ref), 5.0 * step);
    EXPECT_GE(fixture::cosine(g, ref), 0.95);
  }
}

TEST(QuantBlock, BackwardZeroAndLinearity) {
  std::mt19937_64 rng(34);
  auto c = fixture::make_calibrated_block(rng);
  QuantBlockCache cache;
  quant_block_forward(c.block, quantize<std::uint8_t>(c.x, c.block.input_params), &cache);
  const Tensor zero = quant_block_backward_input(c.block, Tensor(c.upstream.shape()), cache);
  EXPECT_EQ(oracle::max_abs_value(zero), 0.0);

  Tensor half = c.upstream;
  for (float& v : half.data()) v *= 0.5f;
  const Tensor g1 = quant_block_backward_input(c.block, half, cache);
  const Tensor g2 = quant_block_backward_input(c.block, c.upstream, cache);
  Tensor doubled = g1;
  for (float& v : doubled.data()) v *= 2.0f;
  const double step = oracle::max_abs_value(g2) / 127.0;
  EXPECT_LE(oracle::max_abs_diff(doubled, g2), 5.0 * step);
}

TEST(QuantBlock, StateErrors) {
  std::mt19937_64 rng(35);
  auto c = fixture::make_calibrated_block(rng);
  EXPECT_THROW(quant_block_backward_input(c.block, c.upstream, QuantBlockCache{}), StateError);
  QuantBlockCache cache;
  quant_block_forward(c.block, quantize<std::uint8_t>(c.x, c.block.input_params), &cache);
  QuantizedConvBlock no_grad = c.block;
  no_grad.gradient_scale_per_sample.reset();
  EXPECT_THROW(quant_block_backward_input(no_grad, c.upstream, cache), StateError);
  const auto wrong = quantize<std::uint8_t>(c.x, affine_params(-5.0, 5.0));
  EXPECT_THROW(quant_block_forward(c.block, wrong), StateError);
}

TEST(QuantOutput, ForwardAndBackwardNearFloat) {
  std::mt19937_64 rng(36);
  const Tensor x = oracle::random_tensor<float>({4, 6, 3, 3}, rng, 0.0, 2.0);
  const Tensor w = oracle::random_tensor<float>({5, 6}, rng);
  const Tensor b = oracle::random_tensor<float>({5}, rng);
  const QuantParams in = affine_params(0.0, 2.0);
  const Tensor up = oracle::random_tensor<float>({4, 5}, rng, -0.25, 0.25);
  auto block = make_quantized_output_block(w, b, in, static_cast<float>(oracle::max_abs_value(up) * 4 / 127.0));
  const auto xq = quantize<std::uint8_t>(x, in);
  const Tensor ref = output_block_forward(dequantize(xq), w, b);
  const Tensor got = quant_output_forward(block, xq);
  const double logit_scale = oracle::max_abs_value(ref) / 127.0;
  EXPECT_LE(oracle::max_abs_diff(got, ref), 3.0 * logit_scale);

  const Tensor gref = output_block_backward(x, w, up, true, false).input;
  const Tensor g = quant_output_backward_input(block, up, x.shape());
  EXPECT_LE(oracle::max_abs_diff(g, gref), 5.0 * oracle::max_abs_value(gref) / 127.0);
  EXPECT_GE(fixture::cosine(g, gref), 0.99);
}

}  // namespace
