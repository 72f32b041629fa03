#pragma once

// Fused and 8-bit quantized kernels for frozen blocks.

#include <cstdint>
#include <optional>
#include <vector>

#include "fedfreeze/layers.hpp"
#include "fedfreeze/quantization.hpp"

namespace fedfreeze {

template <typename T>
struct FusedConvParams {
  BasicTensor<T> weight;
  BasicTensor<T> bias;
};

/// Folds a fixed-statistics batch norm into the preceding convolution:
///   scale = gamma / sqrt(var + eps), shift = beta - mean * scale,
///   W' = scale * W (per output channel), b' = scale * b + shift.
template <typename T>
FusedConvParams<T> fuse_conv_bn(const BasicTensor<T>& conv_weight, const BasicTensor<T>& conv_bias,
                                const BasicTensor<T>& gamma, const BasicTensor<T>& beta, const BasicTensor<T>& mean,
                                const BasicTensor<T>& var, double eps = kBnEpsilon);

/// A frozen conv[-bn][-relu] block executed in integer arithmetic. Gradient
/// scales are stored per sample because mean-reduced loss gradients shrink
/// as 1/batch; the effective scale for a batch of B is per_sample / B.
struct QuantizedConvBlock {
  ConvGeometry geometry;
  bool relu = true;
  FusedConvParams<float> fused;
  WeightTensor weight;
  std::vector<std::int32_t> bias;  // in units of input_scale * weight_scale
  QuantParams input_params;
  QuantParams output_params;
  std::optional<float> gradient_scale_per_sample;

  QuantParams gradient_params(std::size_t batch) const;
};

QuantizedConvBlock make_quantized_conv_block(FusedConvParams<float> fused, ConvGeometry geometry, bool relu,
                                             const QuantParams& input_params, const QuantParams& output_params,
                                             std::optional<float> gradient_scale_per_sample = std::nullopt);

struct QuantBlockCache {
  bool valid = false;
  Shape input_shape;
  std::vector<std::uint8_t> relu_mask;  // 1 where the pre-activation was positive
};

/// Integer fused conv (uint8 activations x int8 weights, int32 accumulation),
/// requantized to output_params with ReLU as a clamp at the output zero point.
ActivationTensor quant_block_forward(const QuantizedConvBlock& block, const ActivationTensor& x,
                                     QuantBlockCache* cache = nullptr);

/// Input gradient of a frozen block after the trained range: ReLU mask in
/// float, int8 gradient quantization, integer transposed conv, dequantize.
Tensor quant_block_backward_input(const QuantizedConvBlock& block, const Tensor& upstream,
                                  const QuantBlockCache& cache);

/// Frozen output block: integer pooled-sum times int8 fc weights, float bias.
struct QuantizedOutputBlock {
  Tensor fc_bias;
  WeightTensor weight;
  QuantParams input_params;
  std::optional<float> gradient_scale_per_sample;

  QuantParams gradient_params(std::size_t batch) const;
};

QuantizedOutputBlock make_quantized_output_block(const Tensor& fc_weight, const Tensor& fc_bias,
                                                 const QuantParams& input_params,
                                                 std::optional<float> gradient_scale_per_sample = std::nullopt);

Tensor quant_output_forward(const QuantizedOutputBlock& block, const ActivationTensor& x);

Tensor quant_output_backward_input(const QuantizedOutputBlock& block, const Tensor& grad_logits,
                                   const Shape& input_shape);

}  // namespace fedfreeze
