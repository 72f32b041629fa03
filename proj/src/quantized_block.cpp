#include "fedfreeze/quantized_block.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace fedfreeze {

template <typename T>
FusedConvParams<T> fuse_conv_bn(const BasicTensor<T>& conv_weight, const BasicTensor<T>& conv_bias,
                                const BasicTensor<T>& gamma, const BasicTensor<T>& beta, const BasicTensor<T>& mean,
                                const BasicTensor<T>& var, double eps) {
  if (conv_weight.rank() != 4) throw DimensionError("fuse_conv_bn expects an (out, in, k, k) kernel");
  const std::size_t out = conv_weight.dim(0);
  for (const auto* v : {&conv_bias, &gamma, &beta, &mean, &var}) {
    if (v->size() != out) throw DimensionError("fuse_conv_bn per-channel vectors must have " + std::to_string(out) + " entries");
  }
  const std::size_t per_channel = conv_weight.size() / out;
  FusedConvParams<T> fused{BasicTensor<T>(conv_weight.shape()), BasicTensor<T>({out})};
  for (std::size_t c = 0; c < out; ++c) {
    if (var[c] < T{0}) throw InputError("fuse_conv_bn: negative variance in channel " + std::to_string(c));
    const T scale = static_cast<T>(static_cast<double>(gamma[c]) / std::sqrt(static_cast<double>(var[c]) + eps));
    const T shift = beta[c] - mean[c] * scale;
    for (std::size_t i = 0; i < per_channel; ++i) {
      fused.weight[c * per_channel + i] = scale * conv_weight[c * per_channel + i];
    }
    fused.bias[c] = scale * conv_bias[c] + shift;
  }
  return fused;
}

template FusedConvParams<float> fuse_conv_bn(const Tensor&, const Tensor&, const Tensor&, const Tensor&,
                                             const Tensor&, const Tensor&, double);
template FusedConvParams<double> fuse_conv_bn(const Tensor64&, const Tensor64&, const Tensor64&, const Tensor64&,
                                              const Tensor64&, const Tensor64&, double);

namespace {

QuantParams per_sample_gradient_params(const std::optional<float>& per_sample, std::size_t batch, const char* what) {
  if (!per_sample) throw StateError(std::string(what) + " has no calibrated gradient scale");
  if (batch == 0) throw DimensionError("gradient batch is empty");
  QuantParams qp;
  qp.signedness = Signedness::signed8;
  qp.scale = std::max(*per_sample / static_cast<float>(batch), kMinQuantScale);
  return qp;
}

struct IntConvDims {
  std::size_t n, c_in, h, w, c_out, k, h_out, w_out;
  std::size_t patch() const { return c_in * k * k; }
  std::size_t plane_out() const { return h_out * w_out; }
  std::size_t columns() const { return n * plane_out(); }
};

IntConvDims int_conv_dims(const Shape& x, const Shape& weight, ConvGeometry g) {
  if (x.size() != 4) throw DimensionError("quantized conv input must be NCHW, got " + shape_string(x));
  if (weight[1] != x[1]) throw DimensionError("quantized conv channel mismatch");
  IntConvDims d{x[0], x[1], x[2], x[3], weight[0], weight[2], 0, 0};
  d.h_out = conv_output_extent(d.h, d.k, g);
  d.w_out = conv_output_extent(d.w, d.k, g);
  return d;
}

// Offset-free input columns (q - zero_point); padding contributes real zero.
std::vector<std::int16_t> int_im2col(const ActivationTensor& x, const IntConvDims& d, ConvGeometry g) {
  std::vector<std::int16_t> col(d.patch() * d.columns(), 0);
  const std::size_t cols = d.columns();
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  const std::int32_t zp = x.params.zero_point;
  for (std::size_t c = 0; c < d.c_in; ++c) {
    for (std::size_t kh = 0; kh < d.k; ++kh) {
      for (std::size_t kw = 0; kw < d.k; ++kw) {
        std::int16_t* row = col.data() + ((c * d.k + kh) * d.k + kw) * cols;
        for (std::size_t n = 0; n < d.n; ++n) {
          const std::uint8_t* plane = x.data.data() + (n * d.c_in + c) * d.h * d.w;
          std::int16_t* out = row + n * d.plane_out();
          for (std::size_t oh = 0; oh < d.h_out; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) - pad;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.h)) continue;
            for (std::size_t ow = 0; ow < d.w_out; ++ow) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kw) - pad;
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(d.w)) continue;
              out[oh * d.w_out + ow] =
                  static_cast<std::int16_t>(plane[ih * static_cast<std::ptrdiff_t>(d.w) + iw] - zp);
            }
          }
        }
      }
    }
  }
  return col;
}

}  // namespace

QuantParams QuantizedConvBlock::gradient_params(std::size_t batch) const {
  return per_sample_gradient_params(gradient_scale_per_sample, batch, "quantized conv block");
}

QuantParams QuantizedOutputBlock::gradient_params(std::size_t batch) const {
  return per_sample_gradient_params(gradient_scale_per_sample, batch, "quantized output block");
}

QuantizedConvBlock make_quantized_conv_block(FusedConvParams<float> fused, ConvGeometry geometry, bool relu,
                                             const QuantParams& input_params, const QuantParams& output_params,
                                             std::optional<float> gradient_scale_per_sample) {
  input_params.validate();
  output_params.validate();
  if (input_params.signedness != Signedness::unsigned8 || output_params.signedness != Signedness::unsigned8) {
    throw InputError("quantized activations are unsigned 8-bit");
  }
  QuantizedConvBlock block;
  block.geometry = geometry;
  block.relu = relu;
  block.input_params = input_params;
  block.output_params = output_params;
  block.gradient_scale_per_sample = gradient_scale_per_sample;
  block.weight = quantize<std::int8_t>(fused.weight, symmetric_params(max_abs(fused.weight)));
  const double acc_scale = static_cast<double>(input_params.scale) * block.weight.params.scale;
  block.bias.resize(fused.bias.size());
  constexpr double lo = std::numeric_limits<std::int32_t>::min();
  constexpr double hi = std::numeric_limits<std::int32_t>::max();
  for (std::size_t c = 0; c < fused.bias.size(); ++c) {
    block.bias[c] = static_cast<std::int32_t>(std::clamp(std::nearbyint(fused.bias[c] / acc_scale), lo, hi));
  }
  block.fused = std::move(fused);
  return block;
}

ActivationTensor quant_block_forward(const QuantizedConvBlock& block, const ActivationTensor& x,
                                     QuantBlockCache* cache) {
  if (x.params != block.input_params) {
    throw StateError("quantized block input does not use the calibrated activation parameters");
  }
  const IntConvDims d = int_conv_dims(x.shape, block.weight.shape, block.geometry);
  const std::vector<std::int16_t> col = int_im2col(x, d, block.geometry);
  const std::size_t cols = d.columns(), patch = d.patch();

  std::vector<std::int32_t> acc(d.c_out * cols, 0);
  for (std::size_t o = 0; o < d.c_out; ++o) {
    std::int32_t* a = acc.data() + o * cols;
    for (std::size_t kk = 0; kk < patch; ++kk) {
      const std::int32_t w = block.weight.data[o * patch + kk];
      if (w == 0) continue;
      const std::int16_t* c = col.data() + kk * cols;
      for (std::size_t p = 0; p < cols; ++p) a[p] += w * c[p];
    }
  }

  ActivationTensor y;
  y.shape = {d.n, d.c_out, d.h_out, d.w_out};
  y.params = block.output_params;
  y.data.resize(d.c_out * cols);
  if (cache) {
    cache->valid = true;
    cache->input_shape = x.shape;
    cache->relu_mask.assign(y.data.size(), 1);
  }
  const double multiplier =
      static_cast<double>(block.input_params.scale) * block.weight.params.scale / block.output_params.scale;
  const std::int32_t zp = block.output_params.zero_point;
  const std::size_t plane = d.plane_out();
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t o = 0; o < d.c_out; ++o) {
      const std::int32_t* a = acc.data() + o * cols + n * plane;
      const std::size_t base = (n * d.c_out + o) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        const double r = std::nearbyint(static_cast<double>(a[p] + block.bias[o]) * multiplier);
        double q = std::clamp(r + zp, 0.0, 255.0);
        if (block.relu) {
          if (cache) cache->relu_mask[base + p] = r > 0.0 ? 1 : 0;
          q = std::max(q, static_cast<double>(zp));
        }
        y.data[base + p] = static_cast<std::uint8_t>(q);
      }
    }
  }
  return y;
}

Tensor quant_block_backward_input(const QuantizedConvBlock& block, const Tensor& upstream,
                                  const QuantBlockCache& cache) {
  if (!cache.valid) throw StateError("quantized backward requires the forward activation mask");
  const IntConvDims d = int_conv_dims(cache.input_shape, block.weight.shape, block.geometry);
  require_shape(upstream, {d.n, d.c_out, d.h_out, d.w_out}, "quantized block upstream gradient");
  const QuantParams gq = block.gradient_params(d.n);

  // Mask in float, quantize, and lay out as (c_out, n*plane).
  const std::size_t cols = d.columns(), patch = d.patch(), plane = d.plane_out();
  std::vector<std::int16_t> g(d.c_out * cols);
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t o = 0; o < d.c_out; ++o) {
      const std::size_t base = (n * d.c_out + o) * plane;
      std::int16_t* dst = g.data() + o * cols + n * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        const float v = cache.relu_mask[base + p] ? upstream[base + p] : 0.0f;
        dst[p] = static_cast<std::int16_t>(quantize_value(v, gq));
      }
    }
  }

  std::vector<std::int32_t> grad_col(patch * cols, 0);
  for (std::size_t kk = 0; kk < patch; ++kk) {
    std::int32_t* out = grad_col.data() + kk * cols;
    for (std::size_t o = 0; o < d.c_out; ++o) {
      const std::int32_t w = block.weight.data[o * patch + kk];
      if (w == 0) continue;
      const std::int16_t* src = g.data() + o * cols;
      for (std::size_t p = 0; p < cols; ++p) out[p] += w * src[p];
    }
  }

  std::vector<std::int32_t> image(d.n * d.c_in * d.h * d.w, 0);
  const auto pad = static_cast<std::ptrdiff_t>(block.geometry.padding);
  for (std::size_t c = 0; c < d.c_in; ++c) {
    for (std::size_t kh = 0; kh < d.k; ++kh) {
      for (std::size_t kw = 0; kw < d.k; ++kw) {
        const std::int32_t* row = grad_col.data() + ((c * d.k + kh) * d.k + kw) * cols;
        for (std::size_t n = 0; n < d.n; ++n) {
          std::int32_t* dst = image.data() + (n * d.c_in + c) * d.h * d.w;
          const std::int32_t* src = row + n * plane;
          for (std::size_t oh = 0; oh < d.h_out; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * block.geometry.stride + kh) - pad;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.h)) continue;
            for (std::size_t ow = 0; ow < d.w_out; ++ow) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * block.geometry.stride + kw) - pad;
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(d.w)) continue;
              dst[ih * static_cast<std::ptrdiff_t>(d.w) + iw] += src[oh * d.w_out + ow];
            }
          }
        }
      }
    }
  }

  Tensor grad(cache.input_shape);
  const double scale = static_cast<double>(gq.scale) * block.weight.params.scale;
  for (std::size_t i = 0; i < image.size(); ++i) grad[i] = static_cast<float>(image[i] * scale);
  return grad;
}

QuantizedOutputBlock make_quantized_output_block(const Tensor& fc_weight, const Tensor& fc_bias,
                                                 const QuantParams& input_params,
                                                 std::optional<float> gradient_scale_per_sample) {
  input_params.validate();
  if (fc_weight.rank() != 2 || fc_bias.size() != fc_weight.dim(0)) {
    throw DimensionError("quantized output block expects (classes, features) weights and matching bias");
  }
  QuantizedOutputBlock block;
  block.fc_bias = fc_bias;
  block.weight = quantize<std::int8_t>(fc_weight, symmetric_params(max_abs(fc_weight)));
  block.input_params = input_params;
  block.gradient_scale_per_sample = gradient_scale_per_sample;
  return block;
}

Tensor quant_output_forward(const QuantizedOutputBlock& block, const ActivationTensor& x) {
  if (x.params != block.input_params) {
    throw StateError("quantized output block input does not use the calibrated activation parameters");
  }
  if (x.shape.size() != 4) throw DimensionError("quantized output block input must be NCHW");
  const std::size_t n = x.shape[0], c = x.shape[1], plane = x.shape[2] * x.shape[3];
  const std::size_t k = block.weight.shape[0];
  if (block.weight.shape[1] != c) throw DimensionError("quantized output block feature mismatch");

  std::vector<std::int32_t> pooled(n * c, 0);
  const std::int32_t zp = x.params.zero_point;
  for (std::size_t i = 0; i < n * c; ++i) {
    const std::uint8_t* p = x.data.data() + i * plane;
    std::int32_t acc = 0;
    for (std::size_t j = 0; j < plane; ++j) acc += static_cast<std::int32_t>(p[j]) - zp;
    pooled[i] = acc;
  }
  const double scale =
      static_cast<double>(x.params.scale) * block.weight.params.scale / static_cast<double>(plane);
  Tensor logits({n, k});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t j = 0; j < k; ++j) {
      std::int32_t acc = 0;
      for (std::size_t i = 0; i < c; ++i) acc += block.weight.data[j * c + i] * pooled[b * c + i];
      logits[b * k + j] = static_cast<float>(acc * scale) + block.fc_bias[j];
    }
  }
  return logits;
}

Tensor quant_output_backward_input(const QuantizedOutputBlock& block, const Tensor& grad_logits,
                                   const Shape& input_shape) {
  if (input_shape.size() != 4) throw DimensionError("quantized output block input must be NCHW");
  const std::size_t n = input_shape[0], c = input_shape[1], plane = input_shape[2] * input_shape[3];
  const std::size_t k = block.weight.shape[0];
  require_shape(grad_logits, {n, k}, "quantized output block upstream gradient");
  const QuantParams gq = block.gradient_params(n);

  Tensor grad(input_shape);
  const double scale = static_cast<double>(gq.scale) * block.weight.params.scale / static_cast<double>(plane);
  std::vector<std::int32_t> g(k);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t j = 0; j < k; ++j) g[j] = quantize_value(grad_logits[b * k + j], gq);
    for (std::size_t i = 0; i < c; ++i) {
      std::int32_t acc = 0;
      for (std::size_t j = 0; j < k; ++j) acc += g[j] * block.weight.data[j * c + i];
      float* dst = grad.data().data() + (b * c + i) * plane;
      std::fill(dst, dst + plane, static_cast<float>(acc * scale));
    }
  }
  return grad;
}

}  // namespace fedfreeze
