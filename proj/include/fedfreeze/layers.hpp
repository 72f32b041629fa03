#pragma once

// Layer primitives of the training engine. Every operation is instantiated for
// float (production) and double (gradient verification).

#include <cstddef>
#include <span>

#include "fedfreeze/tensor.hpp"

namespace fedfreeze {

inline constexpr double kBnEpsilon = 1e-5;

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Output spatial extent of a convolution; throws DimensionError when the
/// window does not tile the padded input exactly.
std::size_t conv_output_extent(std::size_t input, std::size_t kernel, ConvGeometry geometry);

/// Cross-correlation of an NCHW input with an (out, in, k, k) kernel.
template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                              const BasicTensor<T>& bias, ConvGeometry geometry);

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;
  BasicTensor<T> weight;
  BasicTensor<T> bias;
};

/// Gradients of conv2d_forward. `need_input` / `need_params` skip the parts a
/// frozen or first-trained block does not need; skipped members stay empty.
template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& cache_x, const BasicTensor<T>& weight,
                             const BasicTensor<T>& upstream, ConvGeometry geometry, bool need_input = true,
                             bool need_params = true);

enum class BnMode { batch_stats, fixed_stats };

template <typename T>
struct BnStats {
  BasicTensor<T> mean;
  BasicTensor<T> var;
};

template <typename T>
struct BnCache {
  bool valid = false;
  BnMode mode = BnMode::batch_stats;
  BasicTensor<T> x_hat;
  BasicTensor<T> gamma;
  std::vector<T> inv_std;
};

template <typename T>
struct BnForward {
  BasicTensor<T> y;
  BnStats<T> used;
  BnCache<T> cache;
};

/// Per-channel y = gamma * (x - mean) / sqrt(var + eps) + beta. In batch_stats
/// mode mean and (biased) variance come from the batch and spatial axes;
/// in fixed_stats mode they are taken from `fixed`.
template <typename T>
BnForward<T> batchnorm_forward(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                               BnMode mode, const BnStats<T>* fixed = nullptr, double eps = kBnEpsilon);

template <typename T>
struct BnGrads {
  BasicTensor<T> input;
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
};

template <typename T>
BnGrads<T> batchnorm_backward(const BnCache<T>& cache, const BasicTensor<T>& upstream, bool need_params = true);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& cache_x, const BasicTensor<T>& upstream);

/// Global average pooling, NCHW -> (N, C).
template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x);

/// logits = fc_weight * global_avg_pool(x) + fc_bias; fc_weight is (classes, channels).
template <typename T>
BasicTensor<T> output_block_forward(const BasicTensor<T>& x, const BasicTensor<T>& fc_weight,
                                    const BasicTensor<T>& fc_bias);

template <typename T>
struct OutputGrads {
  BasicTensor<T> input;
  BasicTensor<T> weight;
  BasicTensor<T> bias;
};

template <typename T>
OutputGrads<T> output_block_backward(const BasicTensor<T>& cache_x, const BasicTensor<T>& fc_weight,
                                     const BasicTensor<T>& grad_logits, bool need_input = true,
                                     bool need_params = true);

template <typename T>
struct LossResult {
  T loss;
  BasicTensor<T> grad_logits;
};

/// Mean softmax cross-entropy over the batch; gradient is (softmax - onehot) / B.
template <typename T>
LossResult<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels);

template <typename T>
BasicTensor<T> sgd_step(const BasicTensor<T>& w, const BasicTensor<T>& g, double learning_rate);

}  // namespace fedfreeze
