#include "fedfreeze/layers.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace fedfreeze {

std::string shape_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

std::size_t conv_output_extent(std::size_t input, std::size_t kernel, ConvGeometry geometry) {
  if (geometry.stride == 0) throw DimensionError("convolution stride must be >= 1");
  const std::size_t padded = input + 2 * geometry.padding;
  if (kernel == 0 || padded < kernel) {
    throw DimensionError("kernel " + std::to_string(kernel) + " larger than padded input " + std::to_string(padded));
  }
  if ((padded - kernel) % geometry.stride != 0) {
    throw DimensionError("convolution output size is not integral (input " + std::to_string(input) + ", kernel " +
                         std::to_string(kernel) + ", stride " + std::to_string(geometry.stride) + ")");
  }
  return (padded - kernel) / geometry.stride + 1;
}

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvDims {
  std::size_t n, c_in, h, w, c_out, k, h_out, w_out;
  std::size_t patch() const { return c_in * k * k; }
  std::size_t plane_out() const { return h_out * w_out; }
  std::size_t columns() const { return n * plane_out(); }
};

template <typename T>
ConvDims conv_dims(const BasicTensor<T>& x, const BasicTensor<T>& weight, ConvGeometry geometry) {
  if (x.rank() != 4) throw DimensionError("conv2d input must be NCHW, got " + shape_string(x.shape()));
  if (weight.rank() != 4 || weight.dim(2) != weight.dim(3)) {
    throw DimensionError("conv2d weight must be (out, in, k, k), got " + shape_string(weight.shape()));
  }
  if (weight.dim(1) != x.dim(1)) {
    throw DimensionError("conv2d weight expects " + std::to_string(weight.dim(1)) + " input channels, input has " +
                         std::to_string(x.dim(1)));
  }
  ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), 0, 0};
  d.h_out = conv_output_extent(d.h, d.k, geometry);
  d.w_out = conv_output_extent(d.w, d.k, geometry);
  return d;
}

// col has shape (c_in*k*k, n*h_out*w_out); column index is n*plane + oh*w_out + ow.
template <typename T>
std::vector<T> im2col(const BasicTensor<T>& x, const ConvDims& d, ConvGeometry g) {
  std::vector<T> col(d.patch() * d.columns(), T{0});
  const std::size_t cols = d.columns();
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < d.c_in; ++c) {
    for (std::size_t kh = 0; kh < d.k; ++kh) {
      for (std::size_t kw = 0; kw < d.k; ++kw) {
        T* row = col.data() + ((c * d.k + kh) * d.k + kw) * cols;
        for (std::size_t n = 0; n < d.n; ++n) {
          const T* plane = x.data().data() + (n * d.c_in + c) * d.h * d.w;
          T* out = row + n * d.plane_out();
          for (std::size_t oh = 0; oh < d.h_out; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) - pad;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.h)) continue;
            for (std::size_t ow = 0; ow < d.w_out; ++ow) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kw) - pad;
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(d.w)) continue;
              out[oh * d.w_out + ow] = plane[ih * static_cast<std::ptrdiff_t>(d.w) + iw];
            }
          }
        }
      }
    }
  }
  return col;
}

template <typename T>
BasicTensor<T> col2im(const std::vector<T>& col, const ConvDims& d, ConvGeometry g) {
  BasicTensor<T> x({d.n, d.c_in, d.h, d.w});
  const std::size_t cols = d.columns();
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < d.c_in; ++c) {
    for (std::size_t kh = 0; kh < d.k; ++kh) {
      for (std::size_t kw = 0; kw < d.k; ++kw) {
        const T* row = col.data() + ((c * d.k + kh) * d.k + kw) * cols;
        for (std::size_t n = 0; n < d.n; ++n) {
          T* plane = x.data().data() + (n * d.c_in + c) * d.h * d.w;
          const T* in = row + n * d.plane_out();
          for (std::size_t oh = 0; oh < d.h_out; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) - pad;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.h)) continue;
            for (std::size_t ow = 0; ow < d.w_out; ++ow) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kw) - pad;
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(d.w)) continue;
              plane[ih * static_cast<std::ptrdiff_t>(d.w) + iw] += in[oh * d.w_out + ow];
            }
          }
        }
      }
    }
  }
  return x;
}

// Reorders an NCHW upstream gradient into (c_out, n*plane).
template <typename T>
std::vector<T> nchw_to_channel_major(const BasicTensor<T>& t, const ConvDims& d) {
  std::vector<T> out(d.c_out * d.columns());
  const std::size_t plane = d.plane_out();
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t c = 0; c < d.c_out; ++c) {
      const T* src = t.data().data() + (n * d.c_out + c) * plane;
      std::copy(src, src + plane, out.data() + c * d.columns() + n * plane);
    }
  }
  return out;
}

template <typename T>
std::size_t per_channel_count(const BasicTensor<T>& x) {
  return x.dim(0) * x.dim(2) * x.dim(3);
}

template <typename T>
void require_channel_vector(const BasicTensor<T>& v, std::size_t channels, const char* what) {
  if (v.size() != channels) {
    throw DimensionError(std::string(what) + " has " + std::to_string(v.size()) + " entries, expected " +
                         std::to_string(channels) + " channels");
  }
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                              ConvGeometry geometry) {
  const ConvDims d = conv_dims(x, weight, geometry);
  require_channel_vector(bias, d.c_out, "conv2d bias");
  const std::vector<T> col = im2col(x, d, geometry);

  std::vector<T> out_cm(d.c_out * d.columns());
  Eigen::Map<const RowMatrix<T>> w_mat(weight.data().data(), d.c_out, d.patch());
  Eigen::Map<const RowMatrix<T>> col_mat(col.data(), d.patch(), d.columns());
  Eigen::Map<RowMatrix<T>> out_mat(out_cm.data(), d.c_out, d.columns());
  out_mat.noalias() = w_mat * col_mat;

  BasicTensor<T> y({d.n, d.c_out, d.h_out, d.w_out});
  const std::size_t plane = d.plane_out();
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t c = 0; c < d.c_out; ++c) {
      const T* src = out_cm.data() + c * d.columns() + n * plane;
      T* dst = y.data().data() + (n * d.c_out + c) * plane;
      const T b = bias[c];
      for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + b;
    }
  }
  return y;
}

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& cache_x, const BasicTensor<T>& weight,
                             const BasicTensor<T>& upstream, ConvGeometry geometry, bool need_input,
                             bool need_params) {
  const ConvDims d = conv_dims(cache_x, weight, geometry);
  require_shape(upstream, {d.n, d.c_out, d.h_out, d.w_out}, "conv2d upstream gradient");

  ConvGrads<T> grads;
  const std::vector<T> up_cm = nchw_to_channel_major(upstream, d);
  Eigen::Map<const RowMatrix<T>> up_mat(up_cm.data(), d.c_out, d.columns());
  Eigen::Map<const RowMatrix<T>> w_mat(weight.data().data(), d.c_out, d.patch());

  if (need_params) {
    const std::vector<T> col = im2col(cache_x, d, geometry);
    Eigen::Map<const RowMatrix<T>> col_mat(col.data(), d.patch(), d.columns());
    grads.weight = BasicTensor<T>(weight.shape());
    Eigen::Map<RowMatrix<T>> gw(grads.weight.data().data(), d.c_out, d.patch());
    gw.noalias() = up_mat * col_mat.transpose();

    grads.bias = BasicTensor<T>({d.c_out});
    for (std::size_t c = 0; c < d.c_out; ++c) {
      const T* row = up_cm.data() + c * d.columns();
      double acc = 0.0;
      for (std::size_t p = 0; p < d.columns(); ++p) acc += row[p];
      grads.bias[c] = static_cast<T>(acc);
    }
  }
  if (need_input) {
    std::vector<T> grad_col(d.patch() * d.columns());
    Eigen::Map<RowMatrix<T>> gc(grad_col.data(), d.patch(), d.columns());
    gc.noalias() = w_mat.transpose() * up_mat;
    grads.input = col2im(grad_col, d, geometry);
  }
  return grads;
}

template <typename T>
BnForward<T> batchnorm_forward(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                               BnMode mode, const BnStats<T>* fixed, double eps) {
  if (x.rank() != 4) throw DimensionError("batchnorm input must be NCHW, got " + shape_string(x.shape()));
  const std::size_t n = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  require_channel_vector(gamma, channels, "batchnorm gamma");
  require_channel_vector(beta, channels, "batchnorm beta");

  BnForward<T> out;
  out.used.mean = BasicTensor<T>({channels});
  out.used.var = BasicTensor<T>({channels});
  if (mode == BnMode::fixed_stats) {
    if (fixed == nullptr) throw StateError("batchnorm fixed_stats mode requires statistics");
    require_channel_vector(fixed->mean, channels, "batchnorm mean");
    require_channel_vector(fixed->var, channels, "batchnorm variance");
    for (std::size_t c = 0; c < channels; ++c) {
      if (fixed->var[c] < T{0}) throw InputError("batchnorm variance must be non-negative");
    }
    out.used = *fixed;
  } else {
    const double count = static_cast<double>(per_channel_count(x));
    if (count == 0) throw DimensionError("batchnorm over an empty batch");
    for (std::size_t c = 0; c < channels; ++c) {
      double sum = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x.data().data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) sum += p[i];
      }
      const double mean = sum / count;
      double sq = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x.data().data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double dv = p[i] - mean;
          sq += dv * dv;
        }
      }
      out.used.mean[c] = static_cast<T>(mean);
      out.used.var[c] = static_cast<T>(sq / count);
    }
  }

  out.y = BasicTensor<T>(x.shape());
  out.cache.mode = mode;
  out.cache.gamma = gamma;
  out.cache.x_hat = BasicTensor<T>(x.shape());
  out.cache.inv_std.resize(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    const T inv_std = static_cast<T>(1.0 / std::sqrt(static_cast<double>(out.used.var[c]) + eps));
    out.cache.inv_std[c] = inv_std;
    const T mean = out.used.mean[c];
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t base = (b * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const T xh = (x[base + i] - mean) * inv_std;
        out.cache.x_hat[base + i] = xh;
        out.y[base + i] = gamma[c] * xh + beta[c];
      }
    }
  }
  out.cache.valid = true;
  return out;
}

template <typename T>
BnGrads<T> batchnorm_backward(const BnCache<T>& cache, const BasicTensor<T>& upstream, bool need_params) {
  if (!cache.valid) throw StateError("batchnorm_backward called without a forward cache");
  require_shape(upstream, cache.x_hat.shape(), "batchnorm upstream gradient");
  const std::size_t n = upstream.dim(0), channels = upstream.dim(1), plane = upstream.dim(2) * upstream.dim(3);
  const double count = static_cast<double>(n * plane);

  BnGrads<T> grads;
  grads.input = BasicTensor<T>(upstream.shape());
  if (need_params) {
    grads.gamma = BasicTensor<T>({channels});
    grads.beta = BasicTensor<T>({channels});
  }
  for (std::size_t c = 0; c < channels; ++c) {
    double sum_up = 0.0, sum_up_xhat = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t base = (b * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_up += upstream[base + i];
        sum_up_xhat += static_cast<double>(upstream[base + i]) * cache.x_hat[base + i];
      }
    }
    if (need_params) {
      grads.gamma[c] = static_cast<T>(sum_up_xhat);
      grads.beta[c] = static_cast<T>(sum_up);
    }
    const T g = cache.gamma[c];
    const T inv_std = cache.inv_std[c];
    if (cache.mode == BnMode::fixed_stats) {
      const T scale = g * inv_std;
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t base = (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) grads.input[base + i] = upstream[base + i] * scale;
      }
    } else {
      // dx = g * inv_std / M * (M * dy - sum(dy) - x_hat * sum(dy * x_hat))
      const T mean_up = static_cast<T>(sum_up / count);
      const T mean_up_xhat = static_cast<T>(sum_up_xhat / count);
      const T scale = g * inv_std;
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t base = (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          grads.input[base + i] = scale * (upstream[base + i] - mean_up - cache.x_hat[base + i] * mean_up_xhat);
        }
      }
    }
  }
  return grads;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
  return y;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& cache_x, const BasicTensor<T>& upstream) {
  require_shape(upstream, cache_x.shape(), "relu upstream gradient");
  BasicTensor<T> g(upstream.shape());
  for (std::size_t i = 0; i < upstream.size(); ++i) g[i] = cache_x[i] > T{0} ? upstream[i] : T{0};
  return g;
}

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("global_avg_pool input must be NCHW, got " + shape_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  BasicTensor<T> pooled({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    const T* p = x.data().data() + i * plane;
    double acc = 0.0;
    for (std::size_t j = 0; j < plane; ++j) acc += p[j];
    pooled[i] = static_cast<T>(acc / static_cast<double>(plane));
  }
  return pooled;
}

template <typename T>
BasicTensor<T> output_block_forward(const BasicTensor<T>& x, const BasicTensor<T>& fc_weight,
                                    const BasicTensor<T>& fc_bias) {
  const BasicTensor<T> pooled = global_avg_pool(x);
  const std::size_t n = pooled.dim(0), c = pooled.dim(1);
  if (fc_weight.rank() != 2 || fc_weight.dim(1) != c) {
    throw DimensionError("fc weight " + shape_string(fc_weight.shape()) + " does not accept " + std::to_string(c) +
                         " pooled features");
  }
  const std::size_t k = fc_weight.dim(0);
  require_channel_vector(fc_bias, k, "fc bias");
  BasicTensor<T> logits({n, k});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t j = 0; j < k; ++j) {
      T acc = fc_bias[j];
      for (std::size_t i = 0; i < c; ++i) acc += fc_weight[j * c + i] * pooled[b * c + i];
      logits[b * k + j] = acc;
    }
  }
  return logits;
}

template <typename T>
OutputGrads<T> output_block_backward(const BasicTensor<T>& cache_x, const BasicTensor<T>& fc_weight,
                                     const BasicTensor<T>& grad_logits, bool need_input, bool need_params) {
  const BasicTensor<T> pooled = global_avg_pool(cache_x);
  const std::size_t n = pooled.dim(0), c = pooled.dim(1);
  if (fc_weight.rank() != 2 || fc_weight.dim(1) != c) {
    throw DimensionError("fc weight " + shape_string(fc_weight.shape()) + " does not accept " + std::to_string(c) +
                         " pooled features");
  }
  const std::size_t k = fc_weight.dim(0);
  require_shape(grad_logits, {n, k}, "output block upstream gradient");

  OutputGrads<T> grads;
  if (need_params) {
    grads.weight = BasicTensor<T>(fc_weight.shape());
    grads.bias = BasicTensor<T>({k});
    for (std::size_t j = 0; j < k; ++j) {
      double gb = 0.0;
      for (std::size_t b = 0; b < n; ++b) gb += grad_logits[b * k + j];
      grads.bias[j] = static_cast<T>(gb);
      for (std::size_t i = 0; i < c; ++i) {
        double gw = 0.0;
        for (std::size_t b = 0; b < n; ++b) gw += static_cast<double>(grad_logits[b * k + j]) * pooled[b * c + i];
        grads.weight[j * c + i] = static_cast<T>(gw);
      }
    }
  }
  if (need_input) {
    const std::size_t plane = cache_x.dim(2) * cache_x.dim(3);
    const T inv_plane = static_cast<T>(1.0 / static_cast<double>(plane));
    grads.input = BasicTensor<T>(cache_x.shape());
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t i = 0; i < c; ++i) {
        T acc{0};
        for (std::size_t j = 0; j < k; ++j) acc += grad_logits[b * k + j] * fc_weight[j * c + i];
        acc *= inv_plane;
        T* dst = grads.input.data().data() + (b * c + i) * plane;
        std::fill(dst, dst + plane, acc);
      }
    }
  }
  return grads;
}

template <typename T>
LossResult<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw DimensionError("logits must be (batch, classes), got " + shape_string(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) {
    throw DimensionError("got " + std::to_string(labels.size()) + " labels for a batch of " + std::to_string(n));
  }
  if (n == 0) throw InputError("softmax_cross_entropy over an empty batch");
  LossResult<T> out{T{0}, BasicTensor<T>(logits.shape())};
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw InputError("label " + std::to_string(label) + " outside [0, " + std::to_string(k) + ")");
    }
    const T* row = logits.data().data() + b * k;
    const double max_logit = *std::max_element(row, row + k);
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(row[j]) - max_logit);
    const double log_denom = std::log(denom);
    total += log_denom - (static_cast<double>(row[label]) - max_logit);
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::exp(static_cast<double>(row[j]) - max_logit - log_denom);
      const double target = static_cast<std::size_t>(label) == j ? 1.0 : 0.0;
      out.grad_logits[b * k + j] = static_cast<T>((p - target) / static_cast<double>(n));
    }
  }
  out.loss = static_cast<T>(total / static_cast<double>(n));
  return out;
}

template <typename T>
BasicTensor<T> sgd_step(const BasicTensor<T>& w, const BasicTensor<T>& g, double learning_rate) {
  if (w.shape() != g.shape()) {
    throw DimensionError("sgd_step shape mismatch " + shape_string(w.shape()) + " vs " + shape_string(g.shape()));
  }
  if (learning_rate < 0) throw InputError("learning rate must be non-negative");
  BasicTensor<T> out(w.shape());
  const T lr = static_cast<T>(learning_rate);
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = w[i] - lr * g[i];
  return out;
}

#define FEDFREEZE_INSTANTIATE_LAYERS(T)                                                                          \
  template BasicTensor<T> conv2d_forward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,     \
                                         ConvGeometry);                                                           \
  template ConvGrads<T> conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,      \
                                        ConvGeometry, bool, bool);                                                \
  template BnForward<T> batchnorm_forward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,    \
                                          BnMode, const BnStats<T>*, double);                                     \
  template BnGrads<T> batchnorm_backward(const BnCache<T>&, const BasicTensor<T>&, bool);                         \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                            \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);                           \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                                                 \
  template BasicTensor<T> output_block_forward(const BasicTensor<T>&, const BasicTensor<T>&,                      \
                                               const BasicTensor<T>&);                                            \
  template OutputGrads<T> output_block_backward(const BasicTensor<T>&, const BasicTensor<T>&,                     \
                                                const BasicTensor<T>&, bool, bool);                               \
  template LossResult<T> softmax_cross_entropy(const BasicTensor<T>&, std::span<const int>);                      \
  template BasicTensor<T> sgd_step(const BasicTensor<T>&, const BasicTensor<T>&, double);

FEDFREEZE_INSTANTIATE_LAYERS(float)
FEDFREEZE_INSTANTIATE_LAYERS(double)

#undef FEDFREEZE_INSTANTIATE_LAYERS

}  // namespace fedfreeze
