#pragma once

#include <cstdint>
#include <type_traits>
#include <vector>

#include "fedfreeze/tensor.hpp"

namespace fedfreeze {

inline constexpr float kMinQuantScale = 1e-8f;

enum class Signedness { signed8, unsigned8 };

/// Per-tensor 8-bit quantization parameters: real = scale * (q - zero_point).
/// Weights and gradients are symmetric signed (zero_point 0), activations are
/// affine unsigned.
struct QuantParams {
  float scale = 1.0f;
  std::int32_t zero_point = 0;
  Signedness signedness = Signedness::signed8;

  std::int32_t qmin() const { return signedness == Signedness::signed8 ? -127 : 0; }
  std::int32_t qmax() const { return signedness == Signedness::signed8 ? 127 : 255; }

  /// Throws InputError when scale <= 0 or the zero point lies outside the range.
  void validate() const;

  bool operator==(const QuantParams&) const = default;
};

/// Symmetric signed parameters covering [-max_abs, max_abs]; scale floored at kMinQuantScale.
QuantParams symmetric_params(double max_abs);

/// Affine unsigned parameters covering [min(lo, 0), max(hi, 0)]; scale floored at kMinQuantScale.
QuantParams affine_params(double lo, double hi);

template <typename Q>
struct QuantizedTensor {
  static_assert(std::is_same_v<Q, std::int8_t> || std::is_same_v<Q, std::uint8_t>);
  Shape shape;
  std::vector<Q> data;
  QuantParams params;

  std::size_t size() const { return data.size(); }
  bool operator==(const QuantizedTensor&) const = default;
};

using ActivationTensor = QuantizedTensor<std::uint8_t>;
using WeightTensor = QuantizedTensor<std::int8_t>;

/// q = clamp(round_half_even(x / scale) + zero_point, qmin, qmax).
std::int32_t quantize_value(double x, const QuantParams& qp);

template <typename Q>
QuantizedTensor<Q> quantize(const Tensor& x, const QuantParams& qp);

template <typename Q>
Tensor dequantize(const QuantizedTensor<Q>& q);

/// Largest absolute value in the tensor (0 for empty tensors).
double max_abs(const Tensor& x);

}  // namespace fedfreeze
