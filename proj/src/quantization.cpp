#include "fedfreeze/quantization.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace fedfreeze {

void QuantParams::validate() const {
  if (!(scale > 0.0f) || !std::isfinite(scale)) throw InputError("quantization scale must be positive and finite");
  if (zero_point < qmin() || zero_point > qmax()) {
    throw InputError("zero point " + std::to_string(zero_point) + " outside the integer range");
  }
  if (signedness == Signedness::signed8 && zero_point != 0) {
    throw InputError("signed 8-bit parameters are symmetric (zero point 0)");
  }
}

QuantParams symmetric_params(double max_abs_value) {
  QuantParams qp;
  qp.signedness = Signedness::signed8;
  qp.zero_point = 0;
  qp.scale = std::max(static_cast<float>(std::abs(max_abs_value) / 127.0), kMinQuantScale);
  return qp;
}

QuantParams affine_params(double lo, double hi) {
  lo = std::min(lo, 0.0);
  hi = std::max(hi, 0.0);
  QuantParams qp;
  qp.signedness = Signedness::unsigned8;
  qp.scale = std::max(static_cast<float>((hi - lo) / 255.0), kMinQuantScale);
  const double zp = std::nearbyint(-lo / static_cast<double>(qp.scale));
  qp.zero_point = static_cast<std::int32_t>(std::clamp(zp, 0.0, 255.0));
  return qp;
}

std::int32_t quantize_value(double x, const QuantParams& qp) {
  const double q = std::nearbyint(x / static_cast<double>(qp.scale)) + qp.zero_point;
  return static_cast<std::int32_t>(std::clamp(q, static_cast<double>(qp.qmin()), static_cast<double>(qp.qmax())));
}

template <typename Q>
QuantizedTensor<Q> quantize(const Tensor& x, const QuantParams& qp) {
  qp.validate();
  if ((qp.signedness == Signedness::signed8) != std::is_signed_v<Q>) {
    throw InputError("quantization signedness does not match the storage type");
  }
  QuantizedTensor<Q> out;
  out.shape = x.shape();
  out.params = qp;
  out.data.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = static_cast<Q>(quantize_value(x[i], qp));
  return out;
}

template <typename Q>
Tensor dequantize(const QuantizedTensor<Q>& q) {
  Tensor out(q.shape);
  const float scale = q.params.scale;
  const std::int32_t zp = q.params.zero_point;
  for (std::size_t i = 0; i < q.data.size(); ++i) {
    out[i] = scale * static_cast<float>(static_cast<std::int32_t>(q.data[i]) - zp);
  }
  return out;
}

double max_abs(const Tensor& x) {
  double m = 0.0;
  for (float v : x.data()) m = std::max(m, static_cast<double>(std::abs(v)));
  return m;
}

template QuantizedTensor<std::int8_t> quantize(const Tensor&, const QuantParams&);
template QuantizedTensor<std::uint8_t> quantize(const Tensor&, const QuantParams&);
template Tensor dequantize(const QuantizedTensor<std::int8_t>&);
template Tensor dequantize(const QuantizedTensor<std::uint8_t>&);

}  // namespace fedfreeze
