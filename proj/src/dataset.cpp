#include "fedfreeze/dataset.hpp"

#include <algorithm>
#include <string>

#include "fedfreeze/errors.hpp"

namespace fedfreeze {

void Dataset::validate() const {
  if (images.rank() != 4) throw DimensionError("dataset images must be NCHW, got " + shape_string(images.shape()));
  if (images.dim(0) != labels.size()) {
    throw DimensionError("dataset has " + std::to_string(images.dim(0)) + " images and " +
                         std::to_string(labels.size()) + " labels");
  }
}

Dataset Dataset::gather(std::span<const std::size_t> indices) const {
  Shape shape = images.shape();
  const std::size_t per = shape[1] * shape[2] * shape[3];
  shape[0] = indices.size();
  Dataset out{Tensor(shape), std::vector<int>(indices.size())};
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t src = indices[i];
    if (src >= size()) throw InputError("sample index " + std::to_string(src) + " out of range");
    std::copy_n(images.data().begin() + static_cast<std::ptrdiff_t>(src * per), per,
                out.images.data().begin() + static_cast<std::ptrdiff_t>(i * per));
    out.labels[i] = labels[src];
  }
  return out;
}

}  // namespace fedfreeze
