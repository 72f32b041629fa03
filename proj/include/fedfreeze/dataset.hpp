#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "fedfreeze/tensor.hpp"

namespace fedfreeze {

/// Labeled images, NCHW.
struct Dataset {
  Tensor images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t image_size() const { return images.dim(2); }

  /// Throws DimensionError unless images are NCHW with one label per image.
  void validate() const;
  /// Copies the listed samples, in order.
  Dataset gather(std::span<const std::size_t> indices) const;
};

}  // namespace fedfreeze
