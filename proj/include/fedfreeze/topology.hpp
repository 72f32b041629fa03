#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "fedfreeze/layers.hpp"

namespace fedfreeze {

enum class BlockKind { input, standard, output };

std::string to_string(BlockKind kind);
BlockKind parse_block_kind(const std::string& text);

/// One freeze/train unit. Input and standard blocks are conv[-bn][-relu];
/// the output block is global-average-pool followed by a fully connected layer.
struct BlockSpec {
  BlockKind kind = BlockKind::standard;
  std::size_t kernel = 3;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;
  std::size_t padding = 1;
  bool has_bn = true;
  bool has_relu = true;
  // Output block only.
  std::size_t in_features = 0;
  std::size_t num_classes = 0;

  bool is_conv() const { return kind != BlockKind::output; }
  ConvGeometry geometry() const { return {stride, padding}; }

  bool operator==(const BlockSpec&) const = default;
};

struct Topology {
  std::size_t image_channels = 1;
  std::size_t image_size = 16;
  std::vector<BlockSpec> blocks;

  std::size_t size() const { return blocks.size(); }
  std::size_t num_classes() const { return blocks.back().num_classes; }

  /// Checks the block chain (kinds, channel continuity, integral conv extents).
  void validate() const;

  /// Spatial extent (height == width) of the input to block i; i == size()
  /// refers to the logits and is not valid.
  std::size_t input_extent(std::size_t block) const;
  std::size_t output_extent(std::size_t block) const;

  bool operator==(const Topology&) const = default;
};

/// Builds a topology from (out_channels, stride) pairs for the conv blocks; the
/// first pair becomes the input block, a GAP+FC output block is appended.
struct ConvStage {
  std::size_t out_channels;
  std::size_t stride = 1;
  std::size_t kernel = 0;  // 0 selects the topology-wide kernel

  bool operator==(const ConvStage&) const = default;
};
Topology make_topology(std::size_t image_channels, std::size_t image_size, const std::vector<ConvStage>& stages,
                       std::size_t num_classes, std::size_t kernel = 3);

/// 6 blocks on 16x16 images: input 1->8, standard 8->16 (4x4, stride 2), 16->16, 16->32, 32->32, output 32->10.
/// Padding is (kernel - 1) / 2.
Topology default_topology();

}  // namespace fedfreeze
