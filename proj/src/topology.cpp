#include "fedfreeze/topology.hpp"

#include "fedfreeze/errors.hpp"

namespace fedfreeze {

std::string to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::input: return "input";
    case BlockKind::standard: return "standard";
    case BlockKind::output: return "output";
  }
  return "unknown";
}

BlockKind parse_block_kind(const std::string& text) {
  if (text == "input") return BlockKind::input;
  if (text == "standard") return BlockKind::standard;
  if (text == "output") return BlockKind::output;
  throw InputError("unknown block kind '" + text + "'");
}

void Topology::validate() const {
  if (blocks.size() < 2) throw InputError("a topology needs at least an input and an output block");
  if (image_channels == 0 || image_size == 0) throw InputError("image dimensions must be positive");
  std::size_t channels = image_channels;
  std::size_t extent = image_size;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const BlockSpec& b = blocks[i];
    const std::string where = "block " + std::to_string(i) + ": ";
    const bool first = i == 0, last = i + 1 == blocks.size();
    if (first && b.kind != BlockKind::input) throw InputError(where + "first block must be the input block");
    if (last && b.kind != BlockKind::output) throw InputError(where + "last block must be the output block");
    if (!first && !last && b.kind != BlockKind::standard) throw InputError(where + "inner blocks must be standard");
    if (b.kind == BlockKind::output) {
      if (b.in_features != channels) {
        throw InputError(where + "output block expects " + std::to_string(b.in_features) + " features, previous block has " +
                         std::to_string(channels));
      }
      if (b.num_classes < 2) throw InputError(where + "output block needs at least two classes");
      continue;
    }
    if (b.kind == BlockKind::standard && !(b.has_bn && b.has_relu)) {
      throw InputError(where + "standard blocks must contain a conv-bn-relu combination");
    }
    if (b.in_channels != channels) {
      throw InputError(where + "expects " + std::to_string(b.in_channels) + " input channels, previous block has " +
                       std::to_string(channels));
    }
    if (b.out_channels == 0 || b.kernel == 0) throw InputError(where + "channel and kernel sizes must be positive");
    try {
      extent = conv_output_extent(extent, b.kernel, b.geometry());
    } catch (const DimensionError& e) {
      throw InputError(where + e.what());
    }
    channels = b.out_channels;
  }
}

std::size_t Topology::input_extent(std::size_t block) const {
  std::size_t extent = image_size;
  for (std::size_t i = 0; i < block; ++i) {
    if (blocks[i].is_conv()) extent = conv_output_extent(extent, blocks[i].kernel, blocks[i].geometry());
  }
  return extent;
}

std::size_t Topology::output_extent(std::size_t block) const {
  const std::size_t in = input_extent(block);
  const BlockSpec& b = blocks.at(block);
  return b.is_conv() ? conv_output_extent(in, b.kernel, b.geometry()) : 1;
}

Topology make_topology(std::size_t image_channels, std::size_t image_size, const std::vector<ConvStage>& stages,
                       std::size_t num_classes, std::size_t kernel) {
  Topology t;
  t.image_channels = image_channels;
  t.image_size = image_size;
  std::size_t channels = image_channels;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    BlockSpec b;
    b.kind = i == 0 ? BlockKind::input : BlockKind::standard;
    b.kernel = stages[i].kernel ? stages[i].kernel : kernel;
    b.in_channels = channels;
    b.out_channels = stages[i].out_channels;
    b.stride = stages[i].stride;
    b.padding = (b.kernel - 1) / 2;
    t.blocks.push_back(b);
    channels = b.out_channels;
  }
  BlockSpec out;
  out.kind = BlockKind::output;
  out.kernel = 0;
  out.padding = 0;
  out.has_bn = false;
  out.has_relu = false;
  out.in_features = channels;
  out.num_classes = num_classes;
  t.blocks.push_back(out);
  t.validate();
  return t;
}

Topology default_topology() {
  return make_topology(1, 16, {{8, 1}, {16, 2, 4}, {16, 1}, {32, 1}, {32, 1}}, 10);
}

}  // namespace fedfreeze
