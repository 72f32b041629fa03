#include "fedfreeze/configuration.hpp"

#include "fedfreeze/errors.hpp"

namespace fedfreeze {

Configuration::Configuration(std::size_t first, std::size_t last) : range_(Range{first, last}) {
  if (first > last) {
    throw InputError("configuration range [" + std::to_string(first) + ", " + std::to_string(last) +
                     "] is reversed");
  }
}

std::size_t Configuration::first() const {
  if (!range_) throw StateError("empty configuration has no first block");
  return range_->first;
}

std::size_t Configuration::last() const {
  if (!range_) throw StateError("empty configuration has no last block");
  return range_->last;
}

bool Configuration::is_subset_of(const Configuration& other) const {
  if (is_empty()) return true;
  if (other.is_empty()) return false;
  return first() >= other.first() && last() <= other.last();
}

void Configuration::validate(std::size_t n_blocks) const {
  if (range_ && range_->last >= n_blocks) {
    throw InputError("configuration " + to_string() + " exceeds a network of " + std::to_string(n_blocks) +
                     " blocks");
  }
}

std::string Configuration::to_string() const {
  if (!range_) return "[]";
  return "[" + std::to_string(range_->first) + "," + std::to_string(range_->last) + "]";
}

char block_type_letter(BlockType type) {
  switch (type) {
    case BlockType::first_trained: return 'A';
    case BlockType::subsequent_trained: return 'B';
    case BlockType::frozen_before: return 'C';
    case BlockType::frozen_after: return 'D';
  }
  return '?';
}

std::vector<BlockType> classify_blocks(const Configuration& config, std::size_t n_blocks) {
  config.validate(n_blocks);
  std::vector<BlockType> types(n_blocks, BlockType::frozen_before);
  if (config.is_empty()) return types;
  const std::size_t first = config.first();
  for (std::size_t i = first; i < n_blocks; ++i) {
    if (i == first) {
      types[i] = BlockType::first_trained;
    } else {
      types[i] = config.contains(i) ? BlockType::subsequent_trained : BlockType::frozen_after;
    }
  }
  return types;
}

std::vector<Configuration> enumerate_contiguous(std::size_t n_blocks) {
  if (n_blocks < 1) throw InputError("enumerate_contiguous needs at least one block");
  std::vector<Configuration> out;
  out.reserve(n_blocks * (n_blocks + 1) / 2);
  for (std::size_t first = 0; first < n_blocks; ++first) {
    for (std::size_t last = first; last < n_blocks; ++last) out.emplace_back(first, last);
  }
  return out;
}

}  // namespace fedfreeze
