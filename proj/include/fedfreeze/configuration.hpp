#pragma once

#include <compare>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace fedfreeze {

/// A contiguous, inclusive range [first, last] of trained block indices, or
/// no trained block at all.
class Configuration {
 public:
  Configuration() = default;
  Configuration(std::size_t first, std::size_t last);

  static Configuration empty() { return Configuration(); }
  static Configuration full(std::size_t n_blocks) { return Configuration(0, n_blocks - 1); }

  bool is_empty() const { return !range_.has_value(); }
  std::size_t first() const;
  std::size_t last() const;
  std::size_t length() const { return is_empty() ? 0 : last() - first() + 1; }
  bool contains(std::size_t block) const {
    return range_ && block >= range_->first && block <= range_->last;
  }
  /// Trained-set inclusion: every block trained here is trained by `other`.
  bool is_subset_of(const Configuration& other) const;
  bool is_strict_subset_of(const Configuration& other) const { return is_subset_of(other) && *this != other; }

  /// Throws InputError unless every index lies in [0, n_blocks).
  void validate(std::size_t n_blocks) const;

  std::string to_string() const;

  bool operator==(const Configuration&) const = default;
  auto operator<=>(const Configuration& other) const {
    if (is_empty() || other.is_empty()) return other.is_empty() <=> is_empty();
    if (auto c = first() <=> other.first(); c != 0) return c;
    return last() <=> other.last();
  }

 private:
  struct Range {
    std::size_t first;
    std::size_t last;
    bool operator==(const Range&) const = default;
  };
  std::optional<Range> range_;
};

enum class BlockType {
  first_trained,       // (a) forward + parameter gradients
  subsequent_trained,  // (b) forward + parameter gradients + input gradients
  frozen_before,       // (c) forward only
  frozen_after,        // (d) forward + input gradients
};

char block_type_letter(BlockType type);

inline bool is_trained(BlockType t) {
  return t == BlockType::first_trained || t == BlockType::subsequent_trained;
}

std::vector<BlockType> classify_blocks(const Configuration& config, std::size_t n_blocks);

/// All non-empty contiguous ranges over n_blocks, ordered by first then last.
std::vector<Configuration> enumerate_contiguous(std::size_t n_blocks);

}  // namespace fedfreeze
