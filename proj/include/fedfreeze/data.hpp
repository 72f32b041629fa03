#pragma once

// Datasets: synthetic generator, IDX files, sharding, evaluation.

#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include "fedfreeze/dataset.hpp"
#include "fedfreeze/model.hpp"
#include "fedfreeze/random.hpp"

namespace fedfreeze {

struct SyntheticParams {
  std::size_t classes = 10;
  std::size_t samples = 1000;
  std::size_t image_size = 16;
  std::size_t channels = 1;
  double class_separation = 2.0;  // RMS amplitude of each class template
  double noise_sigma = 0.5;

  /// Throws InputError for fewer than two classes or non-positive sizes.
  void validate() const;
};

/// One zero-mean template per class, (classes, channels, H, W): a sinusoidal
/// grating per channel. Class k gets its own cell of orientation (k mod m
/// of m equal angle sectors) and frequency band (k / m, centered at H/8 and
/// H/4 cycles), with random jitter inside the cell and random phase. Scaled
/// to RMS class_separation.
Tensor synthetic_templates(const SyntheticParams& params, Rng& rng);

/// Sample i has label i % classes and equals its class template plus
/// N(0, noise_sigma^2) per pixel.
Dataset sample_synthetic(const SyntheticParams& params, const Tensor& templates, Rng& rng);

/// Templates followed by samples from the same stream.
Dataset generate_synthetic_dataset(const SyntheticParams& params, Rng& rng);

/// Reads an IDX image file (magic 0x00000803 for N x H x W, 0x00000804 for
/// N x C x H x W, unsigned bytes) and an IDX label file (0x00000801). Pixels
/// are scaled to [0, 1]. Throws FormatError on bad magic, truncated data or
/// mismatched counts, and InputError when a file cannot be opened.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// Writes the dataset as IDX files, mapping `value_range` (default: the
/// data's own [min, max]) onto bytes 0..255. Labels must fit in a byte.
void write_idx(const Dataset& data, const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
               std::optional<std::pair<double, double>> value_range = std::nullopt);

/// Disjoint uniform random index sets of exactly shard_size each.
std::vector<std::vector<std::size_t>> partition_indices(std::size_t dataset_size, std::size_t n_devices,
                                                        std::size_t shard_size, Rng& rng);

std::vector<Dataset> partition_data(const Dataset& data, std::size_t n_devices, std::size_t shard_size, Rng& rng);

/// Top-1 accuracy with running statistics in every block; ties go to the
/// lowest class index.
double evaluate_accuracy(const ModelParams& params, const Topology& topology, const Dataset& test_set);

/// Index of the largest value in row `row` of a (rows, cols) tensor, lowest index on ties.
std::size_t argmax_row(const Tensor& logits, std::size_t row);

}  // namespace fedfreeze
