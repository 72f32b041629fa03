#pragma once

// Per-round calibration and partitioning of a model into trained blocks and
// frozen (fused, optionally 8-bit) blocks.

#include <optional>
#include <vector>

#include "fedfreeze/configuration.hpp"
#include "fedfreeze/model.hpp"

namespace fedfreeze {

struct CalibrationStats {
  Configuration config;
  std::size_t batch_size = 0;
  /// Batch statistics of frozen blocks with batch norm.
  std::vector<std::optional<BnStats<float>>> bn;
  /// activation[i]: affine parameters of block i's input; activation[N] feeds
  /// the output block. A conv block's output uses activation[i + 1].
  std::vector<QuantParams> activation;
  /// Frozen blocks after the first trained block: calibrated gradient scale
  /// per sample at the block's pre-activation output.
  std::vector<std::optional<float>> gradient_scale_per_sample;

  bool operator==(const CalibrationStats& other) const;
};

/// Full-precision forward pass over the calibration batch (batch statistics)
/// and, when the configuration has frozen blocks after the first trained one,
/// one backward pass for the gradient scales.
CalibrationStats calibrate_round(const ModelParams& params, const Topology& topology, const Configuration& config,
                                 const Tensor& images, std::span<const int> labels);

struct FrozenBlock {
  BnStats<float> stats;  // fixed statistics for the round
  std::optional<QuantizedConvBlock> conv;
  std::optional<QuantizedOutputBlock> output;
};

/// Trained blocks live in `params` at full precision; every other block keeps
/// its original parameters there untouched and executes from `frozen`.
/// Plans hold pointers into this object, so it must outlive (and not move
/// during) any plan built from it.
struct PartitionedModel {
  Configuration config;
  std::vector<BlockType> types;
  ModelParams params;
  std::vector<std::optional<FrozenBlock>> frozen;
  bool quantized = true;

  ExecutionPlan<float> plan(BnMode trained_bn = BnMode::batch_stats) const;
  std::size_t frozen_count() const;
};

/// Throws StateError when `stats` was calibrated for another configuration or
/// network size.
PartitionedModel apply_configuration(const ModelParams& params, const Topology& topology, const Configuration& config,
                                     const CalibrationStats& stats, bool quantize = true);

}  // namespace fedfreeze
