#pragma once

// Analytic MAC-based training time and update size per configuration.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fedfreeze/configuration.hpp"
#include "fedfreeze/topology.hpp"

namespace fedfreeze {

/// Multiply-accumulates of one block for one batch. BN and ReLU count one MAC
/// per element, pooling counts none.
struct BlockMacs {
  std::uint64_t conv = 0;  // the convolution (or fc layer) alone
  std::uint64_t forward = 0;
  std::uint64_t backward_input = 0;
  std::uint64_t backward_param = 0;
  std::uint64_t fused_forward = 0;         // conv with folded BN, ReLU as clamp
  std::uint64_t fused_backward_input = 0;  // transposed fused conv plus the ReLU mask
};

std::vector<BlockMacs> block_mac_counts(const Topology& topology, std::size_t batch_size);

struct DeviceProfile {
  std::string name;
  double float_mac_rate = 1e9;     // full-precision MACs per second
  double quant_cost_factor = 1.0;  // cost of an 8-bit MAC relative to a float MAC
  double overhead_per_batch = 0.0; // seconds

  /// Throws InputError unless rate > 0, 0 < factor <= 1, overhead >= 0.
  void validate() const;
};

struct TrainingShape {
  std::size_t batch_size = 32;
  std::size_t batches_per_round = 1;
  std::size_t calibration_batch_size = 32;
  bool quantize_frozen = true;
};

struct TimeEstimate {
  double training_mac_seconds = 0.0;
  double calibration_seconds = 0.0;
  double overhead_seconds = 0.0;

  double total() const { return training_mac_seconds + calibration_seconds + overhead_seconds; }
};

/// Per batch: frozen-before blocks run forward only, the first trained block
/// forward and parameter gradients, later trained blocks additionally input
/// gradients, frozen-after blocks forward and input gradients. Frozen work is
/// fused and scaled by quant_cost_factor when quantize_frozen is set, and
/// unfused at full precision otherwise. Calibration (one full-precision
/// forward and backward over the calibration batch) is charged once per round
/// regardless of the configuration.
TimeEstimate estimate_time(const DeviceProfile& profile, const Topology& topology, const Configuration& config,
                           const TrainingShape& shape);

/// Parameters of one block, buffers included.
std::uint64_t block_parameter_count(const BlockSpec& spec);

/// 4 bytes per trained parameter (running statistics included).
std::uint64_t update_size(const Topology& topology, const Configuration& config);

struct CostEntry {
  Configuration config;
  double time_seconds = 0.0;
  std::uint64_t size_bytes = 0;
};

struct CostTable {
  std::vector<CostEntry> entries;  // enumerate_contiguous order

  const CostEntry& at(const Configuration& config) const;
};

CostTable build_cost_table(const DeviceProfile& profile, const Topology& topology, const TrainingShape& shape);

/// Columns l,u,time_seconds,size_bytes.
void write_cost_table_csv(const CostTable& table, std::ostream& out);

}  // namespace fedfreeze
