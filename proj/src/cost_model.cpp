#include "fedfreeze/cost_model.hpp"

#include <cmath>
#include <ostream>

#include "fedfreeze/errors.hpp"
#include "fedfreeze/text.hpp"

namespace fedfreeze {

std::vector<BlockMacs> block_mac_counts(const Topology& topology, std::size_t batch_size) {
  topology.validate();
  std::vector<BlockMacs> out;
  std::size_t extent = topology.image_size;
  const std::uint64_t b = batch_size;
  for (const BlockSpec& s : topology.blocks) {
    BlockMacs m;
    if (s.is_conv()) {
      const std::size_t ext_out = conv_output_extent(extent, s.kernel, s.geometry());
      const std::uint64_t plane = static_cast<std::uint64_t>(ext_out) * ext_out;
      const std::uint64_t conv = b * plane * s.kernel * s.kernel * s.in_channels * s.out_channels;
      const std::uint64_t elementwise = b * plane * s.out_channels;
      const std::uint64_t bn = s.has_bn ? elementwise : 0;
      const std::uint64_t relu = s.has_relu ? elementwise : 0;
      m.conv = conv;
      m.forward = conv + bn + relu;
      m.backward_input = conv + bn + relu;
      m.backward_param = conv + bn;
      m.fused_forward = conv + relu;
      m.fused_backward_input = conv + relu;
      extent = ext_out;
    } else {
      const std::uint64_t fc = b * s.in_features * s.num_classes;
      m.conv = fc;
      m.forward = fc;
      m.backward_input = fc;
      m.backward_param = fc;
      m.fused_forward = fc;
      m.fused_backward_input = fc;
    }
    out.push_back(m);
  }
  return out;
}

void DeviceProfile::validate() const {
  if (!(float_mac_rate > 0.0) || !std::isfinite(float_mac_rate)) {
    throw InputError("device '" + name + "': float_mac_rate must be positive");
  }
  if (!(quant_cost_factor > 0.0 && quant_cost_factor <= 1.0)) {
    throw InputError("device '" + name + "': quant_cost_factor must lie in (0, 1]");
  }
  if (!(overhead_per_batch >= 0.0) || !std::isfinite(overhead_per_batch)) {
    throw InputError("device '" + name + "': overhead_per_batch must be non-negative");
  }
}

TimeEstimate estimate_time(const DeviceProfile& profile, const Topology& topology, const Configuration& config,
                           const TrainingShape& shape) {
  profile.validate();
  const std::vector<BlockType> types = classify_blocks(config, topology.size());
  const std::vector<BlockMacs> macs = block_mac_counts(topology, shape.batch_size);
  const double q = profile.quant_cost_factor;

  double per_batch = 0.0;
  for (std::size_t i = 0; i < macs.size(); ++i) {
    const BlockMacs& m = macs[i];
    switch (types[i]) {
      case BlockType::frozen_before:
        per_batch += shape.quantize_frozen ? q * static_cast<double>(m.fused_forward) : static_cast<double>(m.forward);
        break;
      case BlockType::first_trained:
        per_batch += static_cast<double>(m.forward + m.backward_param);
        break;
      case BlockType::subsequent_trained:
        per_batch += static_cast<double>(m.forward + m.backward_param + m.backward_input);
        break;
      case BlockType::frozen_after:
        per_batch += shape.quantize_frozen ? q * static_cast<double>(m.fused_forward + m.fused_backward_input)
                                           : static_cast<double>(m.forward + m.backward_input);
        break;
    }
  }

  // calibration: full-precision forward of every block, input gradients down to block 1
  double calibration = 0.0;
  const std::vector<BlockMacs> cal = block_mac_counts(topology, shape.calibration_batch_size);
  for (std::size_t i = 0; i < cal.size(); ++i) {
    calibration += static_cast<double>(cal[i].forward);
    if (i > 0) calibration += static_cast<double>(cal[i].backward_input);
  }

  TimeEstimate t;
  const double batches = static_cast<double>(shape.batches_per_round);
  t.training_mac_seconds = batches * per_batch / profile.float_mac_rate;
  t.calibration_seconds = calibration / profile.float_mac_rate;
  t.overhead_seconds = batches * profile.overhead_per_batch;
  return t;
}

std::uint64_t block_parameter_count(const BlockSpec& spec) {
  if (!spec.is_conv()) return static_cast<std::uint64_t>(spec.in_features) * spec.num_classes + spec.num_classes;
  std::uint64_t n = static_cast<std::uint64_t>(spec.kernel) * spec.kernel * spec.in_channels * spec.out_channels +
                    spec.out_channels;
  if (spec.has_bn) n += 4 * static_cast<std::uint64_t>(spec.out_channels);
  return n;
}

std::uint64_t update_size(const Topology& topology, const Configuration& config) {
  config.validate(topology.size());
  std::uint64_t params = 0;
  for (std::size_t i = 0; i < topology.size(); ++i) {
    if (config.contains(i)) params += block_parameter_count(topology.blocks[i]);
  }
  return 4 * params;
}

const CostEntry& CostTable::at(const Configuration& config) const {
  for (const CostEntry& e : entries) {
    if (e.config == config) return e;
  }
  throw InputError("cost table has no entry for " + config.to_string());
}

CostTable build_cost_table(const DeviceProfile& profile, const Topology& topology, const TrainingShape& shape) {
  CostTable table;
  for (const Configuration& c : enumerate_contiguous(topology.size())) {
    table.entries.push_back({c, estimate_time(profile, topology, c, shape).total(), update_size(topology, c)});
  }
  return table;
}

void write_cost_table_csv(const CostTable& table, std::ostream& out) {
  out << "l,u,time_seconds,size_bytes\n";
  for (const CostEntry& e : table.entries) {
    out << e.config.first() << ',' << e.config.last() << ',' << format_double(e.time_seconds) << ',' << e.size_bytes
        << '\n';
  }
}

}  // namespace fedfreeze
