#include "fedfreeze/server.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <exception>
#include <numeric>
#include <ostream>
#include <thread>

#include "fedfreeze/data.hpp"
#include "fedfreeze/errors.hpp"
#include "fedfreeze/text.hpp"

namespace fedfreeze {

namespace {

constexpr std::array<Tensor BlockParams::*, 8> kBlockTensors{
    &BlockParams::conv_weight,     &BlockParams::conv_bias,      &BlockParams::bn_gamma,
    &BlockParams::bn_beta,         &BlockParams::bn_running_mean, &BlockParams::bn_running_var,
    &BlockParams::fc_weight,       &BlockParams::fc_bias};

struct Part {
  const BlockParams* block;
  double weight;
};

// parts must already be in ascending client order
BlockParams weighted_block_average(const BlockParams& reference, const std::vector<Part>& parts,
                                   std::size_t block_index) {
  double total = 0.0;
  for (const Part& p : parts) total += p.weight;
  if (!(total > 0.0)) throw InputError("block " + std::to_string(block_index) + ": total data count is zero");

  BlockParams out = reference;
  std::vector<double> acc;
  for (Tensor BlockParams::*member : kBlockTensors) {
    Tensor& dst = out.*member;
    acc.assign(dst.size(), 0.0);
    for (const Part& p : parts) {
      const Tensor& src = p.block->*member;
      if (src.shape() != dst.shape()) {
        throw InputError("block " + std::to_string(block_index) + ": update shape " + shape_string(src.shape()) +
                         " does not match " + shape_string(dst.shape()));
      }
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p.weight * static_cast<double>(src[i]);
    }
    for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = static_cast<float>(acc[i] / total);
  }
  return out;
}

template <typename T>
std::vector<std::size_t> order_by_client(const std::vector<T>& items) {
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return items[a].client_id < items[b].client_id; });
  return order;
}

}  // namespace

std::vector<std::size_t> select_devices(std::size_t n_devices, std::size_t k, Rng& rng) {
  if (k > n_devices) {
    throw InputError("cannot select " + std::to_string(k) + " of " + std::to_string(n_devices) + " devices");
  }
  // partial Fisher-Yates
  std::vector<std::size_t> ids(n_devices);
  std::iota(ids.begin(), ids.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n_devices - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

ModelParams fedavg_aggregate(const std::vector<WeightedModel>& updates) {
  if (updates.empty()) throw InputError("fedavg of an empty update list");
  const std::vector<std::size_t> order = order_by_client(updates);
  const ModelParams& reference = updates[order.front()].params;
  ModelParams out;
  for (std::size_t b = 0; b < reference.size(); ++b) {
    std::vector<Part> parts;
    for (std::size_t i : order) {
      const ModelParams& p = updates[i].params;
      if (p.size() != reference.size()) throw InputError("updates have different block counts");
      parts.push_back({&p.blocks[b], static_cast<double>(updates[i].data_count)});
    }
    out.blocks.push_back(weighted_block_average(reference.blocks[b], parts, b));
  }
  return out;
}

ModelParams partial_aggregate(const ModelParams& prev, const std::vector<UpdateMessage>& updates) {
  const std::vector<std::size_t> order = order_by_client(updates);
  for (const UpdateMessage& u : updates) {
    for (const auto& [b, params] : u.blocks) {
      if (b >= prev.size()) throw InputError("update carries block " + std::to_string(b) + " beyond the model");
    }
  }
  ModelParams out = prev;
  for (std::size_t b = 0; b < prev.size(); ++b) {
    std::vector<Part> parts;
    for (std::size_t i : order) {
      const auto it = updates[i].blocks.find(b);
      if (it != updates[i].blocks.end()) parts.push_back({&it->second, static_cast<double>(updates[i].data_count)});
    }
    if (!parts.empty()) out.blocks[b] = weighted_block_average(prev.blocks[b], parts, b);
  }
  return out;
}

namespace {

enum : std::uint64_t { kSelectStream = 1, kDeviceStream = 2 };

struct DeviceOutcome {
  Contribution record;
  std::optional<UpdateMessage> update;
};

DeviceOutcome run_device(const Federation& fed, const std::vector<CostTable>& tables, const ModelParams& global,
                         std::size_t round, std::size_t client_id) {
  const Device& device = fed.devices[client_id];
  const DeviceClass& cls = fed.classes[device.class_index];
  Rng rng(mix_seed({fed.seed, kDeviceStream, round, client_id}));

  RoundConstraints constraints = cls.constraints;
  if (cls.upload_budget_range) {
    std::uniform_real_distribution<double> s(cls.upload_budget_range->first, cls.upload_budget_range->second);
    constraints.upload_budget = s(rng);
  }
  double multiplier = 1.0;
  if (cls.straggler_sigma > 0.0) {
    std::normal_distribution<double> z(0.0, cls.straggler_sigma);
    multiplier = std::exp(z(rng));
  }

  DeviceOutcome out;
  out.record.round = round;
  out.record.client_id = client_id;
  const std::optional<Configuration> config = select_configuration(tables[device.class_index], constraints, rng);
  if (!config) return out;

  UpdateMessage msg = local_train_round(global, fed.topology, *config, device.data, fed.training, rng, client_id);
  msg.elapsed_seconds = tables[device.class_index].at(*config).time_seconds * multiplier;
  out.record.config = config;
  out.record.upload_bytes = msg.upload_bytes;
  out.record.elapsed_seconds = msg.elapsed_seconds;
  out.record.accepted = msg.elapsed_seconds <= constraints.time_budget;
  if (out.record.accepted) out.update = std::move(msg);
  return out;
}

void validate_federation(const Federation& fed) {
  fed.topology.validate();
  fed.training.validate();
  if (fed.classes.empty()) throw InputError("federation has no device classes");
  if (fed.devices.empty()) throw InputError("federation has no devices");
  if (fed.rounds == 0) throw InputError("rounds must be positive");
  if (fed.per_round == 0 || fed.per_round > fed.devices.size()) {
    throw InputError("per-round participation must lie in 1.." + std::to_string(fed.devices.size()));
  }
  for (const DeviceClass& c : fed.classes) {
    c.profile.validate();
    c.constraints.validate();
    if (!(c.straggler_sigma >= 0.0)) throw InputError("device class '" + c.name + "': straggler_sigma must be >= 0");
    if (c.upload_budget_range &&
        !(c.upload_budget_range->first >= 0.0 && c.upload_budget_range->first <= c.upload_budget_range->second)) {
      throw InputError("device class '" + c.name + "': upload budget range must satisfy 0 <= lo <= hi");
    }
  }
  for (const Device& d : fed.devices) {
    if (d.class_index >= fed.classes.size()) throw InputError("device refers to an unknown class");
  }
}

}  // namespace

FederationResult run_federation(const Federation& fed, const ModelParams& initial, unsigned threads,
                                const RoundCallback& on_round) {
  validate_federation(fed);
  check_params(initial, fed.topology);
  if (threads == 0) threads = 1;

  const TrainingShape shape{fed.training.batch_size, fed.training.batches_per_round,
                            fed.training.calibration_batch_size, fed.training.quantize_frozen};
  std::vector<CostTable> tables;
  for (const DeviceClass& c : fed.classes) tables.push_back(build_cost_table(c.profile, fed.topology, shape));

  FederationResult result;
  ModelParams global = initial;
  for (std::size_t round = 1; round <= fed.rounds; ++round) {
    Rng select_rng(mix_seed({fed.seed, kSelectStream, round}));
    const std::vector<std::size_t> chosen = select_devices(fed.devices.size(), fed.per_round, select_rng);

    std::vector<DeviceOutcome> outcomes(chosen.size());
    std::vector<std::exception_ptr> errors(chosen.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next++; i < chosen.size(); i = next++) {
        try {
          outcomes[i] = run_device(fed, tables, global, round, chosen[i]);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    };
    const unsigned n_workers = static_cast<unsigned>(std::min<std::size_t>(threads, chosen.size()));
    if (n_workers <= 1) {
      worker();
    } else {
      std::vector<std::jthread> pool;
      for (unsigned t = 0; t < n_workers; ++t) pool.emplace_back(worker);
    }
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }

    std::vector<UpdateMessage> accepted;
    RoundMetrics m;
    m.round = round;
    double bytes = 0.0;
    for (DeviceOutcome& o : outcomes) {
      bytes += static_cast<double>(o.record.upload_bytes);
      result.contributions.push_back(o.record);
      if (o.update) accepted.push_back(std::move(*o.update));
    }
    m.mean_upload_bytes = bytes / static_cast<double>(chosen.size());
    m.accepted_updates = accepted.size();
    global = partial_aggregate(global, accepted);
    m.accuracy = evaluate_accuracy(global, fed.topology, fed.test_set);
    result.metrics.push_back(m);
    if (on_round) on_round(m);
  }
  result.final_model = std::move(global);
  return result;
}

void write_metrics_csv(const std::vector<RoundMetrics>& metrics, std::ostream& out) {
  out << "round,accuracy,mean_upload_bytes,accepted_updates\n";
  for (const RoundMetrics& m : metrics) {
    out << m.round << ',' << format_double(m.accuracy) << ',' << format_double(m.mean_upload_bytes) << ','
        << m.accepted_updates << '\n';
  }
}

void write_contributions_csv(const std::vector<Contribution>& contributions, std::ostream& out) {
  out << "round,client_id,l,u,upload_bytes,elapsed_s,accepted\n";
  for (const Contribution& c : contributions) {
    out << c.round << ',' << c.client_id << ',';
    if (c.config) out << c.config->first() << ',' << c.config->last();
    else out << ',';
    out << ',' << c.upload_bytes << ',' << format_double(c.elapsed_seconds) << ',' << (c.accepted ? 1 : 0) << '\n';
  }
}

}  // namespace fedfreeze
