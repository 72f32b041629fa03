#pragma once

// Round loop: device sampling, local rounds, straggler discard and per-block
// weighted aggregation.

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fedfreeze/client.hpp"
#include "fedfreeze/cost_model.hpp"
#include "fedfreeze/dataset.hpp"
#include "fedfreeze/model.hpp"
#include "fedfreeze/random.hpp"

namespace fedfreeze {

/// Uniform k-subset of 0..n_devices-1 without replacement, ascending.
/// Throws InputError when k > n_devices.
std::vector<std::size_t> select_devices(std::size_t n_devices, std::size_t k, Rng& rng);

struct WeightedModel {
  std::size_t client_id = 0;
  ModelParams params;
  std::size_t data_count = 0;
};

/// sum(|D_c| w_c) / sum(|D_c|) per element, accumulated in double in
/// ascending client-id order. Throws InputError on an empty list, a zero total
/// count or mismatched shapes.
ModelParams fedavg_aggregate(const std::vector<WeightedModel>& updates);

/// Each block becomes the data-weighted average over the updates that carry
/// it; blocks nobody trained keep their previous value.
ModelParams partial_aggregate(const ModelParams& prev, const std::vector<UpdateMessage>& updates);

struct DeviceClass {
  std::string name;
  double fraction = 1.0;
  DeviceProfile profile;
  RoundConstraints constraints;
  /// When set, the upload budget is redrawn uniformly from [first, second]
  /// for every device and round.
  std::optional<std::pair<double, double>> upload_budget_range;
  /// Log-normal sigma of a multiplier on the simulated elapsed time; 0 is off.
  double straggler_sigma = 0.0;
};

struct Device {
  std::size_t class_index = 0;
  Dataset data;
};

struct Federation {
  Topology topology;
  std::vector<DeviceClass> classes;
  std::vector<Device> devices;  // client id is the index
  Dataset test_set;
  std::size_t rounds = 60;
  std::size_t per_round = 10;
  LocalTraining training;
  std::uint64_t seed = 0;
};

struct RoundMetrics {
  std::size_t round = 0;
  double accuracy = 0.0;
  double mean_upload_bytes = 0.0;  // over selected devices, sit-outs count zero
  std::size_t accepted_updates = 0;
};

struct Contribution {
  std::size_t round = 0;
  std::size_t client_id = 0;
  std::optional<Configuration> config;  // nullopt: sat the round out
  std::uint64_t upload_bytes = 0;
  double elapsed_seconds = 0.0;
  bool accepted = false;
};

struct FederationResult {
  std::vector<RoundMetrics> metrics;
  std::vector<Contribution> contributions;
  ModelParams final_model;
};

using RoundCallback = std::function<void(const RoundMetrics&)>;

/// Runs all rounds starting from `initial`. Devices of a round train on up to
/// `threads` worker threads; results do not depend on the thread count.
FederationResult run_federation(const Federation& federation, const ModelParams& initial, unsigned threads = 1,
                                const RoundCallback& on_round = {});

/// round,accuracy,mean_upload_bytes,accepted_updates
void write_metrics_csv(const std::vector<RoundMetrics>& metrics, std::ostream& out);
/// round,client_id,l,u,upload_bytes,elapsed_s,accepted (l and u empty for sit-outs)
void write_contributions_csv(const std::vector<Contribution>& contributions, std::ostream& out);

}  // namespace fedfreeze
