#pragma once

// Device side of a round: configuration choice and local training.

#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <vector>

#include "fedfreeze/configuration.hpp"
#include "fedfreeze/cost_model.hpp"
#include "fedfreeze/dataset.hpp"
#include "fedfreeze/model.hpp"
#include "fedfreeze/random.hpp"

namespace fedfreeze {

struct RoundConstraints {
  double time_budget = std::numeric_limits<double>::infinity();    // seconds
  double upload_budget = std::numeric_limits<double>::infinity();  // bytes

  /// Throws InputError on negative or NaN budgets.
  void validate() const;
};

/// Entries whose estimated time and update size fit the budgets, table order.
std::vector<Configuration> feasible_configurations(const CostTable& table, const RoundConstraints& constraints);

/// Members of `feasible` that are not a strict subset of another member.
std::vector<Configuration> maximal_configurations(const std::vector<Configuration>& feasible);

/// Uniform draw among the maximal feasible configurations; nullopt when
/// nothing fits (the device sits the round out).
std::optional<Configuration> select_configuration(const CostTable& table, const RoundConstraints& constraints,
                                                  Rng& rng);

struct LocalTraining {
  double learning_rate = 0.005;
  std::size_t batch_size = 32;
  std::size_t batches_per_round = 1;
  std::size_t calibration_batch_size = 32;
  bool quantize_frozen = true;

  void validate() const;
};

struct UpdateMessage {
  std::size_t client_id = 0;
  Configuration config;
  std::map<std::size_t, BlockParams> blocks;  // trained blocks, running statistics included
  std::size_t data_count = 0;
  std::uint64_t upload_bytes = 0;
  double elapsed_seconds = 0.0;  // simulated, filled in by the server
  std::vector<double> step_losses;
};

/// One round on a device: calibrate on a random batch, freeze/fuse/quantize
/// per `config`, then SGD over shuffled mini-batches of the local data (a
/// fresh shuffle whenever an epoch is used up, last batch of an epoch may be
/// short). Throws InputError on empty data or an empty configuration.
UpdateMessage local_train_round(const ModelParams& global, const Topology& topology, const Configuration& config,
                                const Dataset& data, const LocalTraining& training, Rng& rng,
                                std::size_t client_id = 0);

}  // namespace fedfreeze
