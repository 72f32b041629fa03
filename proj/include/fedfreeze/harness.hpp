#pragma once

// Scenario -> federation wiring and output files.

#include <filesystem>

#include "fedfreeze/scenario.hpp"
#include "fedfreeze/server.hpp"

namespace fedfreeze {

struct PreparedRun {
  Federation federation;
  ModelParams initial;
};

/// Loads or generates the data, shards it, assigns device classes (largest
/// remainder on the fractions, contiguous client ids per class), resolves
/// fractional budgets against each class's cost table and initializes the
/// model. All randomness derives from scenario.seed.
PreparedRun prepare_run(const Scenario& scenario);

/// Cost table of one device class under the scenario's training shape.
CostTable device_cost_table(const Scenario& scenario, const ScenarioDeviceClass& device_class);

/// Runs the scenario and writes metrics.csv, contributions.csv and
/// scenario.resolved.yaml into out_dir (created if needed).
FederationResult run_scenario(const Scenario& scenario, const std::filesystem::path& out_dir, unsigned threads = 1,
                              const RoundCallback& on_round = {});

}  // namespace fedfreeze
