#pragma once

// Scenario files (YAML): parsing with line-numbered errors, validation and a
// canonical echo that parses back to the same scenario.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fedfreeze/errors.hpp"
#include "fedfreeze/topology.hpp"

namespace fedfreeze {

/// Validation failure; the message starts with "line N: " when the offending
/// node is known.
class ScenarioError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// A budget given in absolute units, as a fraction of the full-range value,
/// or not at all.
struct Budget {
  enum class Kind { unlimited, absolute, fraction };
  Kind kind = Kind::unlimited;
  double value = 0.0;

  bool operator==(const Budget&) const = default;
};

struct BudgetRange {
  bool fraction = false;
  double low = 0.0;
  double high = 0.0;

  bool operator==(const BudgetRange&) const = default;
};

struct ScenarioDeviceClass {
  std::string name;
  double fraction = 1.0;
  double float_mac_rate = 1e9;
  double quant_cost_factor = 1.0;
  double overhead_per_batch = 0.0;
  Budget time_budget;    // fraction: of this class's full-range time estimate
  Budget upload_budget;  // fraction: of the full-model update size
  std::optional<BudgetRange> upload_budget_range;
  double straggler_sigma = 0.0;

  bool operator==(const ScenarioDeviceClass&) const = default;
};

/// One unconstrained class named "default".
std::vector<ScenarioDeviceClass> default_device_classes();

struct SyntheticSource {
  double class_separation = 2.0;
  double noise_sigma = 1.6;
  std::size_t test_samples = 1000;

  bool operator==(const SyntheticSource&) const = default;
};

struct IdxSource {
  std::filesystem::path train_images, train_labels, test_images, test_labels;

  bool operator==(const IdxSource&) const = default;
};

struct TopologySpec {
  std::size_t image_channels = 1;
  std::size_t image_size = 16;
  std::size_t classes = 10;
  std::size_t kernel = 3;
  std::vector<ConvStage> stages{{8, 1}, {16, 2, 4}, {16, 1}, {32, 1}, {32, 1}};

  Topology build() const;
  bool operator==(const TopologySpec&) const = default;
};

struct Scenario {
  std::uint64_t seed = 0;
  std::size_t rounds = 60;
  std::size_t devices = 100;
  std::size_t per_round = 10;
  std::size_t samples_per_device = 200;
  double learning_rate = 0.005;
  std::size_t batch_size = 32;
  std::size_t batches_per_round = 7;
  std::size_t calibration_batch_size = 32;
  bool quantize_frozen = true;
  TopologySpec topology;
  std::optional<SyntheticSource> synthetic = SyntheticSource{};
  std::optional<IdxSource> idx;
  std::vector<ScenarioDeviceClass> device_classes = default_device_classes();

  /// Throws ScenarioError (without line numbers) on invariant violations.
  void validate() const;
  bool operator==(const Scenario&) const = default;
};

/// Every key is optional and defaults to the desk-scale preset; unknown keys
/// are errors. Relative IDX paths resolve against `base_dir`.
Scenario parse_scenario(const std::string& text, const std::filesystem::path& base_dir = {});
Scenario load_scenario(const std::filesystem::path& path);

/// Input of the data generator: synthetic parameters, train/test sizes, seed.
struct DataGenSpec {
  std::size_t classes = 10;
  std::size_t image_size = 16;
  std::size_t channels = 1;
  double class_separation = 2.0;
  double noise_sigma = 1.6;
  std::size_t train_samples = 20000;
  std::size_t test_samples = 1000;
  std::uint64_t seed = 0;
};

DataGenSpec parse_datagen_spec(const std::string& text);

/// Canonical YAML with every field spelled out and absolute IDX paths.
std::string emit_scenario(const Scenario& scenario);

}  // namespace fedfreeze
