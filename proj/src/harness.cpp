#include "fedfreeze/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "fedfreeze/data.hpp"
#include "fedfreeze/errors.hpp"

namespace fedfreeze {

namespace {

enum : std::uint64_t { kDataStream = 11, kPartitionStream = 12, kInitStream = 13 };

TrainingShape training_shape(const Scenario& s) {
  return {s.batch_size, s.batches_per_round, s.calibration_batch_size, s.quantize_frozen};
}

DeviceProfile profile_of(const ScenarioDeviceClass& c) {
  return {c.name, c.float_mac_rate, c.quant_cost_factor, c.overhead_per_batch};
}

// Largest-remainder apportionment; ties go to the earlier class.
std::vector<std::size_t> class_sizes(const std::vector<ScenarioDeviceClass>& classes, std::size_t devices) {
  std::vector<std::size_t> sizes(classes.size());
  std::vector<double> remainder(classes.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const double exact = classes[i].fraction * static_cast<double>(devices);
    sizes[i] = static_cast<std::size_t>(std::floor(exact));
    remainder[i] = exact - static_cast<double>(sizes[i]);
    assigned += sizes[i];
  }
  std::vector<std::size_t> order(classes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t k = 0; assigned < devices; ++k, ++assigned) ++sizes[order[k % order.size()]];
  return sizes;
}

double resolve(const Budget& b, double full) {
  switch (b.kind) {
    case Budget::Kind::absolute:
      return b.value;
    case Budget::Kind::fraction:
      return b.value * full;
    case Budget::Kind::unlimited:
      break;
  }
  return std::numeric_limits<double>::infinity();
}

void check_labels(const Dataset& d, std::size_t classes, const char* what) {
  for (int l : d.labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= classes) {
      throw InputError(std::string(what) + " label " + std::to_string(l) + " outside 0.." +
                       std::to_string(classes - 1));
    }
  }
}

}  // namespace

CostTable device_cost_table(const Scenario& scenario, const ScenarioDeviceClass& device_class) {
  return build_cost_table(profile_of(device_class), scenario.topology.build(), training_shape(scenario));
}

PreparedRun prepare_run(const Scenario& s) {
  s.validate();
  PreparedRun run;
  Federation& f = run.federation;
  f.topology = s.topology.build();
  f.rounds = s.rounds;
  f.per_round = s.per_round;
  f.training = {s.learning_rate, s.batch_size, s.batches_per_round, s.calibration_batch_size, s.quantize_frozen};
  f.seed = s.seed;

  const std::size_t n_train = s.devices * s.samples_per_device;
  Dataset train;
  if (s.synthetic) {
    SyntheticParams p;
    p.classes = s.topology.classes;
    p.samples = n_train + s.synthetic->test_samples;
    p.image_size = s.topology.image_size;
    p.channels = s.topology.image_channels;
    p.class_separation = s.synthetic->class_separation;
    p.noise_sigma = s.synthetic->noise_sigma;
    Rng rng(mix_seed({s.seed, kDataStream}));
    const Dataset all = generate_synthetic_dataset(p, rng);
    std::vector<std::size_t> idx(n_train);
    std::iota(idx.begin(), idx.end(), 0);
    train = all.gather(idx);
    idx.resize(s.synthetic->test_samples);
    std::iota(idx.begin(), idx.end(), n_train);
    f.test_set = all.gather(idx);
  } else {
    train = load_idx(s.idx->train_images, s.idx->train_labels);
    f.test_set = load_idx(s.idx->test_images, s.idx->test_labels);
    for (const Dataset* d : {&train, &f.test_set}) {
      if (d->images.dim(1) != s.topology.image_channels || d->image_size() != s.topology.image_size) {
        throw InputError("IDX images are " + shape_string(d->images.shape()) + ", topology expects " +
                         std::to_string(s.topology.image_channels) + "x" + std::to_string(s.topology.image_size) +
                         "x" + std::to_string(s.topology.image_size));
      }
    }
    if (f.test_set.empty()) throw InputError("IDX test set is empty");
  }
  check_labels(train, s.topology.classes, "training");
  check_labels(f.test_set, s.topology.classes, "test");

  Rng partition_rng(mix_seed({s.seed, kPartitionStream}));
  std::vector<Dataset> shards = partition_data(train, s.devices, s.samples_per_device, partition_rng);

  const double full_bytes = static_cast<double>(update_size(f.topology, Configuration::full(f.topology.size())));
  for (const ScenarioDeviceClass& c : s.device_classes) {
    DeviceClass dc;
    dc.name = c.name;
    dc.fraction = c.fraction;
    dc.profile = profile_of(c);
    const double full_time =
        estimate_time(dc.profile, f.topology, Configuration::full(f.topology.size()), training_shape(s)).total();
    dc.constraints.time_budget = resolve(c.time_budget, full_time);
    dc.constraints.upload_budget = resolve(c.upload_budget, full_bytes);
    if (c.upload_budget_range) {
      const double scale = c.upload_budget_range->fraction ? full_bytes : 1.0;
      dc.upload_budget_range = std::make_pair(c.upload_budget_range->low * scale, c.upload_budget_range->high * scale);
    }
    dc.straggler_sigma = c.straggler_sigma;
    f.classes.push_back(dc);
  }

  const std::vector<std::size_t> sizes = class_sizes(s.device_classes, s.devices);
  std::size_t next = 0;
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    for (std::size_t j = 0; j < sizes[k]; ++j, ++next) f.devices.push_back({k, std::move(shards[next])});
  }

  Rng init_rng(mix_seed({s.seed, kInitStream}));
  run.initial = init_model(f.topology, init_rng);
  return run;
}

FederationResult run_scenario(const Scenario& scenario, const std::filesystem::path& out_dir, unsigned threads,
                              const RoundCallback& on_round) {
  const PreparedRun run = prepare_run(scenario);
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream echo(out_dir / "scenario.resolved.yaml");
    if (!echo) throw InputError("cannot write to " + out_dir.string());
    echo << emit_scenario(scenario);
  }
  FederationResult result = run_federation(run.federation, run.initial, threads, on_round);

  std::ofstream metrics(out_dir / "metrics.csv");
  std::ofstream contributions(out_dir / "contributions.csv");
  if (!metrics || !contributions) throw InputError("cannot write to " + out_dir.string());
  write_metrics_csv(result.metrics, metrics);
  write_contributions_csv(result.contributions, contributions);
  if (!metrics || !contributions) throw InputError("write to " + out_dir.string() + " failed");
  return result;
}

}  // namespace fedfreeze
