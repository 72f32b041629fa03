#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "fedfreeze/cost_model.hpp"
#include "fedfreeze/data.hpp"
#include "fedfreeze/harness.hpp"
#include "fedfreeze/scenario.hpp"
#include "fedfreeze/text.hpp"

namespace fs = std::filesystem;
using namespace fedfreeze;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

int cmd_run(const fs::path& scenario_path, const fs::path& out, std::optional<std::uint64_t> seed, unsigned threads,
            bool quiet) {
  Scenario s = load_scenario(scenario_path);
  if (seed) s.seed = *seed;
  const auto result = run_scenario(s, out, threads, [&](const RoundMetrics& m) {
    if (!quiet) {
      std::fprintf(stderr, "round %zu/%zu  accuracy %.4f  mean upload %.0f B  accepted %zu\n", m.round, s.rounds,
                   m.accuracy, m.mean_upload_bytes, m.accepted_updates);
    }
  });
  std::printf("final accuracy %s after %zu rounds; outputs in %s\n", format_double(result.metrics.back().accuracy).c_str(),
              result.metrics.size(), out.string().c_str());
  return 0;
}

int cmd_profile(const fs::path& scenario_path, const std::string& device, const fs::path& out) {
  const Scenario s = load_scenario(scenario_path);
  const auto it = std::find_if(s.device_classes.begin(), s.device_classes.end(),
                               [&](const ScenarioDeviceClass& c) { return c.name == device; });
  if (it == s.device_classes.end()) {
    std::string names;
    for (const auto& c : s.device_classes) names += (names.empty() ? "" : ", ") + c.name;
    throw InputError("no device class '" + device + "' (have: " + names + ")");
  }
  const CostTable table = device_cost_table(s, *it);
  if (out.empty() || out == "-") {
    write_cost_table_csv(table, std::cout);
  } else {
    std::ofstream f(out);
    if (!f) throw InputError("cannot write " + out.string());
    write_cost_table_csv(table, f);
  }
  return 0;
}

int cmd_enumerate(std::size_t blocks) {
  if (blocks < 1) throw InputError("--blocks must be at least 1");
  std::printf("l,u\n");
  for (const Configuration& c : enumerate_contiguous(blocks)) std::printf("%zu,%zu\n", c.first(), c.last());
  return 0;
}

int cmd_gen_data(const fs::path& params_path, const fs::path& out) {
  const DataGenSpec g = parse_datagen_spec(read_text(params_path));
  SyntheticParams p;
  p.classes = g.classes;
  p.samples = g.train_samples + g.test_samples;
  p.image_size = g.image_size;
  p.channels = g.channels;
  p.class_separation = g.class_separation;
  p.noise_sigma = g.noise_sigma;
  Rng rng(g.seed);
  const Dataset all = generate_synthetic_dataset(p, rng);
  std::vector<std::size_t> train(g.train_samples), test(g.test_samples);
  std::iota(train.begin(), train.end(), 0);
  std::iota(test.begin(), test.end(), g.train_samples);
  const auto& v = all.images.values();
  std::pair<double, double> range{0.0, 0.0};
  if (!v.empty()) range = {*std::min_element(v.begin(), v.end()), *std::max_element(v.begin(), v.end())};
  fs::create_directories(out);
  write_idx(all.gather(train), out / "train-images.idx", out / "train-labels.idx", range);
  write_idx(all.gather(test), out / "test-images.idx", out / "test-labels.idx", range);
  std::printf("wrote %zu training and %zu test samples to %s\n", g.train_samples, g.test_samples,
              out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated training simulator with partial freezing and 8-bit frozen blocks"};
  app.require_subcommand(1);

  fs::path scenario, out;
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  bool quiet = false;
  auto* run = app.add_subcommand("run", "Run a scenario and write metrics.csv and contributions.csv");
  run->add_option("--scenario", scenario, "Scenario YAML file")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out, "Output directory")->required();
  run->add_option("--seed", seed, "Override the scenario seed");
  run->add_option("--threads", threads, "Worker threads per round (results do not depend on it)")
      ->check(CLI::Range(1u, 256u));
  run->add_flag("--quiet", quiet, "No per-round progress on stderr");

  std::string device;
  fs::path profile_out;
  auto* profile = app.add_subcommand("profile", "Dump the cost table of one device class as CSV");
  profile->add_option("--scenario", scenario, "Scenario YAML file")->required()->check(CLI::ExistingFile);
  profile->add_option("--device", device, "Device class name")->required();
  profile->add_option("--out", profile_out, "CSV path, '-' for stdout")->required();

  std::size_t blocks = 0;
  auto* enumerate = app.add_subcommand("enumerate-configs", "List every contiguous configuration");
  enumerate->add_option("--blocks", blocks, "Number of blocks")->required();

  fs::path params;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset as IDX files");
  gen->add_option("--params", params, "Generator YAML file")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(scenario, out, seed, threads, quiet);
    if (*profile) return cmd_profile(scenario, device, profile_out);
    if (*enumerate) return cmd_enumerate(blocks);
    if (*gen) return cmd_gen_data(params, out);
  } catch (const ScenarioError& e) {
    std::fprintf(stderr, "invalid scenario: %s\n", e.what());
    return 2;
  } catch (const InputError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
