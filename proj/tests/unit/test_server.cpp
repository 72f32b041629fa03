#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "fedfreeze/data.hpp"
#include "fedfreeze/errors.hpp"
#include "fedfreeze/server.hpp"
#include "model_fixture.hpp"

using namespace fedfreeze;

namespace {

// Model of scalar "blocks" for hand-checked aggregation.
ModelParams scalars(std::initializer_list<float> values) {
  ModelParams m;
  for (float v : values) {
    BlockParams b;
    b.conv_weight = Tensor({1}, std::vector<float>{v});
    m.blocks.push_back(b);
  }
  return m;
}

UpdateMessage message(std::size_t id, std::size_t count, std::initializer_list<std::pair<std::size_t, float>> blocks) {
  UpdateMessage u;
  u.client_id = id;
  u.data_count = count;
  for (const auto& [i, v] : blocks) u.blocks[i] = scalars({v}).blocks[0];
  return u;
}

TEST(SelectDevices, FullAndPartialSelection) {
  Rng rng(1);
  std::vector<std::size_t> all(100);
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(select_devices(100, 100, rng), all);
  const auto ten = select_devices(100, 10, rng);
  EXPECT_EQ(ten.size(), 10u);
  EXPECT_EQ(std::set<std::size_t>(ten.begin(), ten.end()).size(), 10u);
  EXPECT_TRUE(std::is_sorted(ten.begin(), ten.end()));
  EXPECT_TRUE(select_devices(5, 0, rng).empty());
}

TEST(SelectDevices, DeterministicAndRoughlyUniform) {
  Rng a(2), b(2);
  EXPECT_EQ(select_devices(50, 7, a), select_devices(50, 7, b));
  Rng rng(3);
  std::vector<int> hits(20, 0);
  for (int t = 0; t < 20000; ++t)
    for (std::size_t i : select_devices(20, 5, rng)) ++hits[i];
  for (int h : hits) EXPECT_NEAR(h / 20000.0, 0.25, 0.02);
}

TEST(SelectDevices, RejectsTooMany) {
  Rng rng(4);
  EXPECT_THROW(select_devices(3, 4, rng), InputError);
}

TEST(FedAvg, HandExamples) {
  EXPECT_EQ(fedavg_aggregate({{0, scalars({1.5f}), 7}}), scalars({1.5f}));
  EXPECT_EQ(fedavg_aggregate({{0, scalars({1}), 5}, {1, scalars({2}), 5}, {2, scalars({3}), 5}}), scalars({2}));
  EXPECT_EQ(fedavg_aggregate({{0, scalars({0}), 1}, {1, scalars({4}), 3}}), scalars({3}));
}

TEST(FedAvg, Errors) {
  EXPECT_THROW(fedavg_aggregate({}), InputError);
  EXPECT_THROW(fedavg_aggregate({{0, scalars({1}), 0}}), InputError);
  ModelParams wide = scalars({1});
  wide.blocks[0].conv_weight = Tensor({2});
  EXPECT_THROW(fedavg_aggregate({{0, scalars({1}), 1}, {1, wide, 1}}), InputError);
}

TEST(FedAvg, ArrivalOrderDoesNotMatter) {
  const Topology topo = fixture::small_topology();
  Rng rng(5);
  std::vector<WeightedModel> ups;
  for (std::size_t c = 0; c < 5; ++c) ups.push_back({c * 3, fixture::random_params<float>(topo, rng), 10 + 7 * c});
  const ModelParams ref = fedavg_aggregate(ups);
  std::reverse(ups.begin(), ups.end());
  EXPECT_EQ(fedavg_aggregate(ups), ref);
  std::swap(ups[1], ups[3]);
  EXPECT_EQ(fedavg_aggregate(ups), ref);
}

TEST(PartialAggregate, MixedRangeHandExample) {
  const ModelParams prev = scalars({9.0f, 0.0f, 0.0f});
  const auto out = partial_aggregate(prev, {message(1, 500, {{1, 2.0f}}), message(2, 500, {{1, 4.0f}, {2, 6.0f}})});
  EXPECT_EQ(out, scalars({9.0f, 3.0f, 6.0f}));
}

TEST(PartialAggregate, NoUpdatesKeepsPrevious) {
  const ModelParams prev = scalars({1.0f, 2.0f});
  EXPECT_EQ(partial_aggregate(prev, {}), prev);
}

TEST(PartialAggregate, FullRangeEqualsFedAvg) {
  const Topology topo = fixture::small_topology();
  Rng rng(6);
  const ModelParams prev = fixture::random_params<float>(topo, rng);
  std::vector<UpdateMessage> ups;
  std::vector<WeightedModel> weighted;
  for (std::size_t c : {4, 1, 9}) {
    const ModelParams m = fixture::random_params<float>(topo, rng);
    UpdateMessage u;
    u.client_id = c;
    u.data_count = 100 + 37 * c;
    for (std::size_t i = 0; i < m.size(); ++i) u.blocks[i] = m.blocks[i];
    ups.push_back(u);
    weighted.push_back({c, m, u.data_count});
  }
  EXPECT_EQ(partial_aggregate(prev, ups), fedavg_aggregate(weighted));
}

TEST(PartialAggregate, UntouchedBlocksAndBounds) {
  const Topology topo = fixture::small_topology();
  Rng rng(7);
  const ModelParams prev = fixture::random_params<float>(topo, rng);
  std::vector<UpdateMessage> ups;
  std::vector<ModelParams> models;
  const std::vector<Configuration> configs{Configuration(1, 2), Configuration(2, 2), Configuration(1, 1)};
  for (std::size_t c = 0; c < configs.size(); ++c) {
    models.push_back(fixture::random_params<float>(topo, rng));
    UpdateMessage u;
    u.client_id = 10 - c;
    u.data_count = 50 + c;
    for (std::size_t i = configs[c].first(); i <= configs[c].last(); ++i) u.blocks[i] = models.back().blocks[i];
    ups.push_back(u);
  }
  const ModelParams out = partial_aggregate(prev, ups);
  for (std::size_t i : {0, 3, 4}) EXPECT_EQ(out.blocks[i], prev.blocks[i]) << i;
  for (std::size_t i : {1, 2}) {
    auto check = [&](Tensor BlockParams::*member) {
      const Tensor& got = out.blocks[i].*member;
      for (std::size_t e = 0; e < got.size(); ++e) {
        float lo = INFINITY, hi = -INFINITY;
        for (std::size_t c = 0; c < configs.size(); ++c) {
          if (!configs[c].contains(i)) continue;
          lo = std::min(lo, (models[c].blocks[i].*member)[e]);
          hi = std::max(hi, (models[c].blocks[i].*member)[e]);
        }
        ASSERT_GE(got[e], lo);
        ASSERT_LE(got[e], hi);
      }
    };
    check(&BlockParams::conv_weight);
    check(&BlockParams::bn_gamma);
    check(&BlockParams::bn_running_var);
  }
  std::reverse(ups.begin(), ups.end());
  EXPECT_EQ(partial_aggregate(prev, ups), out);
}

TEST(PartialAggregate, SingleFullRangeDeviceIsCopiedExactly) {
  const Topology topo = fixture::small_topology();
  Rng rng(8);
  const ModelParams prev = fixture::random_params<float>(topo, rng);
  const ModelParams trained = fixture::random_params<float>(topo, rng);
  UpdateMessage u;
  u.data_count = 333;
  for (std::size_t i = 0; i < trained.size(); ++i) u.blocks[i] = trained.blocks[i];
  EXPECT_EQ(partial_aggregate(prev, {u}), trained);
}

TEST(PartialAggregate, ShapeMismatchRejected) {
  const ModelParams prev = scalars({1.0f, 2.0f});
  UpdateMessage u = message(0, 1, {{1, 2.0f}});
  u.blocks[1].conv_weight = Tensor({3});
  EXPECT_THROW(partial_aggregate(prev, {u}), InputError);
  EXPECT_THROW(partial_aggregate(prev, {message(0, 1, {{5, 1.0f}})}), InputError);
}

Federation tiny_federation(std::size_t rounds = 3) {
  Federation f;
  f.topology = fixture::small_topology();
  Rng rng(9);
  SyntheticParams p;
  p.classes = 3;
  p.channels = 2;
  p.image_size = 5;
  p.samples = 160;
  const Dataset all = generate_synthetic_dataset(p, rng);
  std::vector<std::size_t> test_idx(40);
  std::iota(test_idx.begin(), test_idx.end(), 120);
  f.test_set = all.gather(test_idx);
  std::vector<std::size_t> train_idx(120);
  std::iota(train_idx.begin(), train_idx.end(), 0);
  const auto shards = partition_data(all.gather(train_idx), 6, 20, rng);
  DeviceClass fast{"fast", 0.5, DeviceProfile{"fast", 1e6, 0.5}, {}};
  DeviceClass slow{"slow", 0.5, DeviceProfile{"slow", 2e5, 0.5}, {}};
  const TrainingShape shape{8, 2, 8, true};
  const Configuration full = Configuration::full(f.topology.size());
  slow.constraints.time_budget = 0.6 * estimate_time(slow.profile, f.topology, full, shape).total();
  f.classes = {fast, slow};
  for (std::size_t i = 0; i < 6; ++i) f.devices.push_back({i % 2, shards[i]});
  f.rounds = rounds;
  f.per_round = 4;
  f.training.batch_size = 8;
  f.training.batches_per_round = 2;
  f.training.calibration_batch_size = 8;
  f.training.learning_rate = 0.05;
  f.seed = 42;
  return f;
}

std::string csv(const FederationResult& r) {
  std::ostringstream s;
  write_metrics_csv(r.metrics, s);
  write_contributions_csv(r.contributions, s);
  return s.str();
}

TEST(Federation, OneRecordPerRound) {
  const Federation f = tiny_federation(3);
  Rng rng(1);
  const ModelParams w0 = init_model(f.topology, rng);
  std::size_t calls = 0;
  const FederationResult r = run_federation(f, w0, 1, [&](const RoundMetrics&) { ++calls; });
  ASSERT_EQ(r.metrics.size(), 3u);
  EXPECT_EQ(calls, 3u);
  EXPECT_EQ(r.contributions.size(), 12u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(r.metrics[i].round, i + 1);
    EXPECT_GE(r.metrics[i].accuracy, 0.0);
    EXPECT_LE(r.metrics[i].accuracy, 1.0);
    std::size_t accepted = 0;
    double bytes = 0.0;
    for (const Contribution& c : r.contributions) {
      if (c.round != i + 1) continue;
      accepted += c.accepted;
      bytes += static_cast<double>(c.upload_bytes);
      if (c.config) {
        EXPECT_EQ(c.upload_bytes, update_size(f.topology, *c.config));
        EXPECT_EQ(c.config->length() == f.topology.size(), f.devices[c.client_id].class_index == 0);
      }
    }
    EXPECT_EQ(r.metrics[i].accepted_updates, accepted);
    EXPECT_DOUBLE_EQ(r.metrics[i].mean_upload_bytes, bytes / 4.0);
  }
}

TEST(Federation, IdenticalAcrossThreadCounts) {
  const Federation f = tiny_federation(3);
  Rng rng(2);
  const ModelParams w0 = init_model(f.topology, rng);
  const FederationResult a = run_federation(f, w0, 1);
  const FederationResult b = run_federation(f, w0, 3);
  EXPECT_EQ(csv(a), csv(b));
  EXPECT_EQ(a.final_model, b.final_model);
}

TEST(Federation, StragglersAreDiscarded) {
  Federation f = tiny_federation(4);
  // every device gets the full-range time as deadline, then noise pushes some past it
  const TrainingShape shape{8, 2, 8, true};
  for (DeviceClass& c : f.classes) {
    c.constraints.time_budget =
        estimate_time(c.profile, f.topology, Configuration::full(f.topology.size()), shape).total();
    c.straggler_sigma = 0.5;
  }
  Rng rng(3);
  const ModelParams w0 = init_model(f.topology, rng);
  const FederationResult r = run_federation(f, w0, 1);
  std::size_t late = 0, on_time = 0;
  for (const Contribution& c : r.contributions) {
    ASSERT_TRUE(c.config);
    const double budget = f.classes[f.devices[c.client_id].class_index].constraints.time_budget;
    EXPECT_EQ(c.accepted, c.elapsed_seconds <= budget);
    (c.accepted ? on_time : late) += 1;
  }
  EXPECT_GT(late, 0u);
  EXPECT_GT(on_time, 0u);
}

TEST(Federation, StragglerUpdateIsAbsentFromAggregation) {
  Federation f = tiny_federation(1);
  f.per_round = 1;
  f.classes.resize(1);
  for (Device& d : f.devices) d.class_index = 0;
  f.classes[0].constraints.time_budget = 0.0;  // nothing fits: everyone sits out
  Rng rng(4);
  const ModelParams w0 = init_model(f.topology, rng);
  FederationResult r = run_federation(f, w0, 1);
  EXPECT_EQ(r.final_model, w0);
  EXPECT_FALSE(r.contributions[0].config);
  EXPECT_EQ(r.metrics[0].accepted_updates, 0u);
  EXPECT_EQ(r.metrics[0].mean_upload_bytes, 0.0);

  // feasible plan, but a huge multiplier makes it late
  f.classes[0].constraints.time_budget =
      estimate_time(f.classes[0].profile, f.topology, Configuration::full(f.topology.size()),
                    TrainingShape{8, 2, 8, true})
          .total();
  f.classes[0].straggler_sigma = 50.0;
  for (std::uint64_t seed = 0;; ++seed) {
    f.seed = seed;
    r = run_federation(f, w0, 1);
    if (!r.contributions[0].accepted) break;
  }
  EXPECT_EQ(r.final_model, w0);
  EXPECT_GT(r.contributions[0].upload_bytes, 0u);
}

TEST(Federation, UploadBudgetRangeIsRedrawnPerRound) {
  Federation f = tiny_federation(6);
  const double full = static_cast<double>(update_size(f.topology, Configuration::full(f.topology.size())));
  f.classes[0].upload_budget_range = std::make_pair(0.1 * full, full);
  Rng rng(5);
  const FederationResult r = run_federation(f, init_model(f.topology, rng), 1);
  std::set<std::uint64_t> sizes;
  for (const Contribution& c : r.contributions) {
    if (f.devices[c.client_id].class_index == 0) sizes.insert(c.upload_bytes);
  }
  EXPECT_GT(sizes.size(), 1u);
}

TEST(Federation, ValidationErrors) {
  Rng rng(6);
  Federation f = tiny_federation(1);
  const ModelParams w0 = init_model(f.topology, rng);
  f.per_round = 7;
  EXPECT_THROW(run_federation(f, w0), InputError);
  f = tiny_federation(1);
  f.rounds = 0;
  EXPECT_THROW(run_federation(f, w0), InputError);
  f = tiny_federation(1);
  f.classes[0].upload_budget_range = std::make_pair(5.0, 1.0);
  EXPECT_THROW(run_federation(f, w0), InputError);
}

TEST(Csv, Layout) {
  std::ostringstream m, c;
  write_metrics_csv({{1, 0.5, 1024.0, 3}}, m);
  EXPECT_EQ(m.str(), "round,accuracy,mean_upload_bytes,accepted_updates\n1,0.5,1024,3\n");
  write_contributions_csv({{2, 7, Configuration(1, 3), 400, 0.25, true}, {2, 9, std::nullopt, 0, 0.0, false}}, c);
  EXPECT_EQ(c.str(), "round,client_id,l,u,upload_bytes,elapsed_s,accepted\n2,7,1,3,400,0.25,1\n2,9,,,0,0,0\n");
}

}  // namespace
