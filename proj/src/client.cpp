#include "fedfreeze/client.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedfreeze/errors.hpp"
#include "fedfreeze/freeze.hpp"

namespace fedfreeze {

void RoundConstraints::validate() const {
  if (!(time_budget >= 0.0)) throw InputError("time budget must be non-negative");
  if (!(upload_budget >= 0.0)) throw InputError("upload budget must be non-negative");
}

std::vector<Configuration> feasible_configurations(const CostTable& table, const RoundConstraints& constraints) {
  constraints.validate();
  std::vector<Configuration> out;
  for (const CostEntry& e : table.entries) {
    if (e.time_seconds <= constraints.time_budget && static_cast<double>(e.size_bytes) <= constraints.upload_budget) {
      out.push_back(e.config);
    }
  }
  return out;
}

std::vector<Configuration> maximal_configurations(const std::vector<Configuration>& feasible) {
  std::vector<Configuration> out;
  for (const Configuration& c : feasible) {
    const bool dominated = std::any_of(feasible.begin(), feasible.end(),
                                       [&](const Configuration& o) { return c.is_strict_subset_of(o); });
    if (!dominated) out.push_back(c);
  }
  return out;
}

std::optional<Configuration> select_configuration(const CostTable& table, const RoundConstraints& constraints,
                                                  Rng& rng) {
  const std::vector<Configuration> best = maximal_configurations(feasible_configurations(table, constraints));
  if (best.empty()) return std::nullopt;
  std::uniform_int_distribution<std::size_t> pick(0, best.size() - 1);
  return best[pick(rng)];
}

void LocalTraining::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw InputError("learning rate must be positive");
  if (batch_size == 0) throw InputError("batch size must be positive");
  if (batches_per_round == 0) throw InputError("batches per round must be positive");
  if (calibration_batch_size == 0) throw InputError("calibration batch size must be positive");
}

UpdateMessage local_train_round(const ModelParams& global, const Topology& topology, const Configuration& config,
                                const Dataset& data, const LocalTraining& training, Rng& rng,
                                std::size_t client_id) {
  training.validate();
  if (data.empty()) throw InputError("client " + std::to_string(client_id) + " has no local data");
  data.validate();
  if (config.is_empty()) throw InputError("cannot train an empty configuration");
  config.validate(topology.size());
  check_params(global, topology);

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_cal = std::min(training.calibration_batch_size, data.size());
  const Dataset cal = data.gather(std::span(order).first(n_cal));
  const CalibrationStats stats = calibrate_round(global, topology, config, cal.images, cal.labels);
  PartitionedModel model = apply_configuration(global, topology, config, stats, training.quantize_frozen);
  const ExecutionPlan<float> plan = model.plan(BnMode::batch_stats);

  UpdateMessage msg;
  msg.client_id = client_id;
  msg.config = config;
  msg.data_count = data.size();
  msg.upload_bytes = update_size(topology, config);

  std::size_t cursor = data.size();
  for (std::size_t step = 0; step < training.batches_per_round; ++step) {
    if (cursor >= data.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const std::size_t take = std::min(training.batch_size, data.size() - cursor);
    const Dataset batch = data.gather(std::span(order).subspan(cursor, take));
    cursor += take;

    ForwardCache<float> cache;
    const Tensor logits = model_forward(model.params, topology, plan, batch.images, &cache);
    const LossResult<float> loss = softmax_cross_entropy(logits, std::span<const int>(batch.labels));
    const Gradients<float> grads = model_backward(model.params, topology, plan, cache, loss.grad_logits);
    apply_sgd(model.params, grads, training.learning_rate);
    update_running_stats(model.params, cache);
    msg.step_losses.push_back(loss.loss);
  }

  for (std::size_t i = config.first(); i <= config.last(); ++i) msg.blocks.emplace(i, model.params.blocks[i]);
  return msg;
}

}  // namespace fedfreeze
