#include "fedfreeze/freeze.hpp"

#include <algorithm>
#include <string>

#include "fedfreeze/errors.hpp"

namespace fedfreeze {

namespace {

QuantParams range_params(const Tensor& t) {
  const auto [lo, hi] = std::minmax_element(t.values().begin(), t.values().end());
  return affine_params(*lo, *hi);
}

bool same_stats(const std::optional<BnStats<float>>& a, const std::optional<BnStats<float>>& b) {
  if (a.has_value() != b.has_value()) return false;
  return !a || (a->mean == b->mean && a->var == b->var);
}

}  // namespace

bool CalibrationStats::operator==(const CalibrationStats& other) const {
  if (config != other.config || batch_size != other.batch_size || bn.size() != other.bn.size()) return false;
  for (std::size_t i = 0; i < bn.size(); ++i) {
    if (!same_stats(bn[i], other.bn[i])) return false;
  }
  return activation == other.activation && gradient_scale_per_sample == other.gradient_scale_per_sample;
}

CalibrationStats calibrate_round(const ModelParams& params, const Topology& topology, const Configuration& config,
                                 const Tensor& images, std::span<const int> labels) {
  if (images.rank() != 4 || images.dim(0) == 0) throw InputError("calibration batch is empty");
  if (labels.size() != images.dim(0)) {
    throw DimensionError("calibration batch has " + std::to_string(images.dim(0)) + " images and " +
                         std::to_string(labels.size()) + " labels");
  }
  check_params(params, topology);
  const std::size_t n = topology.size();
  const std::vector<BlockType> types = classify_blocks(config, n);

  CalibrationStats s;
  s.config = config;
  s.batch_size = images.dim(0);
  s.bn.resize(n);
  s.activation.resize(n);
  s.gradient_scale_per_sample.resize(n);

  Tensor a = images;
  for (std::size_t i = 0; i < n; ++i) {
    s.activation[i] = range_params(a);
    const BlockSpec& spec = topology.blocks[i];
    if (!spec.is_conv()) break;
    const BlockParams& p = params.blocks[i];
    Tensor y = conv2d_forward(a, p.conv_weight, p.conv_bias, spec.geometry());
    if (spec.has_bn) {
      BnForward<float> bn = batchnorm_forward(y, p.bn_gamma, p.bn_beta, BnMode::batch_stats);
      if (!is_trained(types[i])) s.bn[i] = std::move(bn.used);
      y = std::move(bn.y);
    }
    a = spec.has_relu ? relu(y) : std::move(y);
  }

  if (std::find(types.begin(), types.end(), BlockType::frozen_after) == types.end()) return s;

  ExecutionPlan<float> plan = float_plan<float>(config, n, BnMode::batch_stats);
  for (std::size_t i = 0; i < n; ++i) {
    if (s.bn[i]) plan.blocks[i].frozen_stats = &*s.bn[i];
  }
  ForwardCache<float> cache;
  const Tensor logits = model_forward(params, topology, plan, images, &cache);
  const LossResult<float> loss = softmax_cross_entropy(logits, labels);
  const double batch = static_cast<double>(s.batch_size);
  model_backward<float>(params, topology, plan, cache, loss.grad_logits,
                        [&](std::size_t block, const Tensor& g) {
                          if (types[block] != BlockType::frozen_after) return;
                          const double per_sample = max_abs(g) * batch / 127.0;
                          s.gradient_scale_per_sample[block] =
                              std::max(static_cast<float>(per_sample), kMinQuantScale);
                        });
  return s;
}

ExecutionPlan<float> PartitionedModel::plan(BnMode trained_bn) const {
  ExecutionPlan<float> p;
  p.trained_bn = trained_bn;
  for (std::size_t i = 0; i < types.size(); ++i) {
    BlockExec<float> e;
    e.type = types[i];
    if (const auto& f = frozen[i]) {
      if (quantized) {
        e.quant_conv = f->conv ? &*f->conv : nullptr;
        e.quant_output = f->output ? &*f->output : nullptr;
      } else {
        e.frozen_stats = &f->stats;
      }
    }
    p.blocks.push_back(e);
  }
  return p;
}

std::size_t PartitionedModel::frozen_count() const {
  return static_cast<std::size_t>(std::count_if(frozen.begin(), frozen.end(), [](const auto& f) { return f.has_value(); }));
}

PartitionedModel apply_configuration(const ModelParams& params, const Topology& topology, const Configuration& config,
                                     const CalibrationStats& stats, bool quantize) {
  const std::size_t n = topology.size();
  if (stats.config != config || stats.bn.size() != n || stats.activation.size() != n ||
      stats.gradient_scale_per_sample.size() != n) {
    throw StateError("calibration statistics for " + stats.config.to_string() + " do not match configuration " +
                     config.to_string());
  }
  check_params(params, topology);

  PartitionedModel pm;
  pm.config = config;
  pm.types = classify_blocks(config, n);
  pm.params = params;
  pm.frozen.resize(n);
  pm.quantized = quantize;
  for (std::size_t i = 0; i < n; ++i) {
    if (is_trained(pm.types[i])) continue;
    const BlockSpec& spec = topology.blocks[i];
    const BlockParams& p = params.blocks[i];
    const bool after = pm.types[i] == BlockType::frozen_after;
    const std::optional<float> grad_scale = after ? stats.gradient_scale_per_sample[i] : std::nullopt;
    if (quantize && after && !grad_scale) {
      throw StateError("block " + std::to_string(i) + " has no calibrated gradient scale");
    }
    FrozenBlock fb;
    if (spec.is_conv()) {
      FusedConvParams<float> fused{p.conv_weight, p.conv_bias};
      if (spec.has_bn) {
        if (!stats.bn[i]) throw StateError("block " + std::to_string(i) + " has no calibrated batch-norm statistics");
        fb.stats = *stats.bn[i];
        if (quantize) {
          fused = fuse_conv_bn(p.conv_weight, p.conv_bias, p.bn_gamma, p.bn_beta, fb.stats.mean, fb.stats.var);
        }
      }
      if (quantize) {
        fb.conv = make_quantized_conv_block(std::move(fused), spec.geometry(), spec.has_relu, stats.activation[i],
                                            stats.activation[i + 1], grad_scale);
      }
    } else if (quantize) {
      fb.output = make_quantized_output_block(p.fc_weight, p.fc_bias, stats.activation[i], grad_scale);
    }
    pm.frozen[i] = std::move(fb);
  }
  return pm;
}

}  // namespace fedfreeze
