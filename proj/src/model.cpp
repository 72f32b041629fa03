#include "fedfreeze/model.hpp"

#include <cmath>
#include <string>
#include <type_traits>

namespace fedfreeze {

ModelParams init_model(const Topology& topology, std::mt19937_64& rng) {
  topology.validate();
  ModelParams params;
  for (const BlockSpec& spec : topology.blocks) {
    BlockParams b;
    if (spec.is_conv()) {
      const std::size_t fan_in = spec.in_channels * spec.kernel * spec.kernel;
      std::normal_distribution<float> normal(0.0f, static_cast<float>(std::sqrt(2.0 / static_cast<double>(fan_in))));
      b.conv_weight = Tensor({spec.out_channels, spec.in_channels, spec.kernel, spec.kernel});
      for (float& v : b.conv_weight.data()) v = normal(rng);
      b.conv_bias = Tensor({spec.out_channels});
      if (spec.has_bn) {
        b.bn_gamma = Tensor({spec.out_channels}, 1.0f);
        b.bn_beta = Tensor({spec.out_channels});
        b.bn_running_mean = Tensor({spec.out_channels});
        b.bn_running_var = Tensor({spec.out_channels}, 1.0f);
      }
    } else {
      const float bound = static_cast<float>(std::sqrt(6.0) / std::sqrt(static_cast<double>(spec.in_features)));
      std::uniform_real_distribution<float> uniform(-bound, bound);
      b.fc_weight = Tensor({spec.num_classes, spec.in_features});
      for (float& v : b.fc_weight.data()) v = uniform(rng);
      b.fc_bias = Tensor({spec.num_classes});
    }
    params.blocks.push_back(std::move(b));
  }
  return params;
}

template <typename T>
void check_params(const BasicModelParams<T>& params, const Topology& topology) {
  if (params.size() != topology.size()) {
    throw DimensionError("model has " + std::to_string(params.size()) + " blocks, topology has " +
                         std::to_string(topology.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const BlockSpec& s = topology.blocks[i];
    const auto& p = params.blocks[i];
    const std::string where = "block " + std::to_string(i) + " ";
    if (s.is_conv()) {
      require_shape(p.conv_weight, {s.out_channels, s.in_channels, s.kernel, s.kernel}, (where + "conv weight").c_str());
      require_shape(p.conv_bias, {s.out_channels}, (where + "conv bias").c_str());
      if (s.has_bn) {
        for (const auto* t : {&p.bn_gamma, &p.bn_beta, &p.bn_running_mean, &p.bn_running_var}) {
          require_shape(*t, {s.out_channels}, (where + "batchnorm parameter").c_str());
        }
      }
    } else {
      require_shape(p.fc_weight, {s.num_classes, s.in_features}, (where + "fc weight").c_str());
      require_shape(p.fc_bias, {s.num_classes}, (where + "fc bias").c_str());
    }
  }
}

template <typename T>
std::size_t ExecutionPlan<T>::first_trained() const {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (is_trained(blocks[i].type)) return i;
  }
  return blocks.size();
}

template <typename T>
ExecutionPlan<T> all_trained_plan(std::size_t n_blocks, BnMode trained_bn) {
  return float_plan<T>(Configuration::full(n_blocks), n_blocks, trained_bn);
}

template <typename T>
ExecutionPlan<T> float_plan(const Configuration& config, std::size_t n_blocks, BnMode trained_bn) {
  ExecutionPlan<T> plan;
  plan.trained_bn = trained_bn;
  for (BlockType type : classify_blocks(config, n_blocks)) {
    BlockExec<T> exec;
    exec.type = type;
    plan.blocks.push_back(exec);
  }
  return plan;
}

namespace {

template <typename T>
void check_plan(const BasicModelParams<T>& params, const Topology& topology, const ExecutionPlan<T>& plan) {
  if (plan.blocks.size() != topology.size() || params.size() != topology.size()) {
    throw StateError("execution plan covers " + std::to_string(plan.blocks.size()) + " blocks, model has " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < plan.blocks.size(); ++i) {
    const auto& exec = plan.blocks[i];
    if (exec.quantized() && is_trained(exec.type)) {
      throw StateError("block " + std::to_string(i) + " is trained but scheduled for quantized execution");
    }
    if (topology.blocks[i].is_conv() ? exec.quant_output != nullptr : exec.quant_conv != nullptr) {
      throw StateError("block " + std::to_string(i) + " has a quantized kernel of the wrong kind");
    }
  }
}

// Current activation: real-valued, or 8-bit between consecutive quantized blocks.
template <typename T>
struct Activation {
  BasicTensor<T> real;
  std::optional<ActivationTensor> quantized;

  BasicTensor<T> take_real() {
    if (quantized) {
      if constexpr (std::is_same_v<T, float>) {
        real = dequantize(*quantized);
        quantized.reset();
      }
    }
    return std::move(real);
  }

  ActivationTensor take_quantized(const QuantParams& qp) {
    if constexpr (std::is_same_v<T, float>) {
      if (quantized && quantized->params == qp) {
        ActivationTensor out = std::move(*quantized);
        quantized.reset();
        return out;
      }
      return quantize<std::uint8_t>(take_real(), qp);
    } else {
      throw StateError("quantized execution requires a float model");
    }
  }
};

}  // namespace

template <typename T>
BasicTensor<T> model_forward(const BasicModelParams<T>& params, const Topology& topology,
                             const ExecutionPlan<T>& plan, const BasicTensor<T>& x, ForwardCache<T>* cache) {
  check_plan(params, topology, plan);
  const std::size_t n = topology.size();
  const std::size_t first = plan.first_trained();
  if (cache) cache->blocks.assign(n, BlockCache<T>{});

  Activation<T> act{x, std::nullopt};
  for (std::size_t i = 0; i < n; ++i) {
    const BlockSpec& spec = topology.blocks[i];
    const BlockExec<T>& exec = plan.blocks[i];
    const BasicBlockParams<T>& bp = params.blocks[i];
    BlockCache<T>* bc = (cache && i >= first) ? &cache->blocks[i] : nullptr;

    if (exec.quant_conv) {
      if constexpr (std::is_same_v<T, float>) {
        ActivationTensor in = act.take_quantized(exec.quant_conv->input_params);
        act.quantized = quant_block_forward(*exec.quant_conv, in, bc ? &bc->quant : nullptr);
        if (bc) bc->kind = BlockCache<T>::Kind::quant_conv;
      }
      continue;
    }
    if (exec.quant_output) {
      if constexpr (std::is_same_v<T, float>) {
        ActivationTensor in = act.take_quantized(exec.quant_output->input_params);
        if (bc) {
          bc->kind = BlockCache<T>::Kind::quant_output;
          bc->input_shape = in.shape;
        }
        act.real = quant_output_forward(*exec.quant_output, in);
      }
      continue;
    }

    BasicTensor<T> input = act.take_real();
    if (spec.is_conv()) {
      BasicTensor<T> y = conv2d_forward(input, bp.conv_weight, bp.conv_bias, spec.geometry());
      if (spec.has_bn) {
        const bool trained = is_trained(exec.type);
        const BnMode mode = trained ? plan.trained_bn : BnMode::fixed_stats;
        const BnStats<T> running{bp.bn_running_mean, bp.bn_running_var};
        const BnStats<T>* stats = (!trained && exec.frozen_stats) ? exec.frozen_stats : &running;
        BnForward<T> bn = batchnorm_forward(y, bp.bn_gamma, bp.bn_beta, mode, stats);
        y = std::move(bn.y);
        if (bc) {
          bc->bn = std::move(bn.cache);
          if (trained && mode == BnMode::batch_stats) bc->batch_stats = std::move(bn.used);
        }
      }
      BasicTensor<T> out = spec.has_relu ? relu(y) : y;
      if (bc) {
        bc->kind = BlockCache<T>::Kind::conv;
        bc->input = std::move(input);
        if (spec.has_relu) bc->pre_relu = std::move(y);
      }
      act.real = std::move(out);
    } else {
      act.real = output_block_forward(input, bp.fc_weight, bp.fc_bias);
      if (bc) {
        bc->kind = BlockCache<T>::Kind::output;
        bc->input = std::move(input);
      }
    }
  }
  return act.take_real();
}

template <typename T>
Gradients<T> model_backward(const BasicModelParams<T>& params, const Topology& topology,
                            const ExecutionPlan<T>& plan, const ForwardCache<T>& cache,
                            const BasicTensor<T>& grad_logits, const BackwardObserver<T>& observer) {
  check_plan(params, topology, plan);
  const std::size_t n = topology.size();
  const std::size_t first = plan.first_trained();
  Gradients<T> grads;
  if (first == n) return grads;
  if (cache.blocks.size() != n) throw StateError("forward cache does not match the execution plan");

  using Kind = typename BlockCache<T>::Kind;
  BasicTensor<T> g = grad_logits;
  for (std::size_t i = n; i-- > first;) {
    const BlockSpec& spec = topology.blocks[i];
    const BlockExec<T>& exec = plan.blocks[i];
    const BlockCache<T>& bc = cache.blocks[i];
    const BasicBlockParams<T>& bp = params.blocks[i];
    const bool trained = is_trained(exec.type);
    const bool need_input = i > first;
    const Kind expected = exec.quant_conv     ? Kind::quant_conv
                          : exec.quant_output ? Kind::quant_output
                          : spec.is_conv()    ? Kind::conv
                                              : Kind::output;
    if (bc.kind != expected) {
      throw StateError("forward cache for block " + std::to_string(i) + " does not match the execution plan");
    }

    switch (bc.kind) {
      case Kind::output: {
        if (observer) observer(i, g);
        OutputGrads<T> og = output_block_backward(bc.input, bp.fc_weight, g, need_input, trained);
        if (trained) {
          BlockGrads<T>& out = grads.blocks[i];
          out.fc_weight = std::move(og.weight);
          out.fc_bias = std::move(og.bias);
        }
        g = std::move(og.input);
        break;
      }
      case Kind::conv: {
        BasicTensor<T> pre = spec.has_relu ? relu_backward(bc.pre_relu, g) : std::move(g);
        if (observer) observer(i, pre);
        BasicTensor<T> conv_up;
        BnGrads<T> bg;
        if (spec.has_bn) {
          bg = batchnorm_backward(bc.bn, pre, trained);
          conv_up = std::move(bg.input);
        } else {
          conv_up = std::move(pre);
        }
        ConvGrads<T> cg = conv2d_backward(bc.input, bp.conv_weight, conv_up, spec.geometry(), need_input, trained);
        if (trained) {
          BlockGrads<T>& out = grads.blocks[i];
          out.conv_weight = std::move(cg.weight);
          out.conv_bias = std::move(cg.bias);
          out.bn_gamma = std::move(bg.gamma);
          out.bn_beta = std::move(bg.beta);
        }
        g = std::move(cg.input);
        break;
      }
      case Kind::quant_conv: {
        if constexpr (std::is_same_v<T, float>) {
          if (observer) {
            BasicTensor<T> masked = g;
            for (std::size_t j = 0; j < masked.size(); ++j) {
              if (!bc.quant.relu_mask[j]) masked[j] = T{0};
            }
            observer(i, masked);
          }
          g = quant_block_backward_input(*exec.quant_conv, g, bc.quant);
        }
        break;
      }
      case Kind::quant_output: {
        if constexpr (std::is_same_v<T, float>) {
          if (observer) observer(i, g);
          g = quant_output_backward_input(*exec.quant_output, g, bc.input_shape);
        }
        break;
      }
      case Kind::none:
        throw StateError("no cached activations for block " + std::to_string(i));
    }
    if (need_input) ++grads.intermediate_gradients;
  }
  return grads;
}

template <typename T>
void apply_sgd(BasicModelParams<T>& params, const Gradients<T>& grads, double learning_rate) {
  auto step = [learning_rate](BasicTensor<T>& w, const BasicTensor<T>& g) {
    if (!g.empty()) w = sgd_step(w, g, learning_rate);
  };
  for (const auto& [index, g] : grads.blocks) {
    BasicBlockParams<T>& p = params.blocks.at(index);
    step(p.conv_weight, g.conv_weight);
    step(p.conv_bias, g.conv_bias);
    step(p.bn_gamma, g.bn_gamma);
    step(p.bn_beta, g.bn_beta);
    step(p.fc_weight, g.fc_weight);
    step(p.fc_bias, g.fc_bias);
  }
}

template <typename T>
void update_running_stats(BasicModelParams<T>& params, const ForwardCache<T>& cache, double momentum) {
  const T m = static_cast<T>(momentum);
  for (std::size_t i = 0; i < cache.blocks.size(); ++i) {
    const auto& stats = cache.blocks[i].batch_stats;
    if (!stats) continue;
    BasicBlockParams<T>& p = params.blocks.at(i);
    for (std::size_t c = 0; c < p.bn_running_mean.size(); ++c) {
      p.bn_running_mean[c] = (T{1} - m) * p.bn_running_mean[c] + m * stats->mean[c];
      p.bn_running_var[c] = (T{1} - m) * p.bn_running_var[c] + m * stats->var[c];
    }
  }
}

Tensor predict(const ModelParams& params, const Topology& topology, const Tensor& x) {
  static_cast<void>(check_params<float>);
  const auto plan = all_trained_plan<float>(topology.size(), BnMode::fixed_stats);
  return model_forward(params, topology, plan, x);
}

#define FEDFREEZE_INSTANTIATE_MODEL(T)                                                                          \
  template void check_params(const BasicModelParams<T>&, const Topology&);                                      \
  template struct ExecutionPlan<T>;                                                                             \
  template ExecutionPlan<T> all_trained_plan<T>(std::size_t, BnMode);                                           \
  template ExecutionPlan<T> float_plan<T>(const Configuration&, std::size_t, BnMode);                           \
  template BasicTensor<T> model_forward(const BasicModelParams<T>&, const Topology&, const ExecutionPlan<T>&,   \
                                        const BasicTensor<T>&, ForwardCache<T>*);                               \
  template Gradients<T> model_backward(const BasicModelParams<T>&, const Topology&, const ExecutionPlan<T>&,    \
                                       const ForwardCache<T>&, const BasicTensor<T>&,                           \
                                       const BackwardObserver<T>&);                                             \
  template void apply_sgd(BasicModelParams<T>&, const Gradients<T>&, double);                                   \
  template void update_running_stats(BasicModelParams<T>&, const ForwardCache<T>&, double);

FEDFREEZE_INSTANTIATE_MODEL(float)
FEDFREEZE_INSTANTIATE_MODEL(double)

#undef FEDFREEZE_INSTANTIATE_MODEL

}  // namespace fedfreeze
