#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <random>
#include <vector>

#include "fedfreeze/configuration.hpp"
#include "fedfreeze/layers.hpp"
#include "fedfreeze/quantized_block.hpp"
#include "fedfreeze/topology.hpp"

namespace fedfreeze {

inline constexpr double kBnMomentum = 0.1;

/// Parameters of one block. Conv blocks use the conv_* and bn_* members
/// (bn_* empty without batch norm); the output block uses fc_*.
template <typename T>
struct BasicBlockParams {
  BasicTensor<T> conv_weight;
  BasicTensor<T> conv_bias;
  BasicTensor<T> bn_gamma;
  BasicTensor<T> bn_beta;
  BasicTensor<T> bn_running_mean;
  BasicTensor<T> bn_running_var;
  BasicTensor<T> fc_weight;
  BasicTensor<T> fc_bias;

  bool operator==(const BasicBlockParams&) const = default;

  template <typename U>
  BasicBlockParams<U> cast() const {
    return {conv_weight.template cast<U>(),     conv_bias.template cast<U>(),
            bn_gamma.template cast<U>(),        bn_beta.template cast<U>(),
            bn_running_mean.template cast<U>(), bn_running_var.template cast<U>(),
            fc_weight.template cast<U>(),       fc_bias.template cast<U>()};
  }

  /// Visits every tensor shipped in an update, buffers included.
  template <typename F>
  void for_each_tensor(F&& f) {
    for (auto* t : {&conv_weight, &conv_bias, &bn_gamma, &bn_beta, &bn_running_mean, &bn_running_var, &fc_weight,
                    &fc_bias}) {
      f(*t);
    }
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    for (const auto* t : {&conv_weight, &conv_bias, &bn_gamma, &bn_beta, &bn_running_mean, &bn_running_var,
                          &fc_weight, &fc_bias}) {
      f(*t);
    }
  }
};

template <typename T>
struct BasicModelParams {
  std::vector<BasicBlockParams<T>> blocks;

  std::size_t size() const { return blocks.size(); }
  bool operator==(const BasicModelParams&) const = default;

  template <typename U>
  BasicModelParams<U> cast() const {
    BasicModelParams<U> out;
    for (const auto& b : blocks) out.blocks.push_back(b.template cast<U>());
    return out;
  }
};

using BlockParams = BasicBlockParams<float>;
using ModelParams = BasicModelParams<float>;

/// Kaiming-normal conv kernels, Kaiming-uniform fc weights, zero biases, unit BN scale.
ModelParams init_model(const Topology& topology, std::mt19937_64& rng);

/// Throws DimensionError when parameter shapes disagree with the topology.
template <typename T>
void check_params(const BasicModelParams<T>& params, const Topology& topology);

/// How one block executes within a forward/backward pass.
template <typename T>
struct BlockExec {
  BlockType type = BlockType::first_trained;
  /// Frozen float blocks: fixed BN statistics; nullptr selects the running statistics.
  const BnStats<T>* frozen_stats = nullptr;
  /// Frozen blocks executed in 8-bit (float models only).
  const QuantizedConvBlock* quant_conv = nullptr;
  const QuantizedOutputBlock* quant_output = nullptr;

  bool quantized() const { return quant_conv != nullptr || quant_output != nullptr; }
};

template <typename T>
struct ExecutionPlan {
  std::vector<BlockExec<T>> blocks;
  /// Statistics used by trained blocks (batch during local training, fixed for evaluation).
  BnMode trained_bn = BnMode::batch_stats;

  /// Index of the first trained block, or size() when nothing is trained.
  std::size_t first_trained() const;
};

template <typename T>
ExecutionPlan<T> all_trained_plan(std::size_t n_blocks, BnMode trained_bn);

/// Float execution of a configuration: frozen blocks run unfused in full
/// precision with running statistics.
template <typename T>
ExecutionPlan<T> float_plan(const Configuration& config, std::size_t n_blocks, BnMode trained_bn);

template <typename T>
struct BlockCache {
  enum class Kind { none, conv, output, quant_conv, quant_output };
  Kind kind = Kind::none;
  BasicTensor<T> input;
  BnCache<T> bn;
  BasicTensor<T> pre_relu;
  std::optional<BnStats<T>> batch_stats;  // trained blocks in batch_stats mode
  QuantBlockCache quant;
  Shape input_shape;
};

/// Stored activations for blocks that take part in the backward pass.
template <typename T>
struct ForwardCache {
  std::vector<BlockCache<T>> blocks;
};

template <typename T>
struct BlockGrads {
  BasicTensor<T> conv_weight;
  BasicTensor<T> conv_bias;
  BasicTensor<T> bn_gamma;
  BasicTensor<T> bn_beta;
  BasicTensor<T> fc_weight;
  BasicTensor<T> fc_bias;
};

template <typename T>
struct Gradients {
  std::map<std::size_t, BlockGrads<T>> blocks;
  /// Number of blocks whose input gradient was computed.
  std::size_t intermediate_gradients = 0;
};

/// Runs the chain of block functions. When `cache` is non-null it is filled
/// for every block at or after the first trained block.
template <typename T>
BasicTensor<T> model_forward(const BasicModelParams<T>& params, const Topology& topology,
                             const ExecutionPlan<T>& plan, const BasicTensor<T>& x, ForwardCache<T>* cache = nullptr);

/// Called during backward with (block, gradient w.r.t. the block's
/// pre-activation output); for the output block that is the logit gradient.
template <typename T>
using BackwardObserver = std::function<void(std::size_t, const BasicTensor<T>&)>;

/// Reverse pass from the logit gradient down to the first trained block.
template <typename T>
Gradients<T> model_backward(const BasicModelParams<T>& params, const Topology& topology,
                            const ExecutionPlan<T>& plan, const ForwardCache<T>& cache,
                            const BasicTensor<T>& grad_logits, const BackwardObserver<T>& observer = {});

/// Plain SGD on the trained blocks present in `grads`.
template <typename T>
void apply_sgd(BasicModelParams<T>& params, const Gradients<T>& grads, double learning_rate);

/// Exponential moving average of batch statistics into the running buffers
/// of trained blocks: running = (1 - momentum) * running + momentum * batch.
template <typename T>
void update_running_stats(BasicModelParams<T>& params, const ForwardCache<T>& cache, double momentum = kBnMomentum);

/// Logits with fixed running statistics everywhere.
Tensor predict(const ModelParams& params, const Topology& topology, const Tensor& x);

}  // namespace fedfreeze
