#pragma once

#include <random>
#include <vector>

#include "fedfreeze/model.hpp"
#include "oracles.hpp"

namespace fixture {

using namespace fedfreeze;

// 5 blocks: input 2->3, 3->4, 4->4 (stride 2), 4->3, output 3->3 classes on 5x5 images.
inline Topology small_topology() {
  return make_topology(2, 5, {{3, 1}, {4, 1}, {4, 2}, {3, 1}}, 3);
}

// Model with non-trivial batch-norm parameters and running statistics.
template <typename T>
BasicModelParams<T> random_params(const Topology& topology, std::mt19937_64& rng) {
  BasicModelParams<T> p = init_model(topology, rng).template cast<T>();
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto& b = p.blocks[i];
    if (!topology.blocks[i].has_bn || !topology.blocks[i].is_conv()) continue;
    const Shape s = b.bn_gamma.shape();
    b.conv_bias = oracle::random_tensor<T>(s, rng, -0.2, 0.2);
    b.bn_gamma = oracle::random_tensor<T>(s, rng, 0.5, 1.5);
    b.bn_beta = oracle::random_tensor<T>(s, rng, -0.3, 0.3);
    b.bn_running_mean = oracle::random_tensor<T>(s, rng, -0.3, 0.3);
    b.bn_running_var = oracle::random_tensor<T>(s, rng, 0.5, 1.5);
  }
  return p;
}

inline std::vector<int> random_labels(std::size_t n, int classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, classes - 1);
  std::vector<int> out(n);
  for (int& v : out) v = d(rng);
  return out;
}

}  // namespace fixture
