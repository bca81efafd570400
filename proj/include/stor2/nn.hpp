#pragma once

// Dense layers built on the tape: Linear and a relu MLP.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "stor2/rng.hpp"
#include "stor2/tensor.hpp"

namespace stor2 {

template <class T>
void fill_normal(Parameter<T>& p, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : p.value) v = static_cast<T>(dist(rng));
}

/// y = x·W + b with W stored [in x out].
template <class T>
struct Linear {
  Parameter<T> weight;
  Parameter<T> bias;

  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out)
      : weight(name + ".weight", {in, out}), bias(name + ".bias", {out}) {}

  std::size_t in_features() const { return weight.shape[0]; }
  std::size_t out_features() const { return weight.shape[1]; }

  /// normal(0, 1/sqrt(fan_in)) weights, zero bias.
  void init(std::mt19937_64& rng) {
    fill_normal(weight, 1.0 / std::sqrt(static_cast<double>(in_features())), rng);
    std::fill(bias.value.begin(), bias.value.end(), T(0));
  }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) {
    if (x.rank() != 2 || x.shape()[1] != in_features())
      throw DimensionError(weight.name + ": input " + to_string(x.shape()) + " expects width " +
                           std::to_string(in_features()));
    return add(matmul(x, tape.param(weight)), tape.param(bias));
  }

  std::vector<Parameter<T>*> parameters() { return {&weight, &bias}; }
};

/// Linear layers with relu between consecutive layers (none after the last).
template <class T>
struct Mlp {
  std::vector<Linear<T>> layers;

  Mlp() = default;
  Mlp(const std::string& name, std::size_t in, std::size_t hidden, std::size_t out, std::size_t depth) {
    if (depth == 0) throw ConfigError(name + ": depth must be positive");
    for (std::size_t l = 0; l < depth; ++l) {
      const std::size_t fan_in = l == 0 ? in : hidden;
      const std::size_t fan_out = l + 1 == depth ? out : hidden;
      layers.emplace_back(name + "." + std::to_string(l), fan_in, fan_out);
    }
  }

  std::size_t in_features() const { return layers.front().in_features(); }
  std::size_t out_features() const { return layers.back().out_features(); }

  void init(std::mt19937_64& rng) {
    for (auto& l : layers) l.init(rng);
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      x = layers[l](tape, x);
      if (l + 1 < layers.size()) x = relu(x);
    }
    return x;
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& l : layers)
      for (auto* p : l.parameters()) out.push_back(p);
    return out;
  }
};

}  // namespace stor2
