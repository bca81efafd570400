#pragma once

// SGD with momentum and weight decay, warmup-cosine learning rate.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "stor2/errors.hpp"
#include "stor2/tensor.hpp"

namespace stor2 {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch = 32;
  double momentum = 0.9;
  double weight_decay = 1e-6;
  double warmup_start = 0.01;
  double peak_lr = 0.05;
  std::size_t warmup_epochs = 5;
  std::uint64_t seed = 0;
  double fraction = 1.0;
  std::size_t split = 0;
  // Lower bound on optimizer steps; small labeled subsets repeat epochs
  // until reached. 0 disables.
  std::size_t min_steps = 0;
  // Global L2 gradient-norm cap applied before each step. 0 disables.
  double grad_clip = 1.0;

  void validate() const {
    if (epochs == 0) throw ConfigError("train.epochs: must be positive");
    if (batch == 0) throw ConfigError("train.batch: must be positive");
    if (warmup_epochs == 0 || warmup_epochs > epochs)
      throw ConfigError("train.warmup_epochs: need 0 < warmup_epochs <= epochs (" + std::to_string(warmup_epochs) +
                        " vs " + std::to_string(epochs) + ")");
    if (!(warmup_start > 0) || !(peak_lr > 0)) throw ConfigError("train: learning rates must be positive");
    if (momentum < 0 || momentum >= 1) throw ConfigError("train.momentum: must be in [0, 1)");
    if (weight_decay < 0) throw ConfigError("train.weight_decay: must be non-negative");
    if (grad_clip < 0) throw ConfigError("train.grad_clip: must be non-negative");
    if (!(fraction > 0 && fraction <= 1)) throw ConfigError("train.fraction: must be in (0, 1]");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},     {"batch", c.batch},
          {"momentum", c.momentum}, {"weight_decay", c.weight_decay},
          {"warmup_start", c.warmup_start}, {"peak_lr", c.peak_lr},
          {"warmup_epochs", c.warmup_epochs}, {"seed", c.seed},
          {"fraction", c.fraction}, {"split", c.split},
          {"min_steps", c.min_steps}, {"grad_clip", c.grad_clip}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  try {
    auto opt = [&](const char* key, auto& dst) {
      if (j.contains(key)) dst = j.at(key).get<std::decay_t<decltype(dst)>>();
    };
    opt("epochs", c.epochs);
    opt("batch", c.batch);
    opt("momentum", c.momentum);
    opt("weight_decay", c.weight_decay);
    opt("warmup_start", c.warmup_start);
    opt("peak_lr", c.peak_lr);
    opt("warmup_epochs", c.warmup_epochs);
    opt("seed", c.seed);
    opt("fraction", c.fraction);
    opt("split", c.split);
    opt("min_steps", c.min_steps);
    opt("grad_clip", c.grad_clip);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

/// Learning rate at global step `step` of `total`. Warmup length is
/// warmup_epochs/epochs of the run; the cosine phase reaches 0 one step
/// past the last.
inline double lr_at(const TrainConfig& c, std::size_t step, std::size_t total) {
  if (step >= total) throw ArgumentError("lr_at: step " + std::to_string(step) + " >= total " + std::to_string(total));
  const std::size_t warmup = std::clamp<std::size_t>(total * c.warmup_epochs / c.epochs, 1, total);
  if (step < warmup)
    return c.warmup_start + (c.peak_lr - c.warmup_start) * static_cast<double>(step) / static_cast<double>(warmup);
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(std::max<std::size_t>(1, total - warmup));
  return 0.5 * c.peak_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

template <class T>
class Sgd {
 public:
  Sgd(std::vector<Parameter<T>*> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), decay_(weight_decay) {
    for (auto* p : params_) velocity_.emplace_back(p->value.size(), T(0));
  }

  /// v <- m v + (g + wd p); p <- p - lr v
  void step(double lr) {
    const T m = static_cast<T>(momentum_), wd = static_cast<T>(decay_), a = static_cast<T>(lr);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      auto& v = velocity_[i];
      if (p.grad.size() != p.value.size())
        throw DimensionError("sgd: gradient of '" + p.name + "' has " + std::to_string(p.grad.size()) + " entries, " +
                             std::to_string(p.value.size()) + " expected");
      for (std::size_t k = 0; k < v.size(); ++k) {
        v[k] = m * v[k] + (p.grad[k] + wd * p.value[k]);
        p.value[k] -= a * v[k];
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  double grad_norm() const {
    double s = 0;
    for (const auto* p : params_)
      for (T g : p->grad) s += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(s);
  }

  /// Rescales all gradients so their joint L2 norm is at most `max_norm`.
  /// Returns the norm before rescaling.
  double clip_grad_norm(double max_norm) {
    const double norm = grad_norm();
    if (max_norm > 0 && norm > max_norm) {
      const T f = static_cast<T>(max_norm / norm);
      for (auto* p : params_)
        for (auto& g : p->grad) g *= f;
    }
    return norm;
  }

  const std::vector<std::vector<T>>& velocity() const { return velocity_; }

 private:
  std::vector<Parameter<T>*> params_;
  std::vector<std::vector<T>> velocity_;
  double momentum_;
  double decay_;
};

}  // namespace stor2
