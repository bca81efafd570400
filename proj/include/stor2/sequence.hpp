#pragma once

// Uni-directional GRU over per-clip features with a per-position classifier.

#include <optional>
#include <random>
#include <vector>

#include <json.hpp>

#include "stor2/checkpoint.hpp"
#include "stor2/nn.hpp"
#include "stor2/tensor.hpp"

namespace stor2 {

struct GruConfig {
  std::size_t input = 0;   // clip feature width (+ appearance width when fusing)
  std::size_t hidden = 256;
  std::size_t K = 9;

  void validate() const {
    if (!input || !hidden || !K) throw ConfigError("gru: input, hidden and K must be positive");
  }
};

inline nlohmann::json to_json(const GruConfig& c) { return {{"input", c.input}, {"hidden", c.hidden}, {"K", c.K}}; }

inline GruConfig gru_config_from_json(const nlohmann::json& j) {
  try {
    GruConfig c{j.at("input").get<std::size_t>(), j.at("hidden").get<std::size_t>(), j.at("K").get<std::size_t>()};
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("gru config: ") + e.what());
  }
}

/// Gate parameters use row-vector convention: gate = x·W + h·U + b.
template <class T>
struct Gru {
  GruConfig config;
  Parameter<T> w_z, w_r, w_h;
  Parameter<T> u_z, u_r, u_h;
  Parameter<T> b_z, b_r, b_h;
  Linear<T> classifier;

  explicit Gru(const GruConfig& cfg)
      : config(cfg),
        w_z("gru.w_z", {cfg.input, cfg.hidden}), w_r("gru.w_r", {cfg.input, cfg.hidden}),
        w_h("gru.w_h", {cfg.input, cfg.hidden}), u_z("gru.u_z", {cfg.hidden, cfg.hidden}),
        u_r("gru.u_r", {cfg.hidden, cfg.hidden}), u_h("gru.u_h", {cfg.hidden, cfg.hidden}),
        b_z("gru.b_z", {cfg.hidden}), b_r("gru.b_r", {cfg.hidden}), b_h("gru.b_h", {cfg.hidden}),
        classifier("gru.classifier", cfg.hidden, cfg.K) {
    cfg.validate();
  }

  void init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const double in_scale = 1.0 / std::sqrt(static_cast<double>(config.input));
    const double h_scale = 1.0 / std::sqrt(static_cast<double>(config.hidden));
    for (auto* w : {&w_z, &w_r, &w_h}) fill_normal(*w, in_scale, rng);
    for (auto* u : {&u_z, &u_r, &u_h}) fill_normal(*u, h_scale, rng);
    for (auto* b : {&b_z, &b_r, &b_h}) std::fill(b->value.begin(), b->value.end(), T(0));
    classifier.init(rng);
  }

  std::vector<Parameter<T>*> parameters() {
    return {&w_z, &w_r, &w_h, &u_z, &u_r, &u_h, &b_z, &b_r, &b_h, &classifier.weight, &classifier.bias};
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }
};

/// h' = (1 - z) ⊙ h + z ⊙ ĥ with
///   z = σ(x W_z + h U_z + b_z), r = σ(x W_r + h U_r + b_r),
///   ĥ = tanh(x W_h + (r ⊙ h) U_h + b_h).
/// x is [1 x input], h is [1 x hidden].
template <class T>
Var<T> gru_step(Tape<T>& tape, Gru<T>& gru, const Var<T>& x, const Var<T>& h) {
  const auto& c = gru.config;
  if (x.shape() != Shape{1, c.input} || h.shape() != Shape{1, c.hidden})
    throw DimensionError("gru_step: x " + to_string(x.shape()) + ", h " + to_string(h.shape()) + " for input " +
                         std::to_string(c.input) + ", hidden " + std::to_string(c.hidden));
  auto gate = [&](Parameter<T>& w, Parameter<T>& u, Parameter<T>& b, const Var<T>& state) {
    return add(add(matmul(x, tape.param(w)), matmul(state, tape.param(u))), tape.param(b));
  };
  auto z = sigmoid(gate(gru.w_z, gru.u_z, gru.b_z, h));
  auto r = sigmoid(gate(gru.w_r, gru.u_r, gru.b_r, h));
  auto candidate = tanh(gate(gru.w_h, gru.u_h, gru.b_h, mul(r, h)));
  // (1 - z) ⊙ h + z ⊙ ĥ  ==  h + z ⊙ (ĥ - h)
  return add(h, mul(z, sub(candidate, h)));
}

/// Runs the GRU left to right from h0 = 0 and classifies every position.
/// `appearance`, when given, is concatenated to the clip feature of the
/// same position. Returns [L x K] logits.
template <class T>
Var<T> segment_video(Tape<T>& tape, Gru<T>& gru, const std::vector<std::vector<T>>& clip_features,
                     const std::vector<std::vector<T>>* appearance = nullptr) {
  const std::size_t steps = clip_features.size();
  if (steps == 0) throw ArgumentError("segment_video: empty sequence");
  if (appearance && appearance->size() != steps)
    throw ArgumentError("segment_video: " + std::to_string(appearance->size()) + " appearance vectors for " +
                        std::to_string(steps) + " positions");
  Var<T> h = tape.zeros({1, gru.config.hidden});
  std::vector<Var<T>> logits;
  logits.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    std::vector<T> x = clip_features[t];
    if (appearance) x.insert(x.end(), (*appearance)[t].begin(), (*appearance)[t].end());
    if (x.size() != gru.config.input)
      throw DimensionError("segment_video: position " + std::to_string(t) + " has width " + std::to_string(x.size()) +
                           ", GRU expects " + std::to_string(gru.config.input));
    const std::size_t width = x.size();
    h = gru_step(tape, gru, tape.constant({1, width}, std::move(x)), h);
    logits.push_back(gru.classifier(tape, h));
  }
  return concat(logits, 0);
}

inline constexpr const char* kGruKind = "stor2-gru";

template <class T>
void save_gru(const std::filesystem::path& path, Gru<T>& gru, const nlohmann::json& extra = {}) {
  nlohmann::json cfg = to_json(gru.config);
  if (!extra.is_null()) cfg["extra"] = extra;
  save_checkpoint(path, kGruKind, cfg, gru.parameters());
}

template <class T>
Gru<T> load_gru(const std::filesystem::path& path) {
  auto ck = load_checkpoint(path);
  if (ck.kind != kGruKind) throw CheckpointError("'" + path.string() + "' is a " + ck.kind + " checkpoint");
  Gru<T> gru(gru_config_from_json(ck.config));
  apply_checkpoint(ck, gru.parameters());
  return gru;
}

}  // namespace stor2
