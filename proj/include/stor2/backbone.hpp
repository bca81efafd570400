#pragma once

// Object-graph clip model.
//
// Each valid detection becomes a node: an MLP embeds its box (cx, cy, w, h),
// a learnable table embeds its category, and a fusion MLP mixes the two.
// Nodes are summed per (category, frame), so instance identity never
// matters. A shared temporal MLP reads each category's frame sequence, a
// category MLP reads all categories, and a linear head emits activity
// logits, optionally over the clip feature concatenated with an
// appearance vector.

#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "stor2/checkpoint.hpp"
#include "stor2/nn.hpp"
#include "stor2/scene.hpp"
#include "stor2/tensor.hpp"

namespace stor2 {

struct ModelConfig {
  std::size_t d = 1024;        // node embedding width
  std::size_t C = 6;           // categories
  std::size_t N = 15;          // slots per frame
  std::size_t T = 8;           // frames per clip
  std::size_t K = 9;           // activity classes
  std::size_t d_temporal = 0;  // 0: same as d
  std::size_t d_clip = 0;      // 0: same as d
  std::size_t hidden = 0;      // MLP hidden width, 0: same as d
  std::size_t mlp_layers = 2;
  std::size_t appearance_dim = 0;  // > 0 enables late fusion

  std::size_t temporal_width() const { return d_temporal ? d_temporal : d; }
  std::size_t clip_width() const { return d_clip ? d_clip : d; }
  std::size_t hidden_width() const { return hidden ? hidden : d; }
  bool fusion() const { return appearance_dim > 0; }
  ClipShape clip_shape() const { return {T, N, C}; }

  void validate() const {
    if (!d || !C || !N || !T || !K || !mlp_layers) throw ConfigError("model: every size must be positive");
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"d", c.d},           {"C", c.C},
          {"N", c.N},           {"T", c.T},
          {"K", c.K},           {"d_temporal", c.temporal_width()},
          {"d_clip", c.clip_width()}, {"hidden", c.hidden_width()},
          {"mlp_layers", c.mlp_layers}, {"appearance_dim", c.appearance_dim}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {}) {
  auto field = [&](const char* key, std::size_t& dst) {
    if (!j.contains(key)) return;
    try {
      dst = j.at(key).get<std::size_t>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(std::string("model.") + key + ": expected a non-negative integer");
    }
  };
  field("d", base.d);
  field("C", base.C);
  field("N", base.N);
  field("T", base.T);
  field("K", base.K);
  field("d_temporal", base.d_temporal);
  field("d_clip", base.d_clip);
  field("hidden", base.hidden);
  field("mlp_layers", base.mlp_layers);
  field("appearance_dim", base.appearance_dim);
  base.validate();
  return base;
}

enum class Ablation { none, no_spe, no_ce };

inline Ablation parse_ablation(const std::string& s) {
  if (s == "none") return Ablation::none;
  if (s == "no-spe") return Ablation::no_spe;
  if (s == "no-ce") return Ablation::no_ce;
  throw ConfigError("ablate: expected none, no-spe or no-ce, got '" + s + "'");
}

inline std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::none: return "none";
    case Ablation::no_spe: return "no-spe";
    case Ablation::no_ce: return "no-ce";
  }
  return "none";
}

/// Learnable state. Parameter order (and names) in parameters() is the
/// checkpoint contract:
///   spe.{l}.weight/bias, embed.weight, fusion.{l}.*, temporal.{l}.*,
///   category.{l}.*, classifier.weight/bias
template <class T>
struct Backbone {
  ModelConfig config;
  Mlp<T> spe;
  Parameter<T> embed;
  Mlp<T> fusion;
  Mlp<T> temporal;
  Mlp<T> category;
  Linear<T> classifier;

  explicit Backbone(const ModelConfig& cfg)
      : config(cfg),
        spe("spe", 4, cfg.hidden_width(), cfg.d, cfg.mlp_layers),
        embed("embed.weight", {cfg.C, cfg.d}),
        fusion("fusion", 2 * cfg.d, cfg.hidden_width(), cfg.d, cfg.mlp_layers),
        temporal("temporal", cfg.T * cfg.d, cfg.hidden_width(), cfg.temporal_width(), cfg.mlp_layers),
        category("category", cfg.C * cfg.temporal_width(), cfg.hidden_width(), cfg.clip_width(), cfg.mlp_layers),
        classifier("classifier", cfg.clip_width() + cfg.appearance_dim, cfg.K) {
    cfg.validate();
  }

  /// MLP layers ~ normal(0, 1/sqrt(fan_in)); embedding rows ~ normal(0, 1).
  void init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    spe.init(rng);
    fill_normal(embed, 1.0, rng);
    fusion.init(rng);
    temporal.init(rng);
    category.init(rng);
    classifier.init(rng);
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out = spe.parameters();
    out.push_back(&embed);
    for (auto* m : {&fusion, &temporal, &category})
      for (auto* p : m->parameters()) out.push_back(p);
    for (auto* p : classifier.parameters()) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  template <class U>
  Backbone<U> cast() const {
    Backbone<U> out(config);
    auto src = const_cast<Backbone*>(this)->parameters();
    auto dst = out.parameters();
    for (std::size_t i = 0; i < src.size(); ++i)
      for (std::size_t k = 0; k < src[i]->size(); ++k) dst[i]->value[k] = static_cast<U>(src[i]->value[k]);
    return out;
  }
};

/// σ = MLP_SPE(cx, cy, w, h) for a [R x 4] box matrix.
template <class T>
Var<T> spatial_position_embed(Tape<T>& tape, Backbone<T>& model, const Var<T>& boxes) {
  if (boxes.rank() != 2 || boxes.shape()[1] != 4)
    throw DimensionError("spatial_position_embed: boxes must be [R x 4], got " + to_string(boxes.shape()));
  return model.spe(tape, boxes);
}

/// Single-box form; padding slots must be masked out by the caller.
template <class T>
Var<T> spatial_position_embed(Tape<T>& tape, Backbone<T>& model, const Detection& det) {
  if (!det.valid || !(det.box.w > 0 && det.box.h > 0))
    throw ArgumentError("spatial_position_embed: padding slot passed as a node");
  const auto b = det.box.as_vector();
  return spatial_position_embed(tape, model,
                                tape.constant({1, 4}, {static_cast<T>(b[0]), static_cast<T>(b[1]),
                                                       static_cast<T>(b[2]), static_cast<T>(b[3])}));
}

/// x = MLP_Fusion(σ || κ), concatenated in (spatial, category) order.
template <class T>
Var<T> fuse_node(Tape<T>& tape, Backbone<T>& model, const Var<T>& sigma, const Var<T>& kappa) {
  const std::size_t d = model.config.d;
  if (sigma.rank() != 2 || kappa.rank() != 2 || sigma.shape() != kappa.shape() || sigma.shape()[1] != d)
    throw DimensionError("fuse_node: expected two [R x " + std::to_string(d) + "] inputs, got " +
                         to_string(sigma.shape()) + " and " + to_string(kappa.shape()));
  return model.fusion(tape, concat<T>({sigma, kappa}, 1));
}

/// φ_c = Σ of node rows whose category is c; invalid slots are skipped.
/// Returns [C x d]; categories without nodes give zero rows.
template <class T>
Var<T> aggregate_by_category(const Var<T>& nodes, std::span<const std::size_t> categories,
                             std::span<const bool> valid, std::size_t num_categories) {
  if (nodes.rank() != 2 || categories.size() != nodes.shape()[0] || valid.size() != categories.size())
    throw DimensionError("aggregate_by_category: " + std::to_string(categories.size()) + " categories for nodes " +
                         to_string(nodes.shape()));
  std::vector<std::ptrdiff_t> seg(categories.size());
  for (std::size_t i = 0; i < seg.size(); ++i)
    seg[i] = valid[i] && categories[i] < num_categories ? static_cast<std::ptrdiff_t>(categories[i]) : -1;
  return segment_sum(nodes, std::move(seg), num_categories);
}

/// Per category, MLP_Temp over its T frame features concatenated in time
/// order. The same weights serve every category. Returns [C x d'].
template <class T>
Var<T> temporal_reason(Tape<T>& tape, Backbone<T>& model, const std::vector<Var<T>>& per_frame) {
  const auto& cfg = model.config;
  if (per_frame.size() != cfg.T)
    throw DimensionError("temporal_reason: expected " + std::to_string(cfg.T) + " frames, got " +
                         std::to_string(per_frame.size()));
  for (const auto& f : per_frame)
    if (f.shape() != Shape{cfg.C, cfg.d})
      throw DimensionError("temporal_reason: frame feature " + to_string(f.shape()) + " is not [C x d]");
  return model.temporal(tape, concat(per_frame, 1));
}

/// φ_clip = MLP_Category(φ_1 || ... || φ_C). Returns [1 x d_clip].
template <class T>
Var<T> category_reason(Tape<T>& tape, Backbone<T>& model, const Var<T>& per_category) {
  const auto& cfg = model.config;
  if (per_category.shape() != Shape{cfg.C, cfg.temporal_width()})
    throw DimensionError("category_reason: expected [" + std::to_string(cfg.C) + "x" +
                         std::to_string(cfg.temporal_width()) + "], got " + to_string(per_category.shape()));
  return model.category(tape, reshape(per_category, {1, per_category.size()}));
}

/// Linear head over [B x d_clip] features (concatenated with [B x A]
/// appearance when fusion is enabled).
template <class T>
Var<T> classify(Tape<T>& tape, Backbone<T>& model, const Var<T>& clip_feature,
                const std::optional<Var<T>>& appearance = std::nullopt) {
  const auto& cfg = model.config;
  if (appearance && !cfg.fusion()) throw ConfigError("classify: appearance supplied but fusion is disabled");
  if (!appearance && cfg.fusion()) throw ConfigError("classify: fusion enabled but no appearance supplied");
  if (!appearance) return model.classifier(tape, clip_feature);
  if (appearance->rank() != 2 || appearance->shape()[0] != clip_feature.shape()[0] ||
      appearance->shape()[1] != cfg.appearance_dim)
    throw DimensionError("classify: appearance " + to_string(appearance->shape()) + " does not match");
  return model.classifier(tape, concat<T>({clip_feature, *appearance}, 1));
}

template <class T>
struct ForwardResult {
  Var<T> clip_features;  // [B x d_clip]
  Var<T> logits;         // [B x K]
};

/// Batched forward over clips. Only valid detections become nodes.
template <class T>
ForwardResult<T> forward(Tape<T>& tape, Backbone<T>& model, std::span<const Clip> clips,
                         Ablation ablation = Ablation::none) {
  const auto& cfg = model.config;
  const std::size_t B = clips.size();
  if (B == 0) throw ArgumentError("forward: empty batch");
  std::vector<T> boxes;
  std::vector<std::size_t> cats;
  std::vector<std::ptrdiff_t> seg;
  for (std::size_t b = 0; b < B; ++b) {
    const auto& clip = clips[b];
    if (clip.frames.size() != cfg.T)
      throw DimensionError("forward: clip has " + std::to_string(clip.frames.size()) + " frames, model expects " +
                           std::to_string(cfg.T));
    for (std::size_t t = 0; t < cfg.T; ++t) {
      for (const auto& det : clip.frames[t]) {
        if (!det.valid) continue;
        if (det.category >= cfg.C)
          throw RangeError("forward: category " + std::to_string(det.category) + " >= " + std::to_string(cfg.C));
        for (double v : det.box.as_vector()) boxes.push_back(static_cast<T>(v));
        cats.push_back(det.category);
        // output rows ordered (clip, category, frame) so that a reshape
        // yields each category's frames concatenated in time order
        seg.push_back(static_cast<std::ptrdiff_t>((b * cfg.C + det.category) * cfg.T + t));
      }
    }
  }
  const std::size_t rows = cats.size();
  const std::size_t groups = B * cfg.C * cfg.T;
  Var<T> aggregated;
  if (rows == 0) {
    aggregated = tape.zeros({groups, cfg.d});
  } else {
    Var<T> sigma = ablation == Ablation::no_spe
                       ? tape.zeros({rows, cfg.d})
                       : spatial_position_embed(tape, model, tape.constant({rows, 4}, std::move(boxes)));
    Var<T> kappa = ablation == Ablation::no_ce ? tape.zeros({rows, cfg.d}) : gather_rows(tape.param(model.embed), cats);
    aggregated = segment_sum(fuse_node(tape, model, sigma, kappa), std::move(seg), groups);
  }
  auto per_category = model.temporal(tape, reshape(aggregated, {B * cfg.C, cfg.T * cfg.d}));
  auto features = model.category(tape, reshape(per_category, {B, cfg.C * cfg.temporal_width()}));
  std::optional<Var<T>> appearance;
  if (cfg.fusion()) {
    std::vector<T> app;
    app.reserve(B * cfg.appearance_dim);
    for (const auto& clip : clips) {
      if (!clip.appearance || clip.appearance->size() != cfg.appearance_dim)
        throw ConfigError("forward: fusion needs a " + std::to_string(cfg.appearance_dim) +
                          "-dim appearance vector on every clip");
      for (double v : *clip.appearance) app.push_back(static_cast<T>(v));
    }
    appearance = tape.constant({B, cfg.appearance_dim}, std::move(app));
  }
  return {features, classify(tape, model, features, appearance)};
}

template <class T>
ForwardResult<T> forward(Tape<T>& tape, Backbone<T>& model, const Clip& clip, Ablation ablation = Ablation::none) {
  return forward(tape, model, std::span<const Clip>(&clip, 1), ablation);
}

inline constexpr const char* kBackboneKind = "stor2-backbone";

template <class T>
void save_backbone(const std::filesystem::path& path, Backbone<T>& model, const nlohmann::json& extra = {}) {
  nlohmann::json cfg = to_json(model.config);
  if (!extra.is_null()) cfg["extra"] = extra;
  save_checkpoint(path, kBackboneKind, cfg, model.parameters());
}

template <class T>
Backbone<T> load_backbone(const std::filesystem::path& path) {
  auto ck = load_checkpoint(path);
  if (ck.kind != kBackboneKind) throw CheckpointError("'" + path.string() + "' is a " + ck.kind + " checkpoint");
  Backbone<T> model(model_config_from_json(ck.config));
  apply_checkpoint(ck, model.parameters());
  return model;
}

}  // namespace stor2
