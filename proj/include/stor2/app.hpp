#pragma once

// Command-line front end. Every subcommand writes into its own output
// directory together with a manifest.json describing the run.
//
//   simulate  -> train.jsonl, val.jsonl, test.jsonl, sim_config.json
//   train     -> backbone.ckpt, train_log.jsonl, metrics.json (val clips)
//   extract   -> train/, val/, test/ feature stores
//   trainseq  -> gru.ckpt, train_log.jsonl
//   eval      -> metrics.json, confusion.csv (metrics JSON also on stdout)
//   sweep     -> sweep_<variant>.csv, sweep.svg, summary.json
//   report    -> report.txt, confusion.csv

#include <chrono>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "stor2/backbone.hpp"
#include "stor2/dataset_io.hpp"
#include "stor2/errors.hpp"
#include "stor2/features.hpp"
#include "stor2/io.hpp"
#include "stor2/log.hpp"
#include "stor2/metrics.hpp"
#include "stor2/orsim.hpp"
#include "stor2/sequence.hpp"
#include "stor2/sweep.hpp"
#include "stor2/train.hpp"

namespace stor2::app {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kVersion = "stor2 0.1.0";

enum ExitCode : int { ok = 0, failure = 1, config_error = 2, dependency_error = 3, io_error = 4 };

// ---------------------------------------------------------------------------
// Resolved configuration

struct AppConfig {
  std::uint64_t seed = 0;
  orsim::Config sim = orsim::default_config();
  std::vector<double> data_split{0.6, 0.2, 0.2};  // train / val / test share of --count
  std::size_t clips_per_run = 4;
  ModelConfig model = desk_model();
  TrainConfig train;
  std::size_t gru_hidden = 64;
  TrainConfig seq_train = default_seq_train();
  SweepConfig sweep = default_sweep();

  static ModelConfig desk_model() {
    ModelConfig m;
    m.d = 128;
    return m;
  }
  static TrainConfig default_seq_train() {
    TrainConfig t;
    t.batch = 4;
    t.epochs = 40;
    t.warmup_epochs = 4;
    t.min_steps = 200;
    return t;
  }
  static SweepConfig default_sweep() {
    SweepConfig s;
    s.model = desk_model();
    s.model.d = 64;
    s.backbone_train.epochs = 20;
    s.backbone_train.warmup_epochs = 2;
    s.backbone_train.min_steps = 300;
    s.gru_train = default_seq_train();
    return s;
  }
};

inline json sweep_to_json(const SweepConfig& s) {
  std::vector<std::string> variants;
  for (auto v : s.variants) variants.push_back(to_string(v));
  return {{"fractions", s.fractions},       {"splits", s.splits},
          {"variants", variants},           {"holdout", s.holdout},
          {"clips_per_run", s.clips_per_run}, {"model", to_json(s.model)},
          {"backbone_train", to_json(s.backbone_train)}, {"gru_hidden", s.gru_hidden},
          {"gru_train", to_json(s.gru_train)}, {"jobs", s.jobs}};
}

inline json to_json(const AppConfig& c) {
  return {{"seed", c.seed},
          {"sim", orsim::to_json(c.sim)},
          {"data", {{"split", c.data_split}, {"clips_per_run", c.clips_per_run}}},
          {"model", stor2::to_json(c.model)},
          {"train", stor2::to_json(c.train)},
          {"sequence", {{"hidden", c.gru_hidden}, {"train", stor2::to_json(c.seq_train)}}},
          {"sweep", sweep_to_json(c.sweep)}};
}

namespace detail {

template <class U>
U field(const json& j, const char* key, const std::string& path, U fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<U>();
  } catch (const json::exception&) {
    throw ConfigError(path + "." + key + ": wrong type");
  }
}

inline void check_keys(const json& j, const std::string& path, std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    bool found = false;
    for (const char* n : known) found |= k == n;
    if (!found) throw ConfigError(path + "." + k + ": unknown key");
  }
}

}  // namespace detail

/// Overlays a config file onto the defaults.
inline AppConfig app_config_from_json(const json& j, AppConfig c = {}) {
  using detail::field;
  detail::check_keys(j, "config", {"seed", "sim", "data", "model", "train", "sequence", "sweep"});
  c.seed = field<std::uint64_t>(j, "seed", "config", c.seed);
  if (j.contains("sim")) c.sim = orsim::config_from_json(j.at("sim"));
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::check_keys(d, "config.data", {"split", "clips_per_run"});
    c.data_split = field(d, "split", "config.data", c.data_split);
    c.clips_per_run = field(d, "clips_per_run", "config.data", c.clips_per_run);
  }
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"), c.model);
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"), c.train);
  if (j.contains("sequence")) {
    const auto& s = j.at("sequence");
    detail::check_keys(s, "config.sequence", {"hidden", "train"});
    c.gru_hidden = field(s, "hidden", "config.sequence", c.gru_hidden);
    if (s.contains("train")) c.seq_train = train_config_from_json(s.at("train"), c.seq_train);
  }
  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    detail::check_keys(s, "config.sweep",
                       {"fractions", "splits", "variants", "holdout", "clips_per_run", "model", "backbone_train",
                        "gru_hidden", "gru_train", "jobs"});
    auto& w = c.sweep;
    w.fractions = field(s, "fractions", "config.sweep", w.fractions);
    w.splits = field(s, "splits", "config.sweep", w.splits);
    if (s.contains("variants")) {
      w.variants.clear();
      for (const auto& v : field<std::vector<std::string>>(s, "variants", "config.sweep", {}))
        w.variants.push_back(parse_sequence_input(v));
    }
    w.holdout = field(s, "holdout", "config.sweep", w.holdout);
    w.clips_per_run = field(s, "clips_per_run", "config.sweep", w.clips_per_run);
    if (s.contains("model")) w.model = model_config_from_json(s.at("model"), w.model);
    if (s.contains("backbone_train")) w.backbone_train = train_config_from_json(s.at("backbone_train"), w.backbone_train);
    w.gru_hidden = field(s, "gru_hidden", "config.sweep", w.gru_hidden);
    if (s.contains("gru_train")) w.gru_train = train_config_from_json(s.at("gru_train"), w.gru_train);
    w.jobs = field(s, "jobs", "config.sweep", w.jobs);
  }
  return c;
}

inline void validate(const AppConfig& c) {
  if (c.data_split.size() != 3) throw ConfigError("config.data.split: expected [train, val, test]");
  double total = 0;
  for (double s : c.data_split) {
    if (s < 0) throw ConfigError("config.data.split: shares must be non-negative");
    total += s;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("config.data.split: shares must sum to 1");
  if (c.clips_per_run == 0) throw ConfigError("config.data.clips_per_run: must be positive");
  if (c.model.T != c.sim.shape.T || c.model.N != c.sim.shape.N || c.model.C != c.sim.shape.C)
    throw ConfigError("config.model: T/N/C must match the simulator (" + std::to_string(c.sim.shape.T) + "/" +
                      std::to_string(c.sim.shape.N) + "/" + std::to_string(c.sim.shape.C) + ")");
  if (c.model.K != c.sim.classes()) throw ConfigError("config.model.K: must equal the number of activities");
  if (c.gru_hidden == 0) throw ConfigError("config.sequence.hidden: must be positive");
  c.train.validate();
  c.seq_train.validate();
}

/// Sets the epoch count and keeps the warmup share of the run.
inline void override_epochs(TrainConfig& t, std::size_t epochs) {
  if (epochs == 0 || epochs == t.epochs) {
    t.epochs = epochs;
    return;
  }
  t.warmup_epochs = std::clamp<std::size_t>(t.warmup_epochs * epochs / t.epochs, 1, epochs);
  t.epochs = epochs;
}

// ---------------------------------------------------------------------------
// Run plumbing

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  std::optional<std::size_t> T, d;
  int verbose = 0;
};

class Run {
 public:
  Run(std::string command, const Options& opt, std::vector<std::string> argv)
      : command_(std::move(command)), opt_(opt), argv_(std::move(argv)), start_(std::chrono::steady_clock::now()) {}

  /// Creates the output directory, refusing to reuse a non-empty one
  /// unless --force was given.
  fs::path prepare_output(const std::string& fallback = "") {
    const fs::path dir = opt_.out.empty() ? fs::path(fallback) : fs::path(opt_.out);
    if (dir.empty()) throw ConfigError(command_ + ": --out is required");
    std::error_code ec;
    if (fs::exists(dir, ec) && !fs::is_empty(dir, ec) && !opt_.force)
      throw IoError("output directory '" + dir.string() + "' is not empty (use --force to overwrite)");
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory '" + dir.string() + "'");
    out_ = dir;
    return dir;
  }

  void input(const fs::path& p) {
    if (fs::is_regular_file(p)) inputs_[p.string()] = io::hash_file(p);
  }

  void write(const std::string& name, std::string_view bytes) {
    io::write_file_atomic(out_ / name, bytes);
    outputs_[name] = io::fnv1a_hex(bytes);
  }

  /// Registers a file written by someone else under the output dir.
  void record(const fs::path& rel) { outputs_[rel.generic_string()] = io::hash_file(out_ / rel); }

  void finish(const json& config, std::uint64_t seed, const json& extra = json::object()) {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    json m{{"command", command_}, {"argv", argv_}, {"version", kVersion}, {"config", config},
           {"seed", seed},        {"inputs", inputs_}, {"outputs", outputs_}, {"wall_clock_seconds", secs}};
    for (const auto& [k, v] : extra.items()) m[k] = v;
    io::write_file_atomic(out_ / "manifest.json", m.dump(2) + "\n");
  }

  const fs::path& out() const { return out_; }

 private:
  std::string command_;
  Options opt_;
  std::vector<std::string> argv_;
  std::chrono::steady_clock::time_point start_;
  fs::path out_;
  std::map<std::string, std::string> inputs_, outputs_;
};

inline AppConfig resolve_config(const Options& opt) {
  AppConfig c;
  if (!opt.config_path.empty()) {
    json j;
    try {
      j = json::parse(io::read_file(opt.config_path));
    } catch (const json::parse_error& e) {
      throw ConfigError("config file '" + opt.config_path + "': " + e.what());
    }
    c = app_config_from_json(j, c);
  }
  if (opt.seed) c.seed = *opt.seed;
  if (opt.T) {
    c.sim.shape.T = *opt.T;
    c.model.T = *opt.T;
    c.sweep.model.T = *opt.T;
  }
  if (opt.d) c.model.d = *opt.d;
  validate(c);
  return c;
}

inline std::vector<VideoRecord> load_split(const fs::path& data, const std::string& split, Run& run,
                                           const AppConfig& cfg) {
  const auto path = data / (split + ".jsonl");
  if (!fs::exists(path))
    throw DependencyError("dataset '" + path.string() + "' not found (run `stor2 simulate` first)");
  run.input(path);
  return load_dataset(path, {cfg.sim.categories.size(), cfg.sim.classes()});
}

/// A run directory or a checkpoint file inside one.
inline fs::path checkpoint_path(const std::string& given, const char* file, const char* stage) {
  if (given.empty()) throw ConfigError(std::string("--model is required"));
  fs::path p = given;
  if (fs::is_directory(p)) p /= file;
  if (!fs::exists(p))
    throw DependencyError("checkpoint '" + p.string() + "' not found (run `stor2 " + stage + "` first)");
  return p;
}

/// Keeps round(fraction * n) videos (all when fraction == 1).
inline std::vector<VideoRecord> labeled_fraction(const std::vector<VideoRecord>& videos, double fraction,
                                                 std::uint64_t seed) {
  if (fraction >= 1.0 || videos.empty()) return videos;
  return split_labeled_fraction(videos, fraction, derive_seed(seed, 0xf4ac)).first;
}

inline std::string metrics_file(const Metrics& m, const std::vector<std::string>& names, const json& extra = {}) {
  json j = to_json(m);
  j["classes"] = names;
  for (const auto& [k, v] : extra.items()) j[k] = v;
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Commands

inline int cmd_simulate(const Options& opt, std::optional<std::size_t> count, const std::vector<std::string>& argv,
                        std::ostream& out) {
  const auto cfg = resolve_config(opt);
  Run run("simulate", opt, argv);
  run.prepare_output();
  const std::size_t n = count.value_or(60);
  const auto val = static_cast<std::size_t>(std::llround(cfg.data_split[1] * static_cast<double>(n)));
  const auto test = static_cast<std::size_t>(std::llround(cfg.data_split[2] * static_cast<double>(n)));
  const std::size_t train = n - std::min(n, val + test);
  const std::pair<const char*, std::size_t> parts[] = {{"train", train}, {"val", val}, {"test", test}};
  std::uint64_t stream = 1;
  for (const auto& [name, k] : parts) {
    auto videos = orsim::generate_procedures(cfg.sim, k, derive_seed(cfg.seed, stream++));
    for (auto& v : videos) v.id = std::string(name) + v.id.substr(v.id.find('-'));
    run.write(std::string(name) + ".jsonl", serialize_dataset(videos));
    out << name << ": " << videos.size() << " procedures\n";
  }
  run.write("sim_config.json", orsim::to_json(cfg.sim).dump(2) + "\n");
  run.finish(to_json(cfg), cfg.seed, {{"counts", {{"train", train}, {"val", val}, {"test", test}}}});
  return ok;
}

struct TrainOptions {
  std::string data;
  std::string ablate = "none";
  bool fusion = false;
  double fraction = 1.0;
  std::optional<std::size_t> epochs;
};

inline int cmd_train(const Options& opt, const TrainOptions& to, const std::vector<std::string>& argv,
                     std::ostream& out) {
  auto cfg = resolve_config(opt);
  const auto ablation = parse_ablation(to.ablate);
  if (!(to.fraction > 0 && to.fraction <= 1)) throw ConfigError("--fraction: must be in (0, 1]");
  if (to.epochs) override_epochs(cfg.train, *to.epochs);
  if (to.fusion) cfg.model.appearance_dim = cfg.sim.appearance.dim;
  if (to.fusion && cfg.model.appearance_dim == 0) throw ConfigError("--fusion: simulator has no appearance vectors");
  if (to.data.empty()) throw ConfigError("train: --data is required");
  Run run("train", opt, argv);
  const fs::path data = to.data;
  const auto train_videos = labeled_fraction(load_split(data, "train", run, cfg), to.fraction, cfg.seed);
  const auto val_videos = load_split(data, "val", run, cfg);
  run.prepare_output();

  const ClipShape shape = cfg.model.clip_shape();
  const auto train_clips = sample_training_clips(train_videos, shape, cfg.clips_per_run, derive_seed(cfg.seed, 2));
  const auto val_clips = sample_training_clips(val_videos, shape, cfg.clips_per_run, derive_seed(cfg.seed, 3));
  Backbone<float> model(cfg.model);
  model.init(derive_seed(cfg.seed, 1));
  std::vector<EpochLog> history;
  if (cfg.train.epochs > 0) {
    if (train_clips.empty()) throw ArgumentError("train: no training clips (empty dataset?)");
    cfg.train.validate();
    TrainConfig tc = cfg.train;
    tc.seed = derive_seed(cfg.seed, 4);
    history = train_backbone(model, train_clips, tc, ablation, nullptr, [&](const EpochLog& e) {
      log::info("epoch ", e.epoch, " loss ", e.loss, " lr ", e.lr);
    });
  }
  const json extra{{"ablation", to_string(ablation)}, {"fraction", to.fraction}, {"seed", cfg.seed}};
  save_backbone(run.out() / "backbone.ckpt", model, extra);
  run.record("backbone.ckpt");
  run.write("train_log.jsonl", to_jsonl(history));
  if (!val_clips.empty()) {
    const auto m = evaluate(predict_clips(model, val_clips, ablation));
    run.write("metrics.json", metrics_file(m, cfg.sim.activities, {{"split", "val"}, {"level", "clip"}}));
    out << "val top1 " << m.top1 << " map " << m.map.map << "\n";
  }
  json resolved = to_json(cfg);
  resolved["run"] = extra;
  run.finish(resolved, cfg.seed);
  return ok;
}

inline int cmd_extract(const Options& opt, const std::string& data_dir, const std::string& model_dir,
                       const std::vector<std::string>& argv, std::ostream& out) {
  const auto cfg = resolve_config(opt);
  if (data_dir.empty()) throw ConfigError("extract: --data is required");
  Run run("extract", opt, argv);
  const auto ckpt = checkpoint_path(model_dir, "backbone.ckpt", "train");
  run.input(ckpt);
  auto model = load_backbone<float>(ckpt);
  std::vector<std::pair<std::string, std::vector<VideoRecord>>> splits;
  for (const char* s : {"train", "val", "test"}) splits.emplace_back(s, load_split(data_dir, s, run, cfg));
  run.prepare_output();
  const json provenance{{"checkpoint", ckpt.string()}, {"checkpoint_hash", io::hash_file(ckpt)}};
  for (const auto& [name, videos] : splits) {
    const auto store = extract_features(model, videos, model.config.clip_shape());
    save_feature_store(run.out() / name, store, provenance);
    run.record(fs::path(name) / "features.json");
    for (std::size_t i = 0; i < store.size(); ++i) run.record(fs::path(name) / feature_file_name(i));
    out << name << ": " << store.size() << " videos\n";
  }
  run.finish(to_json(cfg), cfg.seed, {{"model_config", to_json(model.config)}});
  return ok;
}

inline std::vector<SequenceSample<float>> sequence_samples(const std::vector<VideoRecord>& videos,
                                                           const std::vector<VideoFeatures>* features,
                                                           const ClipShape& shape, SequenceInput variant) {
  std::map<std::string, const VideoFeatures*> by_id;
  if (features)
    for (const auto& f : *features) by_id[f.id] = &f;
  std::vector<SequenceSample<float>> out;
  for (const auto& v : videos) {
    const VideoFeatures* f = nullptr;
    if (variant != SequenceInput::appearance) {
      auto it = by_id.find(v.id);
      if (it == by_id.end())
        throw DependencyError("no features for video '" + v.id + "' (rerun `stor2 extract` on this dataset)");
      f = it->second;
    }
    out.push_back(make_sequence_sample<float>(v, f, shape, variant));
  }
  return out;
}

inline std::vector<VideoFeatures> load_features_for(const std::string& dir, const std::string& split,
                                                    SequenceInput variant, Run& run) {
  if (variant == SequenceInput::appearance) return {};
  if (dir.empty()) throw DependencyError("variant '" + to_string(variant) + "' needs --features (run `stor2 extract` first)");
  const fs::path p = fs::path(dir) / split;
  run.input(p / "features.json");
  return load_feature_store(p);
}

struct SeqOptions {
  std::string data, features, variant = "graph";
  double fraction = 1.0;
  std::optional<std::size_t> epochs, hidden;
};

inline int cmd_trainseq(const Options& opt, const SeqOptions& so, const std::vector<std::string>& argv,
                        std::ostream& out) {
  auto cfg = resolve_config(opt);
  const auto variant = parse_sequence_input(so.variant);
  if (so.epochs) override_epochs(cfg.seq_train, *so.epochs);
  if (so.hidden) cfg.gru_hidden = *so.hidden;
  cfg.seq_train.validate();
  if (so.data.empty()) throw ConfigError("trainseq: --data is required");
  Run run("trainseq", opt, argv);
  const auto videos = labeled_fraction(load_split(so.data, "train", run, cfg), so.fraction, cfg.seed);
  const auto feats = load_features_for(so.features, "train", variant, run);
  run.prepare_output();
  const ClipShape shape = cfg.sim.shape;
  const auto samples = sequence_samples(videos, &feats, shape, variant);
  if (samples.empty()) throw ArgumentError("trainseq: no training videos");
  Gru<float> gru({samples.front().inputs.front().size(), cfg.gru_hidden, cfg.sim.classes()});
  gru.init(derive_seed(cfg.seed, 5));
  TrainConfig tc = cfg.seq_train;
  tc.seed = derive_seed(cfg.seed, 6);
  auto history = train_sequence(gru, samples, tc, shape,
                                [&](const EpochLog& e) { log::info("epoch ", e.epoch, " loss ", e.loss); });
  const json extra{{"variant", to_string(variant)}, {"fraction", so.fraction}};
  save_gru(run.out() / "gru.ckpt", gru, extra);
  run.record("gru.ckpt");
  run.write("train_log.jsonl", to_jsonl(history));
  out << "final loss " << (history.empty() ? 0.0 : history.back().loss) << "\n";
  json resolved = to_json(cfg);
  resolved["run"] = extra;
  run.finish(resolved, cfg.seed);
  return ok;
}

struct EvalOptions {
  std::string data, model, features, split = "test";
  bool one_hot_baseline = false;
};

inline int cmd_eval(const Options& opt, const EvalOptions& eo, const std::vector<std::string>& argv,
                    std::ostream& out) {
  const auto cfg = resolve_config(opt);
  if (eo.data.empty()) throw ConfigError("eval: --data is required");
  if (eo.split != "train" && eo.split != "val" && eo.split != "test")
    throw ConfigError("--split: expected train, val or test");
  Run run("eval", opt, argv);
  const auto videos = load_split(eo.data, eo.split, run, cfg);
  if (videos.empty()) throw ArgumentError("eval: split '" + eo.split + "' is empty");
  fs::path model_path = eo.model;
  const bool gru = fs::is_directory(model_path) ? fs::exists(model_path / "gru.ckpt")
                                                 : model_path.filename() == "gru.ckpt";
  Metrics m;
  json extra{{"split", eo.split}};
  if (gru) {
    const auto ckpt = checkpoint_path(eo.model, "gru.ckpt", "trainseq");
    run.input(ckpt);
    auto ck = load_checkpoint(ckpt);
    const auto variant = parse_sequence_input(ck.config.value("extra", json::object()).value("variant", "graph"));
    auto net = load_gru<float>(ckpt);
    const auto feats = load_features_for(eo.features, eo.split, variant, run);
    run.prepare_output();
    const auto samples = sequence_samples(videos, &feats, cfg.sim.shape, variant);
    m = evaluate(framewise_predictions(net, samples, cfg.sim.shape));
    extra["level"] = "frame";
    extra["variant"] = to_string(variant);
  } else {
    const auto ckpt = checkpoint_path(eo.model, "backbone.ckpt", "train");
    run.input(ckpt);
    auto ck = load_checkpoint(ckpt);
    const auto ablation = parse_ablation(ck.config.value("extra", json::object()).value("ablation", "none"));
    auto model = load_backbone<float>(ckpt);
    run.prepare_output();
    const ClipShape shape = model.config.clip_shape();
    if (eo.one_hot_baseline) {
      m = evaluate(per_clip_framewise(model, videos, shape, true));
      extra["level"] = "frame";
      extra["baseline"] = "per-clip-argmax";
    } else {
      const auto clips = sample_training_clips(videos, shape, cfg.clips_per_run, derive_seed(cfg.seed, 7));
      m = evaluate(predict_clips(model, clips, ablation));
      extra["level"] = "clip";
      extra["ablation"] = to_string(ablation);
    }
  }
  const auto text = metrics_file(m, cfg.sim.activities, extra);
  run.write("metrics.json", text);
  run.write("confusion.csv", confusion_csv(normalize_rows(m.confusion), cfg.sim.activities));
  out << text;
  run.finish(to_json(cfg), cfg.seed);
  return ok;
}

struct SweepOptions {
  std::string data;
  std::vector<double> fractions;
  std::optional<std::size_t> splits, jobs;
  std::vector<std::string> variants;
};

inline int cmd_sweep(const Options& opt, const SweepOptions& so, const std::vector<std::string>& argv,
                     std::ostream& out) {
  auto cfg = resolve_config(opt);
  auto sc = cfg.sweep;
  sc.seed = cfg.seed;
  if (!so.fractions.empty()) sc.fractions = so.fractions;
  if (so.splits) sc.splits = *so.splits;
  if (so.jobs) sc.jobs = *so.jobs;
  if (!so.variants.empty()) {
    sc.variants.clear();
    for (const auto& v : so.variants) sc.variants.push_back(parse_sequence_input(v));
  }
  for (double f : sc.fractions)
    if (!(f > 0 && f <= 1)) throw ConfigError("--fraction: values must be in (0, 1]");
  if (so.data.empty()) throw ConfigError("sweep: --data is required");
  Run run("sweep", opt, argv);
  std::vector<VideoRecord> videos;
  for (const char* s : {"train", "val", "test"}) {
    auto part = load_split(so.data, s, run, cfg);
    videos.insert(videos.end(), part.begin(), part.end());
  }
  run.prepare_output();
  const auto rows = run_data_efficiency_sweep(videos, sc, [&](const std::string& m) { log::info(m); });
  for (auto v : sc.variants) run.write("sweep_" + to_string(v) + ".csv", sweep_csv(rows, v));
  const auto summary = summarize(rows);
  run.write("sweep.svg", sweep_svg(summary));
  json js = json::array();
  for (const auto& s : summary) {
    js.push_back({{"variant", to_string(s.variant)}, {"fraction", s.fraction}, {"mean_map", s.mean_map},
                  {"std_map", s.std_map}, {"mean_top1", s.mean_top1}, {"n", s.n}});
    out << std::left << std::setw(11) << to_string(s.variant) << " " << std::setw(6) << s.fraction << " mAP "
        << std::fixed << std::setprecision(2) << 100 * s.mean_map << " +- " << 100 * s.std_map << "\n"
        << std::defaultfloat;
  }
  run.write("summary.json", js.dump(2) + "\n");
  json resolved = to_json(cfg);
  resolved["sweep"] = sweep_to_json(sc);
  run.finish(resolved, cfg.seed);
  return ok;
}

// ---------------------------------------------------------------------------
// report

namespace detail {

inline std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100 * v);
  return buf;
}

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  double m = 0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double v = 0;
  for (double x : xs) v += (x - m) * (x - m);
  return {m, xs.size() > 1 ? std::sqrt(v / static_cast<double>(xs.size() - 1)) : 0.0};
}

inline std::string table(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (width.size() <= i) width.push_back(0);
      width[i] = std::max(width[i], r[i].size());
    }
  std::string out;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    for (std::size_t i = 0; i < rows[k].size(); ++i) {
      out += rows[k][i];
      if (i + 1 < rows[k].size()) out += std::string(width[i] - rows[k][i].size() + 2, ' ');
    }
    out += '\n';
    if (k == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      out += std::string(total - 2, '-') + '\n';
    }
  }
  return out;
}

}  // namespace detail

inline int cmd_report(const Options& opt, const std::vector<std::string>& inputs, const std::vector<std::string>& argv,
                      std::ostream& out) {
  if (inputs.empty()) throw ConfigError("report: give at least one metrics.json or sweep CSV");
  Run run("report", opt, argv);
  std::vector<std::pair<std::string, json>> metrics;
  std::vector<std::pair<std::string, std::string>> sweeps;
  for (const auto& in : inputs) {
    fs::path p = in;
    if (fs::is_directory(p)) p /= "metrics.json";
    if (!fs::exists(p)) throw IoError("report: '" + p.string() + "' does not exist");
    run.input(p);
    if (p.extension() == ".csv") {
      sweeps.emplace_back(p.stem().string(), io::read_file(p));
    } else {
      try {
        metrics.emplace_back(p.string(), json::parse(io::read_file(p)));
      } catch (const json::exception& e) {
        throw ParseError(1, "report: '" + p.string() + "': " + e.what());
      }
    }
  }
  std::string text;
  std::optional<ConfusionMatrix> pooled;
  std::vector<std::string> names;
  if (!metrics.empty()) {
    std::vector<std::vector<std::string>> rows{{"run", "top1 (%)", "mAP (%)", "items"}};
    std::vector<double> top1, map;
    for (const auto& [name, j] : metrics) {
      top1.push_back(j.at("top1").get<double>());
      map.push_back(j.at("map").get<double>());
      rows.push_back({name, detail::pct(top1.back()), detail::pct(map.back()), std::to_string(j.value("items", 0))});
      if (j.contains("confusion")) {
        auto c = j.at("confusion").get<ConfusionMatrix>();
        if (!pooled) {
          pooled = c;
        } else if (pooled->size() == c.size()) {
          for (std::size_t r = 0; r < c.size(); ++r)
            for (std::size_t k = 0; k < c[r].size(); ++k) (*pooled)[r][k] += c[r][k];
        }
      }
      if (names.empty() && j.contains("classes")) names = j.at("classes").get<std::vector<std::string>>();
    }
    if (metrics.size() > 1) {
      auto [mt, st] = detail::mean_std(top1);
      auto [mm, sm] = detail::mean_std(map);
      rows.push_back({"mean +- std", detail::pct(mt) + " +- " + detail::pct(st), detail::pct(mm) + " +- " + detail::pct(sm),
                      ""});
    }
    text += detail::table(rows);
  }
  for (const auto& [name, csv] : sweeps) {
    const auto parsed = parse_sweep_csv(csv, SequenceInput::graph);
    std::map<double, std::vector<double>> by_fraction;
    for (const auto& r : parsed) by_fraction[r.fraction].push_back(r.map);
    std::vector<std::vector<std::string>> rows{{name + " fraction (%)", "mAP (%) mean +- std", "splits"}};
    for (const auto& [f, maps] : by_fraction) {
      auto [m, s] = detail::mean_std(maps);
      char fbuf[32];
      std::snprintf(fbuf, sizeof fbuf, "%g", 100 * f);
      rows.push_back({fbuf, detail::pct(m) + " +- " + detail::pct(s), std::to_string(maps.size())});
    }
    if (!text.empty()) text += '\n';
    text += detail::table(rows);
  }
  out << text;
  if (!opt.out.empty()) {
    run.prepare_output();
    run.write("report.txt", text);
    if (pooled) run.write("confusion.csv", confusion_csv(normalize_rows(*pooled), names));
    run.finish(json{{"inputs", inputs}}, 0);
  }
  return ok;
}

// ---------------------------------------------------------------------------
// Entry point

/// Parses `args` (without the program name) and runs one subcommand.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App cli{"Object-centric activity recognition on operating-room detection streams", "stor2"};
  cli.require_subcommand(1);
  cli.set_version_flag("--version", kVersion);
  Options opt;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "JSON config file (defaults < file < flags)");
    sub->add_option("--seed", opt.seed, "Base seed");
    sub->add_option("--out", opt.out, "Output directory");
    sub->add_flag("--force", opt.force, "Overwrite a non-empty output directory");
    sub->add_option("--T", opt.T, "Frames per clip");
    sub->add_option("--d", opt.d, "Backbone embedding width");
    sub->add_flag("-v,--verbose", opt.verbose, "More logging (repeatable)");
  };

  std::optional<std::size_t> count;
  auto* simulate = cli.add_subcommand("simulate", "Generate synthetic procedure datasets");
  common(simulate);
  simulate->add_option("--count", count, "Total procedures across train/val/test (default 60)");

  TrainOptions to;
  auto* train = cli.add_subcommand("train", "Train the clip backbone");
  common(train);
  train->add_option("--data", to.data, "Dataset directory")->required();
  train->add_option("--ablate", to.ablate, "none, no-spe or no-ce");
  train->add_flag("--fusion", to.fusion, "Late fusion with appearance vectors");
  train->add_option("--fraction", to.fraction, "Labeled fraction of training videos");
  train->add_option("--epochs", to.epochs, "Override train.epochs (0 saves the initial weights)");

  std::string ex_data, ex_model;
  auto* extract = cli.add_subcommand("extract", "Write per-position clip features");
  common(extract);
  extract->add_option("--data", ex_data, "Dataset directory")->required();
  extract->add_option("--model", ex_model, "Backbone run directory or checkpoint")->required();

  SeqOptions so;
  auto* trainseq = cli.add_subcommand("trainseq", "Train the GRU sequence head");
  common(trainseq);
  trainseq->add_option("--data", so.data, "Dataset directory")->required();
  trainseq->add_option("--features", so.features, "Feature directory from extract");
  trainseq->add_option("--variant", so.variant, "graph, fusion or appearance");
  trainseq->add_option("--fraction", so.fraction, "Labeled fraction of training videos");
  trainseq->add_option("--epochs", so.epochs, "Override sequence.train.epochs");
  trainseq->add_option("--hidden", so.hidden, "GRU hidden size");

  EvalOptions eo;
  auto* eval = cli.add_subcommand("eval", "Evaluate a backbone (clips) or GRU (frames)");
  common(eval);
  eval->add_option("--data", eo.data, "Dataset directory")->required();
  eval->add_option("--model", eo.model, "Run directory or checkpoint")->required();
  eval->add_option("--features", eo.features, "Feature directory (GRU graph/fusion variants)");
  eval->add_option("--split", eo.split, "train, val or test");
  eval->add_flag("--per-clip-baseline", eo.one_hot_baseline, "Frame-wise scores from per-clip argmax");

  SweepOptions sw;
  auto* sweep = cli.add_subcommand("sweep", "Data-efficiency sweep over labeled fractions");
  common(sweep);
  sweep->add_option("--data", sw.data, "Dataset directory")->required();
  sweep->add_option("--fraction", sw.fractions, "Labeled fractions")->delimiter(',');
  sweep->add_option("--splits", sw.splits, "Random splits per fraction");
  sweep->add_option("--variant", sw.variants, "Sequence inputs to compare")->delimiter(',');
  sweep->add_option("--jobs", sw.jobs, "Cells run in parallel");

  std::vector<std::string> inputs;
  auto* report = cli.add_subcommand("report", "Tabulate metrics files or sweep CSVs");
  common(report);
  report->add_option("inputs", inputs, "metrics.json files, run directories or sweep CSVs");

  std::vector<std::string> argv{"stor2"};
  argv.insert(argv.end(), args.begin(), args.end());
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    cli.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << cli.help();
    return ok;
  } catch (const CLI::CallForAllHelp&) {
    out << cli.help("", CLI::AppFormatMode::All);
    return ok;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "stor2: " << e.what() << "\n";
    for (auto* sub : cli.get_subcommands()) err << sub->help();
    return config_error;
  }
  log::set_level(opt.verbose >= 2 ? log::Level::debug : opt.verbose == 1 ? log::Level::info : log::Level::warn);

  try {
    if (*simulate) return cmd_simulate(opt, count, argv, out);
    if (*train) return cmd_train(opt, to, argv, out);
    if (*extract) return cmd_extract(opt, ex_data, ex_model, argv, out);
    if (*trainseq) return cmd_trainseq(opt, so, argv, out);
    if (*eval) return cmd_eval(opt, eo, argv, out);
    if (*sweep) return cmd_sweep(opt, sw, argv, out);
    if (*report) return cmd_report(opt, inputs, argv, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const DependencyError& e) {
    err << "missing input: " << e.what() << "\n";
    return dependency_error;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return io_error;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return failure;
  }
  return failure;
}

}  // namespace stor2::app
