#pragma once

// Labeled-fraction sweep: for every (fraction, split) cell the two-stage
// pipeline is trained on a labeled subset of videos and scored frame-wise
// on a held-out set shared by all cells.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "stor2/features.hpp"
#include "stor2/train.hpp"

namespace stor2 {

struct SweepConfig {
  std::vector<double> fractions{0.02, 0.05, 0.10, 0.20, 1.0};
  std::size_t splits = 3;
  std::vector<SequenceInput> variants{SequenceInput::graph, SequenceInput::fusion, SequenceInput::appearance};
  double holdout = 0.2;
  std::size_t clips_per_run = 4;
  ModelConfig model;
  TrainConfig backbone_train;
  std::size_t gru_hidden = 64;
  TrainConfig gru_train;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

struct SweepRow {
  SequenceInput variant = SequenceInput::graph;
  double fraction = 0;
  std::size_t split = 0;
  double map = 0;
  double top1 = 0;
};

struct SweepSummary {
  SequenceInput variant;
  double fraction;
  double mean_map, std_map;
  double mean_top1;
  std::size_t n;
};

struct HeldOutSplit {
  std::vector<std::size_t> pool;      // indices eligible for labeling
  std::vector<std::size_t> held_out;  // never labeled
};

inline HeldOutSplit hold_out(std::size_t videos, double fraction, std::uint64_t seed) {
  auto [held, pool] = split_indices(videos, fraction, derive_seed(seed, 0x5eed));
  return {pool, held};
}

/// Indices into `split.pool` labeled in cell (fraction, split).
inline std::vector<std::size_t> labeled_subset(const HeldOutSplit& split, double fraction, std::size_t split_id,
                                               std::uint64_t seed) {
  auto chosen = split_indices(split.pool.size(), fraction, derive_seed(seed, 100 + split_id)).first;
  std::vector<std::size_t> out;
  for (auto i : chosen) out.push_back(split.pool[i]);
  return out;
}

namespace detail {

inline std::vector<VideoRecord> pick(const std::vector<VideoRecord>& videos, const std::vector<std::size_t>& idx) {
  std::vector<VideoRecord> out;
  for (auto i : idx) out.push_back(videos[i]);
  return out;
}

inline std::vector<SweepRow> run_cell(const std::vector<VideoRecord>& videos, const HeldOutSplit& split,
                                      const SweepConfig& cfg, double fraction, std::size_t split_id) {
  const auto labeled_idx = labeled_subset(split, fraction, split_id, cfg.seed);
  {
    const std::set<std::size_t> held(split.held_out.begin(), split.held_out.end());
    for (auto i : labeled_idx)
      if (held.count(i)) throw Error("sweep: held-out video " + std::to_string(i) + " leaked into a labeled subset");
  }
  const auto labeled = pick(videos, labeled_idx);
  const auto held_out = pick(videos, split.held_out);
  const ClipShape shape = cfg.model.clip_shape();
  const std::uint64_t cell_seed = derive_seed(cfg.seed, 1000 + split_id);

  std::vector<VideoFeatures> train_feats, test_feats;
  const bool need_graph = std::any_of(cfg.variants.begin(), cfg.variants.end(),
                                      [](SequenceInput v) { return v != SequenceInput::appearance; });
  if (need_graph) {
    ModelConfig mc = cfg.model;
    mc.appearance_dim = 0;
    Backbone<float> model(mc);
    model.init(derive_seed(cell_seed, 1));
    auto clips = sample_training_clips(labeled, shape, cfg.clips_per_run, derive_seed(cell_seed, 2));
    TrainConfig tc = cfg.backbone_train;
    tc.seed = derive_seed(cell_seed, 3);
    train_backbone(model, clips, tc);
    train_feats = extract_features(model, labeled, shape);
    test_feats = extract_features(model, held_out, shape);
  }

  std::vector<SweepRow> rows;
  for (auto variant : cfg.variants) {
    std::vector<SequenceSample<float>> train, test;
    for (std::size_t i = 0; i < labeled.size(); ++i)
      train.push_back(make_sequence_sample<float>(labeled[i], need_graph ? &train_feats[i] : nullptr, shape, variant));
    for (std::size_t i = 0; i < held_out.size(); ++i)
      test.push_back(make_sequence_sample<float>(held_out[i], need_graph ? &test_feats[i] : nullptr, shape, variant));
    Gru<float> gru({train.front().inputs.front().size(), cfg.gru_hidden, cfg.model.K});
    gru.init(derive_seed(cell_seed, 4));
    TrainConfig tc = cfg.gru_train;
    tc.seed = derive_seed(cell_seed, 5);
    train_sequence(gru, train, tc, shape);
    const auto m = evaluate(framewise_predictions(gru, test, shape));
    rows.push_back({variant, fraction, split_id, m.map.map, m.top1});
  }
  return rows;
}

}  // namespace detail

/// Runs every (fraction, split) cell, up to `jobs` at a time. Rows come back
/// sorted by (variant, fraction, split) regardless of completion order.
inline std::vector<SweepRow> run_data_efficiency_sweep(const std::vector<VideoRecord>& videos, const SweepConfig& cfg,
                                                       const std::function<void(const std::string&)>& progress = {}) {
  if (cfg.fractions.empty() || cfg.splits == 0 || cfg.variants.empty())
    throw ConfigError("sweep: need at least one fraction, split and variant");
  if (videos.size() < 2) throw ArgumentError("sweep: need at least two videos");
  const auto split = hold_out(videos.size(), cfg.holdout, cfg.seed);
  for (double f : cfg.fractions)
    if (f * static_cast<double>(split.pool.size()) < 1.0)
      throw ArgumentError("sweep: fraction " + std::to_string(f) + " of " + std::to_string(split.pool.size()) +
                          " labelable videos selects nothing");

  std::vector<std::pair<double, std::size_t>> cells;
  for (double f : cfg.fractions)
    for (std::size_t s = 0; s < cfg.splits; ++s) cells.emplace_back(f, s);

  std::vector<SweepRow> rows;
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < cells.size();) {
      {
        std::lock_guard lock(mu);
        if (failure) return;
      }
      try {
        auto cell = detail::run_cell(videos, split, cfg, cells[i].first, cells[i].second);
        std::lock_guard lock(mu);
        rows.insert(rows.end(), cell.begin(), cell.end());
        if (progress)
          progress("fraction " + std::to_string(cells[i].first) + " split " + std::to_string(cells[i].second) + " done");
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t jobs = std::clamp<std::size_t>(cfg.jobs, 1, cells.size());
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  std::sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    return std::tie(a.variant, a.fraction, a.split) < std::tie(b.variant, b.fraction, b.split);
  });
  return rows;
}

/// Mean and sample standard deviation per (variant, fraction).
inline std::vector<SweepSummary> summarize(const std::vector<SweepRow>& rows) {
  std::map<std::pair<SequenceInput, double>, std::vector<const SweepRow*>> groups;
  for (const auto& r : rows) groups[{r.variant, r.fraction}].push_back(&r);
  std::vector<SweepSummary> out;
  for (const auto& [key, members] : groups) {
    double m = 0, t = 0;
    for (const auto* r : members) {
      m += r->map;
      t += r->top1;
    }
    const double n = static_cast<double>(members.size());
    m /= n;
    t /= n;
    double var = 0;
    for (const auto* r : members) var += (r->map - m) * (r->map - m);
    const double sd = members.size() > 1 ? std::sqrt(var / (n - 1)) : 0.0;
    out.push_back({key.first, key.second, m, sd, t, members.size()});
  }
  return out;
}

inline std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// CSV with columns fraction, split, map, top1 for one variant.
inline std::string sweep_csv(const std::vector<SweepRow>& rows, SequenceInput variant) {
  std::string out = "fraction,split,map,top1\n";
  for (const auto& r : rows)
    if (r.variant == variant)
      out += format_number(r.fraction) + "," + std::to_string(r.split) + "," + format_number(r.map) + "," +
             format_number(r.top1) + "\n";
  return out;
}

inline std::vector<SweepRow> parse_sweep_csv(const std::string& text, SequenceInput variant) {
  std::vector<SweepRow> rows;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 || line.empty()) continue;
    SweepRow r;
    r.variant = variant;
    char c1, c2, c3;
    std::istringstream ls(line);
    if (!(ls >> r.fraction >> c1 >> r.split >> c2 >> r.map >> c3 >> r.top1) || c1 != ',' || c2 != ',' || c3 != ',')
      throw ParseError(lineno, "expected fraction,split,map,top1");
    rows.push_back(r);
  }
  return rows;
}

/// Line chart of mean mAP against labeled fraction (log x axis), one line
/// per variant, with ±1 std whiskers.
inline std::string sweep_svg(const std::vector<SweepSummary>& summary) {
  const double W = 640, H = 400, left = 70, right = 150, top = 30, bottom = 60;
  const double pw = W - left - right, ph = H - top - bottom;
  double fmin = 1, fmax = 0;
  for (const auto& s : summary) {
    fmin = std::min(fmin, s.fraction);
    fmax = std::max(fmax, s.fraction);
  }
  if (summary.empty()) fmin = 0.01, fmax = 1;
  const double lmin = std::log10(fmin), lmax = std::log10(fmax);
  auto x = [&](double f) { return lmax > lmin ? left + pw * (std::log10(f) - lmin) / (lmax - lmin) : left + pw / 2; };
  auto y = [&](double m) { return top + ph * (1.0 - std::clamp(m, 0.0, 1.0)); };
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

  std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(W) + "\" height=\"" + num(H) + "\" viewBox=\"0 0 " +
       num(W) + " " + num(H) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s += "<rect x=\"0\" y=\"0\" width=\"" + num(W) + "\" height=\"" + num(H) + "\" fill=\"white\"/>\n";
  s += "<line x1=\"" + num(left) + "\" y1=\"" + num(top + ph) + "\" x2=\"" + num(left + pw) + "\" y2=\"" +
       num(top + ph) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + num(left) + "\" y1=\"" + num(top) + "\" x2=\"" + num(left) + "\" y2=\"" + num(top + ph) +
       "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double v = i / 5.0;
    s += "<line x1=\"" + num(left - 4) + "\" y1=\"" + num(y(v)) + "\" x2=\"" + num(left) + "\" y2=\"" + num(y(v)) +
         "\" stroke=\"black\"/>\n";
    s += "<text x=\"" + num(left - 8) + "\" y=\"" + num(y(v) + 4) + "\" text-anchor=\"end\">" +
         std::to_string(i * 20) + "</text>\n";
  }
  std::set<double> fractions;
  for (const auto& r : summary) fractions.insert(r.fraction);
  for (double f : fractions) {
    char label[32];
    std::snprintf(label, sizeof label, "%g%%", f * 100);
    s += "<line x1=\"" + num(x(f)) + "\" y1=\"" + num(top + ph) + "\" x2=\"" + num(x(f)) + "\" y2=\"" +
         num(top + ph + 4) + "\" stroke=\"black\"/>\n";
    s += "<text x=\"" + num(x(f)) + "\" y=\"" + num(top + ph + 18) + "\" text-anchor=\"middle\">" + label + "</text>\n";
  }
  s += "<text x=\"" + num(left + pw / 2) + "\" y=\"" + num(H - 15) +
       "\" text-anchor=\"middle\">labeled fraction (log scale)</text>\n";
  s += "<text x=\"18\" y=\"" + num(top + ph / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 18 " +
       num(top + ph / 2) + ")\">frame-wise mAP (%)</text>\n";

  std::map<SequenceInput, std::vector<const SweepSummary*>> lines;
  for (const auto& r : summary) lines[r.variant].push_back(&r);
  std::size_t li = 0;
  for (const auto& [variant, pts] : lines) {
    const char* color = colors[li % 5];
    std::string path;
    for (const auto* p : pts) path += (path.empty() ? "" : " ") + num(x(p->fraction)) + "," + num(y(p->mean_map));
    s += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"2\" points=\"" + path + "\"/>\n";
    for (const auto* p : pts) {
      s += "<line x1=\"" + num(x(p->fraction)) + "\" y1=\"" + num(y(p->mean_map - p->std_map)) + "\" x2=\"" +
           num(x(p->fraction)) + "\" y2=\"" + num(y(p->mean_map + p->std_map)) + "\" stroke=\"" + color + "\"/>\n";
      s += "<circle cx=\"" + num(x(p->fraction)) + "\" cy=\"" + num(y(p->mean_map)) + "\" r=\"3\" fill=\"" + color +
           "\"/>\n";
    }
    const double ly = top + 10 + 20.0 * static_cast<double>(li);
    s += "<line x1=\"" + num(left + pw + 15) + "\" y1=\"" + num(ly) + "\" x2=\"" + num(left + pw + 40) + "\" y2=\"" +
         num(ly) + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    s += "<text x=\"" + num(left + pw + 46) + "\" y=\"" + num(ly + 4) + "\">" + to_string(variant) + "</text>\n";
    ++li;
  }
  s += "</svg>\n";
  return s;
}

}  // namespace stor2
