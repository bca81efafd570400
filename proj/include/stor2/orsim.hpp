#pragma once

// Synthetic operating-room scenes: scripted bounding-box trajectories for
// nine activities, a phase chain for full procedures, a detector-noise
// model, and optional activity-conditioned appearance vectors.
//
// Every generator is a pure function of (config, rng state).

#include <algorithm>
#include <array>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <queue>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "stor2/errors.hpp"
#include "stor2/rng.hpp"
#include "stor2/scene.hpp"

namespace stor2::orsim {

inline const std::vector<std::string>& default_activity_names() {
  static const std::vector<std::string> names = {
      "sterile-prep", "patient-roll-in", "patient-prep",    "robot-roll-up",   "docking",
      "surgery",      "undocking",       "robot-roll-back", "patient-roll-out"};
  return names;
}

/// Per-class detector mAP (IoU 0.5:0.95, %) of the reference detector, in
/// CategoryTable order.
inline constexpr std::array<double, 6> kDetectorMap = {79.3, 65.4, 57.4, 70.2, 46.4, 69.7};

struct Point {
  double x = 0, y = 0;
};

/// Gaussian placement around a point.
struct Region {
  Point at;
  double spread = 0;
};

/// One category's behavior in an activity: `count` instances spawned in
/// `start`, moving linearly to a point drawn from `end` over the run.
struct MotionProgram {
  std::size_t category = 0;
  std::size_t min_count = 1, max_count = 1;
  Region start;
  std::optional<Region> end;  // absent: static
  double wander = 0;          // per-frame positional noise of the script itself
  double w = 0.05, h = 0.05;
};

struct ActivityScript {
  std::string name;
  std::vector<MotionProgram> programs;
  std::size_t min_frames = 32, max_frames = 48;
};

struct NoiseConfig {
  std::vector<double> miss;                     // per category
  double jitter = 0;                            // std of box components
  double false_positive_rate = 0;               // P(one spurious box) per frame
  std::vector<std::vector<double>> confusion;   // C x C row-stochastic; empty = identity

  static NoiseConfig none(std::size_t categories) {
    NoiseConfig n;
    n.miss.assign(categories, 0.0);
    return n;
  }

  /// Miss probability (1 - mAP/100) * factor per category.
  static NoiseConfig calibrated(double factor = 0.5) {
    NoiseConfig n;
    for (double m : kDetectorMap) n.miss.push_back((1.0 - m / 100.0) * factor);
    n.jitter = 0.008;
    n.false_positive_rate = 0.1;
    const std::size_t c = kDetectorMap.size();
    n.confusion.assign(c, std::vector<double>(c, 0.0));
    for (std::size_t i = 0; i < c; ++i) {
      if (i == 0) {
        n.confusion[i][i] = 1.0;
        continue;
      }
      // objects are occasionally mistaken for another object class
      n.confusion[i][i] = 0.98;
      for (std::size_t j = 1; j < c; ++j)
        if (j != i) n.confusion[i][j] = 0.02 / static_cast<double>(c - 2);
    }
    return n;
  }
};

/// Markov chain over activities. A state whose row is all zero ends the
/// procedure after its run.
struct PhaseChain {
  std::vector<double> start;
  std::vector<std::vector<double>> transitions;
  std::size_t min_phases = 1;
  std::size_t max_phases = 64;
};

struct AppearanceConfig {
  std::size_t dim = 0;  // 0 disables appearance vectors
  double separation = 1.0;
  double noise = 1.0;
  std::uint64_t mean_seed = 7;
};

struct Config {
  int version = 1;
  CategoryTable categories;
  std::vector<std::string> activities = default_activity_names();
  ClipShape shape;
  std::map<std::string, Point> geometry;
  std::vector<ActivityScript> scripts;
  PhaseChain chain;
  NoiseConfig noise;
  AppearanceConfig appearance;

  std::size_t classes() const { return activities.size(); }
};

inline void validate(const Config& cfg) {
  const std::size_t c = cfg.categories.size();
  const std::size_t k = cfg.classes();
  if (cfg.version != 1) throw ConfigError("version: unsupported " + std::to_string(cfg.version));
  if (cfg.scripts.size() != k)
    throw ConfigError("scripts: expected " + std::to_string(k) + " scripts, got " + std::to_string(cfg.scripts.size()));
  for (std::size_t a = 0; a < k; ++a) {
    const auto& s = cfg.scripts[a];
    const std::string path = "scripts[" + std::to_string(a) + "]";
    if (s.min_frames < cfg.shape.span() || s.max_frames < s.min_frames)
      throw ConfigError(path + ".frames: duration range must satisfy " + std::to_string(cfg.shape.span()) +
                        " <= min <= max");
    for (std::size_t p = 0; p < s.programs.size(); ++p) {
      const auto& m = s.programs[p];
      const std::string pp = path + ".programs[" + std::to_string(p) + "]";
      if (m.category >= c) throw ConfigError(pp + ".category: invalid id " + std::to_string(m.category));
      if (m.min_count > m.max_count) throw ConfigError(pp + ".count: min > max");
      if (m.wander < 0 || m.start.spread < 0 || (m.end && m.end->spread < 0))
        throw ConfigError(pp + ": negative spread or wander");
      if (!(m.w > 0 && m.w <= 1 && m.h > 0 && m.h <= 1)) throw ConfigError(pp + ".size: must be in (0, 1]");
    }
  }
  const auto& n = cfg.noise;
  if (n.miss.size() != c) throw ConfigError("noise.miss: expected " + std::to_string(c) + " entries");
  for (double m : n.miss)
    if (!(m >= 0 && m <= 1)) throw ConfigError("noise.miss: probabilities must be in [0, 1]");
  if (!(n.jitter >= 0)) throw ConfigError("noise.jitter: must be >= 0");
  if (!(n.false_positive_rate >= 0 && n.false_positive_rate <= 1))
    throw ConfigError("noise.false_positive_rate: must be in [0, 1]");
  if (!n.confusion.empty()) {
    if (n.confusion.size() != c) throw ConfigError("noise.confusion: expected " + std::to_string(c) + " rows");
    for (std::size_t i = 0; i < c; ++i) {
      if (n.confusion[i].size() != c) throw ConfigError("noise.confusion[" + std::to_string(i) + "]: wrong length");
      double sum = 0;
      for (double v : n.confusion[i]) {
        if (v < 0) throw ConfigError("noise.confusion[" + std::to_string(i) + "]: negative entry");
        sum += v;
      }
      if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("noise.confusion[" + std::to_string(i) + "]: row must sum to 1");
    }
  }
  const auto& ch = cfg.chain;
  if (ch.start.size() != k) throw ConfigError("chain.start: expected " + std::to_string(k) + " entries");
  if (ch.transitions.size() != k) throw ConfigError("chain.transitions: expected " + std::to_string(k) + " rows");
  double start_sum = 0;
  for (double v : ch.start) {
    if (v < 0) throw ConfigError("chain.start: negative probability");
    start_sum += v;
  }
  if (std::abs(start_sum - 1.0) > 1e-9) throw ConfigError("chain.start: must sum to 1");
  for (std::size_t i = 0; i < k; ++i) {
    const auto& row = ch.transitions[i];
    const std::string rp = "chain.transitions[" + std::to_string(i) + "]";
    if (row.size() != k) throw ConfigError(rp + ": wrong length");
    double sum = 0;
    for (double v : row) {
      if (v < 0) throw ConfigError(rp + ": negative probability");
      sum += v;
    }
    if (row[i] != 0) throw ConfigError(rp + ": self-transitions are not allowed (lengthen the run instead)");
    if (sum != 0 && std::abs(sum - 1.0) > 1e-9) throw ConfigError(rp + ": row must sum to 1 or 0");
  }
  if (ch.min_phases == 0 || ch.max_phases < ch.min_phases)
    throw ConfigError("chain: need 1 <= min_phases <= max_phases");
  // shortest walk (in phases) from a start state into a dead end
  std::vector<std::size_t> dist(k, SIZE_MAX);
  std::queue<std::size_t> q;
  for (std::size_t i = 0; i < k; ++i)
    if (ch.start[i] > 0) {
      dist[i] = 1;
      q.push(i);
    }
  while (!q.empty()) {
    const std::size_t s = q.front();
    q.pop();
    bool dead = true;
    for (std::size_t j = 0; j < k; ++j) {
      if (ch.transitions[s][j] <= 0) continue;
      dead = false;
      if (dist[j] == SIZE_MAX) {
        dist[j] = dist[s] + 1;
        q.push(j);
      }
    }
    if (dead && dist[s] < ch.min_phases)
      throw ConfigError("chain: dead end '" + cfg.activities[s] + "' reachable after " + std::to_string(dist[s]) +
                        " phases, below min_phases " + std::to_string(ch.min_phases));
  }
  if (cfg.appearance.dim > 0 && !(cfg.appearance.noise >= 0))
    throw ConfigError("appearance.noise: must be >= 0");
}

/// Default scene layout in the unit square.
inline std::map<std::string, Point> default_geometry() {
  return {{"or_table", {0.50, 0.50}},       {"instrument_table", {0.22, 0.25}}, {"vsc", {0.12, 0.80}},
          {"psc_park", {0.92, 0.90}},       {"psc_dock", {0.64, 0.60}},         {"gurney_door", {0.90, 0.22}},
          {"gurney_bedside", {0.66, 0.36}}, {"staff_area", {0.36, 0.84}},       {"psc_side", {0.64, 0.76}}};
}

inline Config default_config() {
  Config cfg;
  cfg.geometry = default_geometry();
  const auto& g = cfg.geometry;
  auto at = [&](const char* name, double spread = 0.0) { return Region{g.at(name), spread}; };
  enum : std::size_t { human, table, gurney, psc, or_table, vsc };
  const MotionProgram kTable{table, 1, 1, at("instrument_table", 0.01), std::nullopt, 0.002, 0.12, 0.08};
  const MotionProgram kOrTable{or_table, 1, 1, at("or_table", 0.005), std::nullopt, 0.001, 0.22, 0.30};
  const MotionProgram kVsc{vsc, 1, 1, at("vsc", 0.01), std::nullopt, 0.002, 0.08, 0.10};
  const MotionProgram kPscParked{psc, 1, 1, at("psc_park", 0.01), std::nullopt, 0.002, 0.12, 0.12};
  const MotionProgram kPscDocked{psc, 1, 1, at("psc_dock", 0.01), std::nullopt, 0.002, 0.12, 0.12};
  const double hw = 0.06, hh = 0.10;
  const double gw = 0.10, gh = 0.22;

  auto script = [&](const char* name, std::size_t lo, std::size_t hi, std::vector<MotionProgram> programs) {
    return ActivityScript{name, std::move(programs), lo, hi};
  };
  auto moving = [](MotionProgram m, Region from, Region to) {
    m.start = from;
    m.end = to;
    return m;
  };
  const Point near_table{0.42, 0.40};
  const Point roll_human_start{0.84, 0.94}, roll_human_end{0.56, 0.66};
  const Point escort_start{0.84, 0.16}, escort_end{0.60, 0.26};

  cfg.scripts = {
      script("sterile-prep", 40, 72,
             {{human, 4, 5, {{0.28, 0.32}, 0.06}, std::nullopt, 0.012, hw, hh}, kTable, kOrTable, kPscParked, kVsc}),
      script("patient-roll-in", 32, 48,
             {moving({gurney, 1, 1, {}, {}, 0.003, gw, gh}, at("gurney_door", 0.01), at("gurney_bedside", 0.01)),
              moving({human, 2, 2, {}, {}, 0.006, hw, hh}, {escort_start, 0.03}, {escort_end, 0.03}), kTable,
              kOrTable, kPscParked, kVsc}),
      script("patient-prep", 40, 72,
             {{human, 3, 4, {g.at("or_table"), 0.12}, std::nullopt, 0.012, hw, hh},
              {gurney, 1, 1, at("gurney_bedside", 0.01), std::nullopt, 0.002, gw, gh}, kTable, kOrTable, kPscParked,
              kVsc}),
      script("robot-roll-up", 32, 48,
             {moving(kPscParked, at("psc_park", 0.01), at("psc_dock", 0.01)),
              moving({human, 1, 2, {}, {}, 0.006, hw, hh}, {roll_human_start, 0.03}, {roll_human_end, 0.03}), kTable,
              kOrTable, kVsc}),
      script("docking", 40, 64,
             {kPscDocked, moving({human, 2, 3, {}, {}, 0.006, hw, hh}, at("staff_area", 0.04), at("psc_side", 0.03)),
              kTable, kOrTable, kVsc}),
      script("surgery", 64, 112,
             {kPscDocked, {human, 1, 1, {{0.14, 0.72}, 0.01}, std::nullopt, 0.004, hw, hh},
              {human, 1, 2, {near_table, 0.05}, std::nullopt, 0.008, hw, hh}, kTable, kOrTable, kVsc}),
      script("undocking", 40, 64,
             {kPscDocked, moving({human, 2, 3, {}, {}, 0.006, hw, hh}, at("psc_side", 0.03), at("staff_area", 0.04)),
              kTable, kOrTable, kVsc}),
      script("robot-roll-back", 32, 48,
             {moving(kPscParked, at("psc_dock", 0.01), at("psc_park", 0.01)),
              moving({human, 1, 2, {}, {}, 0.006, hw, hh}, {roll_human_end, 0.03}, {roll_human_start, 0.03}), kTable,
              kOrTable, kVsc}),
      script("patient-roll-out", 32, 48,
             {moving({gurney, 1, 1, {}, {}, 0.003, gw, gh}, at("gurney_bedside", 0.01), at("gurney_door", 0.01)),
              moving({human, 2, 2, {}, {}, 0.006, hw, hh}, {escort_end, 0.03}, {escort_start, 0.03}), kTable,
              kOrTable, kPscParked, kVsc}),
  };

  const std::size_t k = cfg.classes();
  cfg.chain.start.assign(k, 0.0);
  cfg.chain.start[0] = 1.0;
  cfg.chain.transitions.assign(k, std::vector<double>(k, 0.0));
  for (std::size_t a = 0; a + 1 < k; ++a) cfg.chain.transitions[a][a + 1] = 1.0;
  // undocking is sometimes followed by re-docking for a second surgical step
  cfg.chain.transitions[6][7] = 0.7;
  cfg.chain.transitions[6][4] = 0.3;
  cfg.chain.min_phases = k;
  cfg.chain.max_phases = 64;

  cfg.noise = NoiseConfig::calibrated();
  cfg.appearance = {48, 1.6, 1.0, 7};
  return cfg;
}

// ---------------------------------------------------------------------------
// JSON

namespace detail {

template <class U>
U get(const nlohmann::json& j, const char* key, const std::string& path) {
  if (!j.contains(key)) throw ConfigError(path + "." + key + ": missing");
  try {
    return j.at(key).get<U>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + "." + key + ": " + e.what());
  }
}

template <class U>
U get_or(const nlohmann::json& j, const char* key, const std::string& path, U fallback) {
  return j.contains(key) ? get<U>(j, key, path) : fallback;
}

inline Point point_from(const nlohmann::json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 2) throw ConfigError(path + ": expected [x, y]");
  return {j[0].get<double>(), j[1].get<double>()};
}

inline Region region_from(const nlohmann::json& j, const std::map<std::string, Point>& geometry,
                          const std::string& path) {
  Region r;
  if (j.contains("anchor")) {
    const auto name = get<std::string>(j, "anchor", path);
    auto it = geometry.find(name);
    if (it == geometry.end()) throw ConfigError(path + ".anchor: unknown anchor '" + name + "'");
    r.at = it->second;
  } else if (j.contains("at")) {
    r.at = point_from(j.at("at"), path + ".at");
  } else {
    throw ConfigError(path + ": needs 'anchor' or 'at'");
  }
  r.spread = get_or<double>(j, "spread", path, 0.0);
  return r;
}

inline nlohmann::json region_to(const Region& r) { return {{"at", {r.at.x, r.at.y}}, {"spread", r.spread}}; }

}  // namespace detail

inline nlohmann::json to_json(const Config& cfg) {
  nlohmann::json geometry = nlohmann::json::object();
  for (const auto& [name, p] : cfg.geometry) geometry[name] = {p.x, p.y};
  nlohmann::json scripts = nlohmann::json::array();
  for (const auto& s : cfg.scripts) {
    nlohmann::json programs = nlohmann::json::array();
    for (const auto& m : s.programs) {
      nlohmann::json jm = {{"category", cfg.categories.name(m.category)},
                           {"count", {m.min_count, m.max_count}},
                           {"start", detail::region_to(m.start)},
                           {"wander", m.wander},
                           {"size", {m.w, m.h}}};
      if (m.end) jm["end"] = detail::region_to(*m.end);
      programs.push_back(std::move(jm));
    }
    scripts.push_back({{"name", s.name}, {"frames", {s.min_frames, s.max_frames}}, {"programs", std::move(programs)}});
  }
  nlohmann::json noise = {{"miss", cfg.noise.miss},
                          {"jitter", cfg.noise.jitter},
                          {"false_positive_rate", cfg.noise.false_positive_rate},
                          {"confusion", cfg.noise.confusion}};
  return {{"version", cfg.version},
          {"categories", cfg.categories.names()},
          {"activities", cfg.activities},
          {"T", cfg.shape.T},
          {"N", cfg.shape.N},
          {"geometry", std::move(geometry)},
          {"scripts", std::move(scripts)},
          {"chain",
           {{"start", cfg.chain.start},
            {"transitions", cfg.chain.transitions},
            {"min_phases", cfg.chain.min_phases},
            {"max_phases", cfg.chain.max_phases}}},
          {"noise", std::move(noise)},
          {"appearance",
           {{"dim", cfg.appearance.dim},
            {"separation", cfg.appearance.separation},
            {"noise", cfg.appearance.noise},
            {"mean_seed", cfg.appearance.mean_seed}}}};
}

/// Parses a config; absent sections keep their defaults. Errors carry the
/// offending field path.
inline Config config_from_json(const nlohmann::json& j) {
  using detail::get;
  using detail::get_or;
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  Config cfg = default_config();
  const std::string root = "config";
  cfg.version = get_or<int>(j, "version", root, 1);
  if (j.contains("categories")) cfg.categories = CategoryTable(get<std::vector<std::string>>(j, "categories", root));
  if (j.contains("activities")) cfg.activities = get<std::vector<std::string>>(j, "activities", root);
  cfg.shape.T = get_or<std::size_t>(j, "T", root, cfg.shape.T);
  cfg.shape.N = get_or<std::size_t>(j, "N", root, cfg.shape.N);
  cfg.shape.C = cfg.categories.size();
  if (cfg.shape.T == 0 || cfg.shape.N == 0) throw ConfigError("config.T/N: must be positive");
  if (j.contains("geometry")) {
    for (const auto& [name, p] : j.at("geometry").items())
      cfg.geometry[name] = detail::point_from(p, "config.geometry." + name);
  }
  if (j.contains("scripts")) {
    cfg.scripts.clear();
    std::size_t a = 0;
    for (const auto& js : j.at("scripts")) {
      const std::string path = "config.scripts[" + std::to_string(a++) + "]";
      ActivityScript s;
      s.name = get_or<std::string>(js, "name", path, "");
      const auto frames = get<std::vector<std::size_t>>(js, "frames", path);
      if (frames.size() != 2) throw ConfigError(path + ".frames: expected [min, max]");
      s.min_frames = frames[0];
      s.max_frames = frames[1];
      std::size_t p = 0;
      for (const auto& jm : js.at("programs")) {
        const std::string pp = path + ".programs[" + std::to_string(p++) + "]";
        MotionProgram m;
        const auto& cat = jm.at("category");
        m.category = cat.is_string() ? cfg.categories.id_of(cat.get<std::string>()) : cat.get<std::size_t>();
        const auto count = get<std::vector<std::size_t>>(jm, "count", pp);
        if (count.size() != 2) throw ConfigError(pp + ".count: expected [min, max]");
        m.min_count = count[0];
        m.max_count = count[1];
        m.start = detail::region_from(jm.at("start"), cfg.geometry, pp + ".start");
        if (jm.contains("end") && !jm.at("end").is_null())
          m.end = detail::region_from(jm.at("end"), cfg.geometry, pp + ".end");
        m.wander = get_or<double>(jm, "wander", pp, 0.0);
        const auto size = get<std::vector<double>>(jm, "size", pp);
        if (size.size() != 2) throw ConfigError(pp + ".size: expected [w, h]");
        m.w = size[0];
        m.h = size[1];
        s.programs.push_back(m);
      }
      cfg.scripts.push_back(std::move(s));
    }
  }
  if (j.contains("chain")) {
    const auto& jc = j.at("chain");
    cfg.chain.start = get_or(jc, "start", "config.chain", cfg.chain.start);
    cfg.chain.transitions = get_or(jc, "transitions", "config.chain", cfg.chain.transitions);
    cfg.chain.min_phases = get_or(jc, "min_phases", "config.chain", cfg.chain.min_phases);
    cfg.chain.max_phases = get_or(jc, "max_phases", "config.chain", cfg.chain.max_phases);
  }
  if (j.contains("noise")) {
    const auto& jn = j.at("noise");
    cfg.noise.miss = get_or(jn, "miss", "config.noise", cfg.noise.miss);
    cfg.noise.jitter = get_or(jn, "jitter", "config.noise", cfg.noise.jitter);
    cfg.noise.false_positive_rate = get_or(jn, "false_positive_rate", "config.noise", cfg.noise.false_positive_rate);
    cfg.noise.confusion = get_or(jn, "confusion", "config.noise", cfg.noise.confusion);
  }
  if (j.contains("appearance")) {
    const auto& ja = j.at("appearance");
    cfg.appearance.dim = get_or(ja, "dim", "config.appearance", cfg.appearance.dim);
    cfg.appearance.separation = get_or(ja, "separation", "config.appearance", cfg.appearance.separation);
    cfg.appearance.noise = get_or(ja, "noise", "config.appearance", cfg.appearance.noise);
    cfg.appearance.mean_seed = get_or(ja, "mean_seed", "config.appearance", cfg.appearance.mean_seed);
  }
  validate(cfg);
  return cfg;
}

// ---------------------------------------------------------------------------
// Generation

namespace detail {

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

inline std::size_t draw_categorical(const std::vector<double>& probs, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double x = u(rng);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (x < probs[i]) return i;
    x -= probs[i];
  }
  for (std::size_t i = probs.size(); i-- > 0;)
    if (probs[i] > 0) return i;
  return 0;
}

inline Point place(const Region& r, std::mt19937_64& rng) {
  if (r.spread <= 0) return r.at;
  std::normal_distribution<double> n(0.0, r.spread);
  return {std::clamp(r.at.x + n(rng), 0.02, 0.98), std::clamp(r.at.y + n(rng), 0.02, 0.98)};
}

}  // namespace detail

/// Noiseless detections for one run of `script`, `frames` long.
inline std::vector<Frame> simulate_run(const ActivityScript& script, std::size_t frames, std::mt19937_64& rng) {
  struct Track {
    std::size_t category;
    Point from, to;
    double wander, w, h;
  };
  std::vector<Track> tracks;
  std::uniform_real_distribution<double> size_scale(0.9, 1.1);
  for (const auto& m : script.programs) {
    std::uniform_int_distribution<std::size_t> count(m.min_count, m.max_count);
    const std::size_t n = count(rng);
    for (std::size_t i = 0; i < n; ++i) {
      Track t{m.category, detail::place(m.start, rng), {}, m.wander, m.w * size_scale(rng), m.h * size_scale(rng)};
      t.to = m.end ? detail::place(*m.end, rng) : t.from;
      tracks.push_back(t);
    }
  }
  std::uniform_real_distribution<double> conf(0.6, 1.0);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<Frame> out(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    const double alpha = frames > 1 ? static_cast<double>(f) / static_cast<double>(frames - 1) : 0.0;
    Frame& frame = out[f];
    for (const auto& t : tracks) {
      double x = t.from.x + alpha * (t.to.x - t.from.x);
      double y = t.from.y + alpha * (t.to.y - t.from.y);
      if (t.wander > 0) {
        x += t.wander * unit(rng);
        y += t.wander * unit(rng);
      }
      Detection d;
      d.category = t.category;
      d.box = {detail::clamp01(x), detail::clamp01(y), std::min(t.w, 1.0), std::min(t.h, 1.0)};
      d.conf = conf(rng);
      frame.push_back(d);
    }
    std::shuffle(frame.begin(), frame.end(), rng);
  }
  return out;
}

/// Applies detector noise to one frame's valid detections: misses, category
/// confusion, box jitter (clamped to the unit range), then at most one false
/// positive if capacity allows.
inline std::vector<Detection> corrupt_frame(const std::vector<Detection>& detections, const NoiseConfig& noise,
                                            std::size_t capacity, std::size_t categories, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<Detection> out;
  for (const auto& d0 : detections) {
    if (!d0.valid) continue;
    Detection d = d0;
    if (d.category < noise.miss.size() && noise.miss[d.category] > 0 && u(rng) < noise.miss[d.category]) continue;
    if (!noise.confusion.empty()) d.category = detail::draw_categorical(noise.confusion[d.category], rng);
    if (noise.jitter > 0) {
      d.box.cx = detail::clamp01(d.box.cx + noise.jitter * unit(rng));
      d.box.cy = detail::clamp01(d.box.cy + noise.jitter * unit(rng));
      d.box.w = std::clamp(d.box.w + noise.jitter * unit(rng), 1e-3, 1.0);
      d.box.h = std::clamp(d.box.h + noise.jitter * unit(rng), 1e-3, 1.0);
    }
    out.push_back(d);
  }
  if (noise.false_positive_rate > 0 && u(rng) < noise.false_positive_rate && out.size() < capacity) {
    std::uniform_int_distribution<std::size_t> cat(0, categories - 1);
    std::uniform_real_distribution<double> pos(0.05, 0.95), ext(0.03, 0.15), conf(0.3, 0.6);
    Detection fp;
    fp.category = cat(rng);
    fp.box = {pos(rng), pos(rng), ext(rng), ext(rng)};
    fp.conf = conf(rng);
    out.push_back(fp);
  }
  return out;
}

/// Clip-level corruption; the label and slot count are preserved.
inline Clip corrupt_detections(const Clip& clip, const NoiseConfig& noise, std::mt19937_64& rng) {
  Clip out = clip;
  for (auto& frame : out.frames) {
    const std::size_t slots = frame.size();
    std::size_t padding_id = noise.miss.size();
    for (const auto& d : frame)
      if (!d.valid) padding_id = d.category;
    frame = pad_frame(corrupt_frame(frame, noise, slots, noise.miss.size(), rng), slots, padding_id);
  }
  return out;
}

/// Unit-norm class means for appearance vectors, fixed by mean_seed.
inline std::vector<std::vector<double>> appearance_means(const AppearanceConfig& cfg, std::size_t classes) {
  std::mt19937_64 rng(cfg.mean_seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<std::vector<double>> means(classes, std::vector<double>(cfg.dim));
  for (auto& m : means) {
    double norm = 0;
    for (auto& v : m) norm += (v = unit(rng)) * v;
    norm = std::sqrt(norm);
    for (auto& v : m) v /= norm;
  }
  return means;
}

/// separation * mean[label] + noise * N(0, I).
inline std::vector<double> draw_appearance(const AppearanceConfig& cfg,
                                           const std::vector<std::vector<double>>& means, std::size_t label,
                                           std::mt19937_64& rng) {
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<double> v(cfg.dim);
  for (std::size_t i = 0; i < cfg.dim; ++i) v[i] = cfg.separation * means[label][i] + cfg.noise * unit(rng);
  return v;
}

/// A single clip of `activity` with the config's noise applied.
inline Clip generate_clip(std::size_t activity, const Config& cfg, std::mt19937_64& rng) {
  if (activity >= cfg.classes())
    throw ArgumentError("generate_clip: unknown activity " + std::to_string(activity));
  const auto& script = cfg.scripts[activity];
  std::uniform_int_distribution<std::size_t> duration(script.min_frames, script.max_frames);
  VideoRecord run;
  run.id = "clip";
  run.frames = simulate_run(script, duration(rng), rng);
  for (auto& f : run.frames) f = corrupt_frame(f, cfg.noise, cfg.shape.N, cfg.categories.size(), rng);
  run.phases.assign(run.frames.size(), activity);
  Clip clip = sample_clip(run, {0, run.frames.size(), activity}, cfg.shape, rng);
  if (cfg.appearance.dim > 0)
    clip.appearance = draw_appearance(cfg.appearance, appearance_means(cfg.appearance, cfg.classes()), activity, rng);
  return clip;
}

/// Stores a clip as a one-phase record spanning exactly 2T source frames,
/// so that sample_clip on it reproduces the clip.
inline VideoRecord clip_record(const Clip& clip, const std::string& id) {
  VideoRecord v;
  v.id = id;
  for (const auto& frame : clip.frames) {
    Frame valid;
    for (const auto& d : frame)
      if (d.valid) valid.push_back(d);
    v.frames.push_back(valid);
    v.frames.push_back(valid);
  }
  v.phases.assign(v.frames.size(), clip.label);
  if (clip.appearance) v.appearance = std::vector<std::vector<double>>{*clip.appearance};
  return v;
}

/// Walks the phase chain, simulating one run per visited phase.
inline VideoRecord generate_procedure(const Config& cfg, std::mt19937_64& rng, const std::string& id = "procedure") {
  VideoRecord v;
  v.id = id;
  const auto& ch = cfg.chain;
  std::size_t state = detail::draw_categorical(ch.start, rng);
  for (std::size_t visited = 1;; ++visited) {
    const auto& script = cfg.scripts[state];
    std::uniform_int_distribution<std::size_t> duration(script.min_frames, script.max_frames);
    auto frames = simulate_run(script, duration(rng), rng);
    for (auto& f : frames) {
      v.frames.push_back(corrupt_frame(f, cfg.noise, cfg.shape.N, cfg.categories.size(), rng));
      v.phases.push_back(state);
    }
    const auto& row = ch.transitions[state];
    const bool dead_end = std::all_of(row.begin(), row.end(), [](double p) { return p <= 0; });
    if (dead_end) {
      if (visited < ch.min_phases)
        throw ConfigError("chain: dead end '" + cfg.activities[state] + "' after " + std::to_string(visited) +
                          " phases");
      break;
    }
    if (visited >= ch.max_phases) break;
    state = detail::draw_categorical(row, rng);
  }
  if (cfg.appearance.dim > 0) {
    const auto means = appearance_means(cfg.appearance, cfg.classes());
    std::vector<std::vector<double>> app;
    for (std::size_t p = 0; p < position_count(v.size(), cfg.shape); ++p)
      app.push_back(draw_appearance(cfg.appearance, means, position_label(v, p, cfg.shape), rng));
    v.appearance = std::move(app);
  }
  return v;
}

/// Class-balanced clip set: clip i has activity i mod K.
inline std::vector<Clip> generate_clip_set(const Config& cfg, std::size_t count, std::uint64_t seed,
                                           const std::vector<std::size_t>& activities = {}) {
  std::vector<std::size_t> pool = activities;
  if (pool.empty())
    for (std::size_t a = 0; a < cfg.classes(); ++a) pool.push_back(a);
  std::vector<Clip> clips;
  clips.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::mt19937_64 rng(derive_seed(seed, i));
    clips.push_back(generate_clip(pool[i % pool.size()], cfg, rng));
    clips.back().source.video_id = "clip-" + std::to_string(i);
  }
  return clips;
}

/// Procedure i is drawn from stream i of `seed`, so a corpus prefix does not
/// depend on the corpus size.
inline std::vector<VideoRecord> generate_procedures(const Config& cfg, std::size_t count, std::uint64_t seed) {
  std::vector<VideoRecord> out;
  out.reserve(count);
  char id[32];
  for (std::size_t i = 0; i < count; ++i) {
    std::mt19937_64 rng(derive_seed(seed, i));
    std::snprintf(id, sizeof id, "proc-%04zu", i);
    out.push_back(generate_procedure(cfg, rng, id));
  }
  return out;
}

}  // namespace stor2::orsim
