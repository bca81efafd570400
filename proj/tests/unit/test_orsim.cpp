#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <map>
#include <random>

#include "stor2/orsim.hpp"

using namespace stor2;
namespace os = stor2::orsim;

namespace {

enum : std::size_t { kHuman, kTable, kGurney, kPsc, kOrTable, kVsc };
enum : std::size_t { kRollUp = 3, kDocking = 4, kUndocking = 6, kRollBack = 7 };

os::Config noiseless() {
  auto cfg = os::default_config();
  cfg.noise = os::NoiseConfig::none(cfg.categories.size());
  return cfg;
}

/// Mean center of the valid detections of `cat` in frame `t`, if any.
std::optional<std::pair<double, double>> center(const Clip& clip, std::size_t t, std::size_t cat) {
  double x = 0, y = 0;
  int n = 0;
  for (const auto& d : clip.frames[t])
    if (d.valid && d.category == cat) {
      x += d.box.cx;
      y += d.box.cy;
      ++n;
    }
  if (!n) return std::nullopt;
  return std::make_pair(x / n, y / n);
}

/// Per category: mean occupancy count and net displacement of the mean center.
std::vector<double> motion_features(const Clip& clip, std::size_t categories) {
  std::vector<double> f;
  for (std::size_t c = 0; c < categories; ++c) {
    double count = 0;
    for (const auto& fr : clip.frames)
      for (const auto& d : fr) count += d.valid && d.category == c;
    f.push_back(count / static_cast<double>(clip.frames.size()));
    auto a = center(clip, 0, c), b = center(clip, clip.frames.size() - 1, c);
    f.push_back(a && b ? b->first - a->first : 0.0);
    f.push_back(a && b ? b->second - a->second : 0.0);
  }
  return f;
}

std::vector<double> count_features(const Clip& clip, std::size_t categories) {
  std::vector<double> f(categories, 0.0);
  for (const auto& fr : clip.frames)
    for (const auto& d : fr)
      if (d.valid) f[d.category] += 1.0;
  return f;
}

/// Nearest standardized class centroid; returns accuracy on `test`.
double nearest_centroid(const std::vector<std::vector<double>>& train_x, const std::vector<std::size_t>& train_y,
                        const std::vector<std::vector<double>>& test_x, const std::vector<std::size_t>& test_y,
                        std::size_t classes) {
  const std::size_t dim = train_x.front().size();
  std::vector<double> mean(dim, 0), sd(dim, 0);
  for (const auto& x : train_x)
    for (std::size_t i = 0; i < dim; ++i) mean[i] += x[i] / train_x.size();
  for (const auto& x : train_x)
    for (std::size_t i = 0; i < dim; ++i) sd[i] += (x[i] - mean[i]) * (x[i] - mean[i]) / train_x.size();
  for (auto& s : sd) s = std::sqrt(s) + 1e-9;
  std::vector<std::vector<double>> centroid(classes, std::vector<double>(dim, 0));
  std::vector<double> n(classes, 0);
  for (std::size_t k = 0; k < train_x.size(); ++k) {
    n[train_y[k]] += 1;
    for (std::size_t i = 0; i < dim; ++i) centroid[train_y[k]][i] += (train_x[k][i] - mean[i]) / sd[i];
  }
  for (std::size_t c = 0; c < classes; ++c)
    for (auto& v : centroid[c]) v /= std::max(1.0, n[c]);
  std::size_t hits = 0;
  for (std::size_t k = 0; k < test_x.size(); ++k) {
    double best = 1e300;
    std::size_t arg = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      if (n[c] == 0) continue;
      double d = 0;
      for (std::size_t i = 0; i < dim; ++i) d += std::pow((test_x[k][i] - mean[i]) / sd[i] - centroid[c][i], 2);
      if (d < best) best = d, arg = c;
    }
    hits += arg == test_y[k];
  }
  return static_cast<double>(hits) / test_x.size();
}

}  // namespace

TEST(Orsim, DefaultConfigValidatesAndRoundTripsThroughJson) {
  auto cfg = os::default_config();
  EXPECT_NO_THROW(os::validate(cfg));
  EXPECT_EQ(cfg.classes(), 9u);
  auto back = os::config_from_json(os::to_json(cfg));
  EXPECT_EQ(os::to_json(back).dump(), os::to_json(cfg).dump());
  auto a = os::generate_clip_set(cfg, 5, 3);
  auto b = os::generate_clip_set(back, 5, 3);
  EXPECT_EQ(a, b);
}

TEST(Orsim, ConfigErrorsCarryFieldPath) {
  auto j = os::to_json(os::default_config());
  j["noise"]["miss"][2] = 1.5;
  try {
    os::config_from_json(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("noise.miss"), std::string::npos);
  }
}

TEST(Orsim, DeadEndBeforeMinimumLengthIsConfigError) {
  auto cfg = os::default_config();
  cfg.chain.transitions[2].assign(9, 0.0);  // patient-prep ends the procedure
  EXPECT_THROW(os::validate(cfg), ConfigError);
}

TEST(Orsim, ActivityNames) {
  const auto& names = os::default_activity_names();
  ASSERT_EQ(names.size(), 9u);
  EXPECT_EQ(names[kDocking], "docking");
  EXPECT_EQ(names[kRollBack], "robot-roll-back");
}

TEST(Orsim, GenerateClipIsSeedDeterministic) {
  auto cfg = os::default_config();
  std::mt19937_64 a(7), b(7);
  EXPECT_EQ(os::generate_clip(5, cfg, a), os::generate_clip(5, cfg, b));
  std::mt19937_64 c(7);
  EXPECT_THROW(os::generate_clip(9, cfg, c), ArgumentError);
}

TEST(Orsim, RollUpMovesPscTowardOrTable) {
  auto cfg = noiseless();
  const auto table = cfg.geometry.at("or_table");
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    auto clip = os::generate_clip(kRollUp, cfg, rng);
    auto a = center(clip, 0, kPsc), b = center(clip, clip.frames.size() - 1, kPsc);
    ASSERT_TRUE(a && b);
    const double dx = b->first - a->first, dy = b->second - a->second;
    const double tx = table.x - a->first, ty = table.y - a->second;
    EXPECT_GT(std::hypot(dx, dy), 0.1) << seed;
    EXPECT_GT(dx * tx + dy * ty, 0.0) << seed;  // toward the table
  }
}

TEST(Orsim, NoiselessClipsHaveScriptCounts) {
  auto cfg = noiseless();
  for (std::size_t a = 0; a < 9; ++a) {
    std::mt19937_64 rng(a);
    auto clip = os::generate_clip(a, cfg, rng);
    std::map<std::size_t, std::pair<std::size_t, std::size_t>> range;
    for (const auto& m : cfg.scripts[a].programs) {
      range[m.category].first += m.min_count;
      range[m.category].second += m.max_count;
    }
    auto first = count_features(Clip{{clip.frames[0]}}, 6);
    for (const auto& fr : clip.frames) {
      auto counts = count_features(Clip{{fr}}, 6);
      EXPECT_EQ(counts, first) << "counts change within a noiseless clip";
      for (std::size_t c = 0; c < 6; ++c) {
        auto it = range.find(c);
        const auto lo = it == range.end() ? 0 : it->second.first, hi = it == range.end() ? 0 : it->second.second;
        EXPECT_GE(counts[c], lo);
        EXPECT_LE(counts[c], hi);
      }
    }
  }
}

TEST(Orsim, ZeroNoiseIsIdentity) {
  auto cfg = os::default_config();
  std::mt19937_64 rng(1);
  auto clip = os::generate_clip(0, cfg, rng);
  auto same = os::corrupt_detections(clip, os::NoiseConfig::none(6), rng);
  EXPECT_EQ(same, clip);
}

TEST(Orsim, CertainMissRemovesCategory) {
  auto cfg = noiseless();
  std::mt19937_64 rng(2);
  auto clip = os::generate_clip(0, cfg, rng);
  auto noise = os::NoiseConfig::none(6);
  noise.miss[kHuman] = 1.0;
  auto out = os::corrupt_detections(clip, noise, rng);
  for (const auto& fr : out.frames)
    for (const auto& d : fr) EXPECT_FALSE(d.valid && d.category == kHuman);
  EXPECT_EQ(out.label, clip.label);
}

TEST(Orsim, CalibratedMissRatesFollowDetectorQuality) {
  auto n = os::NoiseConfig::calibrated();
  EXPECT_GT(n.miss[kOrTable], n.miss[kHuman]);
  EXPECT_NEAR(n.miss[kHuman], (1 - 0.793) * 0.5, 1e-12);
}

TEST(Orsim, CorruptedBoxesStayInUnitRange) {
  auto cfg = os::default_config();
  cfg.noise.jitter = 0.2;
  cfg.noise.false_positive_rate = 1.0;
  auto clips = os::generate_clip_set(cfg, 90, 11);
  for (const auto& c : clips)
    for (const auto& fr : c.frames) {
      EXPECT_EQ(fr.size(), cfg.shape.N);
      for (const auto& d : fr)
        if (d.valid) EXPECT_TRUE(d.box.in_unit_range());
    }
}

TEST(Orsim, FixedOrderProcedureHasDeterministicBoundaries) {
  auto cfg = noiseless();
  for (auto& s : cfg.scripts) s.min_frames = s.max_frames = 40;
  cfg.chain.transitions[kUndocking].assign(9, 0.0);
  cfg.chain.transitions[kUndocking][kRollBack] = 1.0;
  std::mt19937_64 rng(4);
  auto v = os::generate_procedure(cfg, rng);
  ASSERT_EQ(v.size(), 360u);
  for (std::size_t f = 0; f < v.size(); ++f) EXPECT_EQ(v.phases[f], f / 40);
  EXPECT_NO_THROW(validate(v, 6, 9));
}

TEST(Orsim, ProceduresFollowPlausibleOrder) {
  auto cfg = os::default_config();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    auto v = os::generate_procedure(cfg, rng);
    EXPECT_NO_THROW(validate(v, 6, 9));
    auto runs = phase_runs(v);
    EXPECT_EQ(runs.front().label, 0u);
    EXPECT_EQ(runs.back().label, 8u);
    std::size_t first_up = 99, first_dock = 99, first_surgery = 99;
    for (std::size_t i = 0; i < runs.size(); ++i) {
      if (runs[i].label == kRollUp && first_up == 99) first_up = i;
      if (runs[i].label == kDocking && first_dock == 99) first_dock = i;
      if (runs[i].label == 5 && first_surgery == 99) first_surgery = i;
    }
    EXPECT_LT(first_up, first_dock);
    EXPECT_LT(first_dock, first_surgery);
    ASSERT_TRUE(v.appearance);
    EXPECT_EQ(v.appearance->size(), position_count(v.size(), cfg.shape));
  }
}

TEST(Orsim, PhaseVisitsMatchChainArithmetic) {
  // Monte-Carlo visit counts vs the absorbing-chain fundamental matrix.
  auto cfg = os::default_config();
  const std::size_t k = 9;
  Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(k, k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) Q(i, j) = cfg.chain.transitions[i][j];
  Eigen::VectorXd start(k);
  for (std::size_t i = 0; i < k; ++i) start(i) = cfg.chain.start[i];
  const Eigen::VectorXd expected = (Eigen::MatrixXd::Identity(k, k) - Q).transpose().lu().solve(start);

  std::vector<double> visits(k, 0.0);
  const int trials = 400;
  for (int t = 0; t < trials; ++t) {
    std::mt19937_64 rng(1000 + t);
    for (const auto& run : phase_runs(os::generate_procedure(cfg, rng))) visits[run.label] += 1.0 / trials;
  }
  for (std::size_t i = 0; i < k; ++i) EXPECT_NEAR(visits[i], expected(i), 0.1 * expected(i)) << "phase " << i;
}

TEST(Orsim, NearestCentroidOnMotionFeaturesSolvesNoiselessClips) {
  auto cfg = noiseless();
  auto train = os::generate_clip_set(cfg, 900, 21);
  auto test = os::generate_clip_set(cfg, 450, 22);
  std::vector<std::vector<double>> tx, sx;
  std::vector<std::size_t> ty, sy;
  for (const auto& c : train) tx.push_back(motion_features(c, 6)), ty.push_back(c.label);
  for (const auto& c : test) sx.push_back(motion_features(c, 6)), sy.push_back(c.label);
  EXPECT_GT(nearest_centroid(tx, ty, sx, sy, 9), 0.8);
}

TEST(Orsim, MotionOnlyPairIsAtChanceForCounts) {
  auto cfg = os::default_config();
  auto train = os::generate_clip_set(cfg, 1000, 31, {kRollUp, kRollBack});
  auto test = os::generate_clip_set(cfg, 1000, 32, {kRollUp, kRollBack});
  std::vector<std::vector<double>> tx, sx;
  std::vector<std::size_t> ty, sy;
  for (const auto& c : train) tx.push_back(count_features(c, 6)), ty.push_back(c.label);
  for (const auto& c : test) sx.push_back(count_features(c, 6)), sy.push_back(c.label);
  const double acc = nearest_centroid(tx, ty, sx, sy, 9);
  EXPECT_NEAR(acc, 0.5, 0.06);
  // same scripts carry the same occupancy programs
  auto occupancy = [&](std::size_t a) {
    std::map<std::size_t, std::pair<std::size_t, std::size_t>> m;
    for (const auto& p : cfg.scripts[a].programs) {
      m[p.category].first += p.min_count;
      m[p.category].second += p.max_count;
    }
    return m;
  };
  EXPECT_EQ(occupancy(kRollUp), occupancy(kRollBack));
}
