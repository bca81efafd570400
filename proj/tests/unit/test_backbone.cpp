#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "stor2/backbone.hpp"
#include "support/gradcheck.hpp"
#include "support/temp_dir.hpp"
#include "support/toy.hpp"

using namespace stor2;
using stor2::testing::random_clip;
using stor2::testing::random_clips;
using stor2::testing::toy_model_config;

namespace {

std::vector<double> logits_of(Backbone<double>& m, const std::vector<Clip>& clips, Ablation a = Ablation::none) {
  Tape<double> tape;
  auto v = forward(tape, m, std::span<const Clip>(clips), a).logits.value();
  return {v.begin(), v.end()};
}

void expect_close(const std::vector<double>& a, const std::vector<double>& b, double tol = 1e-12) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << i;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Backbone<double> toy(std::uint64_t seed = 3, ModelConfig cfg = toy_model_config()) {
  Backbone<double> m(cfg);
  m.init(seed);
  return m;
}

// Nonzero biases keep ReLU inputs off the kink for absent categories.
void randomize_biases(Backbone<double>& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto* p : m.parameters())
    if (p->name.ends_with(".bias")) p->value = stor2::testing::random_values(p->size(), rng, -0.5, 0.5);
}

}  // namespace

TEST(Backbone, OutputShapes) {
  auto cfg = toy_model_config();
  cfg.d_clip = 5;
  cfg.d_temporal = 6;
  cfg.hidden = 7;
  auto m = toy(1, cfg);
  auto clips = random_clips(cfg, 3, 1);
  Tape<double> tape;
  auto res = forward(tape, m, std::span<const Clip>(clips));
  EXPECT_EQ(res.clip_features.shape(), (Shape{3, 5}));
  EXPECT_EQ(res.logits.shape(), (Shape{3, 4}));
}

TEST(Backbone, SlotOrderWithinFrameDoesNotMatter) {
  auto m = toy();
  auto clips = random_clips(m.config, 4, 2);
  auto shuffled = clips;
  std::mt19937_64 rng(9);
  for (auto& c : shuffled)
    for (auto& f : c.frames) std::shuffle(f.begin(), f.end(), rng);
  expect_close(logits_of(m, clips), logits_of(m, shuffled), 1e-10);
}

TEST(Backbone, PaddingContentIsIgnored) {
  auto m = toy();
  auto clips = random_clips(m.config, 4, 3);
  auto noisy = clips;
  for (auto& c : noisy)
    for (auto& f : c.frames)
      for (auto& d : f)
        if (!d.valid) d.box = {0.5, 0.5, 0.3, 0.3};
  expect_close(logits_of(m, clips), logits_of(m, noisy));
}

TEST(Backbone, BatchRowsAreIndependent) {
  auto m = toy();
  auto clips = random_clips(m.config, 5, 4);
  auto batched = logits_of(m, clips);
  for (std::size_t i = 0; i < clips.size(); ++i) {
    auto single = logits_of(m, {clips[i]});
    for (std::size_t k = 0; k < m.config.K; ++k) EXPECT_NEAR(batched[i * m.config.K + k], single[k], 1e-12);
  }
}

TEST(Backbone, TemporalOrderMatters) {
  auto m = toy();
  auto clips = random_clips(m.config, 1, 5);
  auto reversed = clips;
  std::reverse(reversed[0].frames.begin(), reversed[0].frames.end());
  EXPECT_GT(max_diff(logits_of(m, clips), logits_of(m, reversed)), 1e-6);
}

TEST(Backbone, EmptyClipGivesFiniteLogits) {
  auto m = toy();
  Clip c;
  for (std::size_t t = 0; t < m.config.T; ++t) c.frames.push_back(pad_frame({}, m.config.N, m.config.C));
  for (double v : logits_of(m, {c})) EXPECT_TRUE(std::isfinite(v));
}

TEST(Backbone, ZeroWeightsGiveUniformPrediction) {
  Backbone<double> m(toy_model_config());
  auto clips = random_clips(m.config, 3, 6);
  for (double v : logits_of(m, clips)) EXPECT_EQ(v, 0.0);
  Tape<double> tape;
  auto res = forward(tape, m, std::span<const Clip>(clips));
  std::vector<std::size_t> labels{0, 1, 2};
  EXPECT_NEAR(softmax_cross_entropy(res.logits, std::span<const std::size_t>(labels)).item(), std::log(4.0), 1e-12);
}

TEST(Backbone, AblationsChangeOutput) {
  auto m = toy();
  auto clips = random_clips(m.config, 4, 7);
  auto full = logits_of(m, clips);
  EXPECT_GT(max_diff(full, logits_of(m, clips, Ablation::no_spe)), 1e-6);
  EXPECT_GT(max_diff(full, logits_of(m, clips, Ablation::no_ce)), 1e-6);
}

TEST(Backbone, WithoutPositionEmbeddingBoxesAreInvisible) {
  auto m = toy();
  auto clips = random_clips(m.config, 3, 8);
  auto moved = clips;
  for (auto& c : moved)
    for (auto& f : c.frames)
      for (auto& d : f)
        if (d.valid) d.box.cx = 1.0 - d.box.cx;
  expect_close(logits_of(m, clips, Ablation::no_spe), logits_of(m, moved, Ablation::no_spe));
  EXPECT_GT(max_diff(logits_of(m, clips), logits_of(m, moved)), 1e-6);
}

TEST(Backbone, ParseAblation) {
  EXPECT_EQ(parse_ablation("none"), Ablation::none);
  EXPECT_EQ(parse_ablation("no-spe"), Ablation::no_spe);
  EXPECT_EQ(parse_ablation("no-ce"), Ablation::no_ce);
  EXPECT_THROW(parse_ablation("nope"), ConfigError);
}

TEST(Backbone, GradientsMatchFiniteDifferences) {
  for (auto ablation : {Ablation::none, Ablation::no_spe, Ablation::no_ce}) {
    auto m = toy(11);
    randomize_biases(m, 1);
    auto clips = random_clips(m.config, 3, 12);
    auto loss = [&](Tape<double>& tape) {
      auto res = forward(tape, m, std::span<const Clip>(clips), ablation);
      std::vector<std::size_t> labels{0, 1, 3};
      return softmax_cross_entropy(res.logits, std::span<const std::size_t>(labels));
    };
    auto report = stor2::testing::check_parameter_gradients(loss, m.parameters());
    EXPECT_LT(report.rel_error, 1e-6) << to_string(ablation);
  }
}

TEST(Backbone, FusionGradientsMatchFiniteDifferences) {
  auto cfg = toy_model_config();
  cfg.appearance_dim = 3;
  auto m = toy(13, cfg);
  randomize_biases(m, 2);
  auto clips = random_clips(cfg, 2, 14);
  for (auto& c : clips) c.appearance = std::vector<double>{0.3, -1.0, 0.5};
  clips[1].appearance = std::vector<double>{-0.2, 0.1, 2.0};
  auto loss = [&](Tape<double>& tape) {
    std::vector<std::size_t> labels{2, 1};
    return softmax_cross_entropy(forward(tape, m, std::span<const Clip>(clips)).logits,
                                 std::span<const std::size_t>(labels));
  };
  EXPECT_LT(stor2::testing::check_parameter_gradients(loss, m.parameters()).rel_error, 1e-6);
}

TEST(Backbone, FusionNeedsAppearance) {
  auto cfg = toy_model_config();
  cfg.appearance_dim = 3;
  auto m = toy(1, cfg);
  auto clips = random_clips(cfg, 1, 1);
  EXPECT_THROW(logits_of(m, clips), ConfigError);
  clips[0].appearance = std::vector<double>{1, 2};
  EXPECT_THROW(logits_of(m, clips), ConfigError);
}

TEST(Backbone, InputErrors) {
  auto m = toy();
  auto clips = random_clips(m.config, 1, 1);
  auto short_clip = clips;
  short_clip[0].frames.pop_back();
  EXPECT_THROW(logits_of(m, short_clip), DimensionError);
  auto bad_cat = clips;
  bad_cat[0].frames[0][0] = Detection{{0.5, 0.5, 0.1, 0.1}, 7};
  EXPECT_THROW(logits_of(m, bad_cat), RangeError);
  EXPECT_THROW(logits_of(m, {}), ArgumentError);
}

TEST(Backbone, CheckpointRoundTrip) {
  stor2::testing::TempDir dir;
  auto m = toy(21);
  save_backbone(dir / "m.ckpt", m, {{"note", "x"}});
  auto back = load_backbone<double>(dir / "m.ckpt");
  EXPECT_EQ(to_json(back.config), to_json(m.config));
  auto clips = random_clips(m.config, 3, 22);
  expect_close(logits_of(m, clips), logits_of(back, clips), 0.0);

  auto f = m.cast<float>();
  save_backbone(dir / "f.ckpt", f);
  auto fb = load_backbone<float>(dir / "f.ckpt");
  auto a = f.parameters(), b = fb.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->value, b[i]->value);
}

TEST(Backbone, CheckpointMismatchesAreErrors) {
  stor2::testing::TempDir dir;
  auto m = toy();
  save_backbone(dir / "m.ckpt", m);
  // wrong architecture for the stored tensors
  auto ck = load_checkpoint(dir / "m.ckpt");
  auto cfg = toy_model_config();
  cfg.d = 9;
  Backbone<double> other(cfg);
  EXPECT_THROW(apply_checkpoint(ck, other.parameters()), CheckpointError);
  // truncated file
  auto bytes = io::read_file(dir / "m.ckpt");
  io::write_file_atomic(dir / "cut.ckpt", bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(load_backbone<double>(dir / "cut.ckpt"), CheckpointError);
  EXPECT_THROW(load_backbone<double>(dir / "missing.ckpt"), IoError);
}

TEST(Backbone, ModelConfigJson) {
  auto cfg = toy_model_config();
  cfg.appearance_dim = 4;
  auto back = model_config_from_json(to_json(cfg));
  EXPECT_EQ(to_json(back), to_json(cfg));
  EXPECT_THROW(model_config_from_json({{"d", 0}}), ConfigError);
}
