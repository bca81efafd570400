#include <gtest/gtest.h>

#include <cmath>

#include "stor2/optim.hpp"

using namespace stor2;

TEST(Schedule, Anchors) {
  TrainConfig c;  // 50 epochs, 5 warmup, 0.01 -> 0.05
  const std::size_t per_epoch = 10, total = 50 * per_epoch, warmup = 5 * per_epoch;
  EXPECT_DOUBLE_EQ(lr_at(c, 0, total), 0.01);
  EXPECT_DOUBLE_EQ(lr_at(c, warmup / 2, total), 0.03);
  EXPECT_DOUBLE_EQ(lr_at(c, warmup, total), 0.05);
  EXPECT_NEAR(lr_at(c, warmup + (total - warmup) / 2, total), 0.025, 1e-15);
  EXPECT_LT(lr_at(c, total - 1, total), 1e-5);
  EXPECT_GT(lr_at(c, total - 1, total), 0.0);
  EXPECT_THROW(lr_at(c, total, total), ArgumentError);
}

TEST(Schedule, WarmupRisesThenCosineFalls) {
  TrainConfig c;
  const std::size_t total = 400, warmup = 40;
  for (std::size_t s = 1; s <= warmup; ++s) EXPECT_GT(lr_at(c, s, total), lr_at(c, s - 1, total));
  for (std::size_t s = warmup + 1; s < total; ++s) EXPECT_LT(lr_at(c, s, total), lr_at(c, s - 1, total));
}

TEST(Schedule, TinyRunsStillHaveAWarmupStep) {
  TrainConfig c;
  EXPECT_DOUBLE_EQ(lr_at(c, 0, 3), 0.01);
  EXPECT_DOUBLE_EQ(lr_at(c, 1, 3), 0.05);
}

TEST(TrainConfig, ValidationAndJson) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  auto back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(train_config_from_json({{"epochs", 5}, {"warmup_epochs", 6}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"momentum", 1.0}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"fraction", 0.0}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"batch", "x"}}), ConfigError);
  EXPECT_EQ(train_config_from_json({{"batch", 8}}).batch, 8u);
}

TEST(Sgd, MomentumExample) {
  Parameter<double> p("p", {1});
  p.value = {1.0};
  Sgd<double> opt({&p}, 0.9, 0.0);
  p.grad = {0.5};
  opt.step(0.1);
  EXPECT_DOUBLE_EQ(opt.velocity()[0][0], 0.5);
  EXPECT_DOUBLE_EQ(p.value[0], 0.95);
  opt.step(0.1);
  EXPECT_DOUBLE_EQ(opt.velocity()[0][0], 0.95);
  EXPECT_DOUBLE_EQ(p.value[0], 0.855);
}

TEST(Sgd, WeightDecayExample) {
  Parameter<double> p("p", {2});
  p.value = {2.0, -4.0};
  Sgd<double> opt({&p}, 0.0, 0.1);
  opt.step(0.5);  // g = 0: p -= 0.5 * 0.1 * p
  EXPECT_DOUBLE_EQ(p.value[0], 1.9);
  EXPECT_DOUBLE_EQ(p.value[1], -3.8);
}

TEST(Sgd, DecayAloneShrinksEveryStep) {
  Parameter<double> p("p", {3});
  p.value = {1.0, -2.0, 0.5};
  Sgd<double> opt({&p}, 0.9, 1e-2);
  double prev = 1e9;
  for (int i = 0; i < 50; ++i) {
    opt.step(0.05);
    double n = 0;
    for (double v : p.value) n += v * v;
    EXPECT_LT(n, prev);
    prev = n;
  }
}

TEST(Sgd, ClipGradNorm) {
  Parameter<double> a("a", {2}), b("b", {1});
  a.grad = {3.0, 0.0};
  b.grad = {4.0};
  Sgd<double> opt({&a, &b}, 0.9, 0.0);
  EXPECT_DOUBLE_EQ(opt.clip_grad_norm(1.0), 5.0);
  EXPECT_NEAR(opt.grad_norm(), 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(a.grad[0], 0.6);
  EXPECT_DOUBLE_EQ(b.grad[0], 0.8);
  opt.clip_grad_norm(10.0);  // under the cap: untouched
  EXPECT_DOUBLE_EQ(a.grad[0], 0.6);
  opt.zero_grad();
  EXPECT_EQ(opt.grad_norm(), 0.0);
}

TEST(Sgd, GradientSizeMismatch) {
  Parameter<double> p("p", {2});
  p.grad.resize(1);
  Sgd<double> opt({&p}, 0.9, 0.0);
  EXPECT_THROW(opt.step(0.1), DimensionError);
}
