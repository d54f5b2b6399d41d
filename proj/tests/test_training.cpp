#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "einmemo/errors.hpp"
#include "einmemo/optim.hpp"
#include "einmemo/training.hpp"

using namespace einmemo;

TEST(CosineLr, SingleCycle) {
  PromptTrainConfig cfg;
  cfg.epochs = 70;
  cfg.learning_rate = 0.1;
  for (int e = 0; e < 70; ++e) {
    const double expected = 0.1 * (1.0 + std::cos(std::numbers::pi * e / 70.0)) / 2.0;
    EXPECT_NEAR(cfg.lr_at(e), expected, 1e-15) << e;
  }
  EXPECT_DOUBLE_EQ(cfg.lr_at(0), 0.1);
  EXPECT_NEAR(cfg.lr_at(35), 0.05, 1e-15);
}

TEST(CosineLr, WarmRestarts) {
  EXPECT_DOUBLE_EQ(cosine_warm_restarts_lr(1.0, 10, 10), 1.0);
  EXPECT_NEAR(cosine_warm_restarts_lr(1.0, 15, 10), 0.5, 1e-15);
  // Doubling periods: 10, then 20 starting at epoch 10, then 40 at epoch 30.
  EXPECT_NEAR(cosine_warm_restarts_lr(1.0, 20, 10, 2), 0.5, 1e-15);
  EXPECT_DOUBLE_EQ(cosine_warm_restarts_lr(1.0, 30, 10, 2), 1.0);
  EXPECT_NEAR(cosine_warm_restarts_lr(2.0, 5, 10, 1, 1.0), 1.5, 1e-15);
}

TEST(Adam, MatchesHandComputation) {
  std::vector<double> p = {1.0, -2.0};
  Adam adam(2);
  const std::vector<double> g1 = {0.5, -1.0};
  adam.step<double>(p, g1, 0.1);
  // First step with bias correction moves each parameter by lr * sign(g).
  EXPECT_NEAR(p[0], 0.9, 1e-7);
  EXPECT_NEAR(p[1], -1.9, 1e-7);
  const std::vector<double> after_first = p;

  const std::vector<double> g2 = {0.25, 1.0};
  adam.step<double>(p, g2, 0.1);
  for (int i = 0; i < 2; ++i) {
    const double m = 0.9 * (0.1 * g1[i]) + 0.1 * g2[i];
    const double v = 0.999 * (0.001 * g1[i] * g1[i]) + 0.001 * g2[i] * g2[i];
    const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.999 * 0.999);
    const double first = after_first[i];
    EXPECT_NEAR(p[i], first - 0.1 * mhat / (std::sqrt(vhat) + 1e-8), 1e-12);
  }
  EXPECT_EQ(adam.steps(), 2);
}

TEST(PromptLoss, UniformLogits) {
  Logits l(49, 64);
  const std::vector<int> t(49, 5);
  EXPECT_NEAR(prompt_loss(l, t), std::log(64.0), 1e-12);
  EXPECT_NEAR(std::log(64.0), 4.1589, 1e-4);
}

TEST(PromptLoss, LargeMarginIsNearZero) {
  Logits l(3, 8);
  const std::vector<int> t = {0, 3, 7};
  for (int i = 0; i < 3; ++i) l.row(i)[t[i]] = 100.0;
  EXPECT_LT(prompt_loss(l, t), 1e-30);
}

TEST(PromptLoss, RandomLogitsMatchOracleAndGradient) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 3.0);
  std::uniform_int_distribution<int> tok(0, 63);
  Logits l(10, 64);
  for (double& v : l.values) v = n(rng);
  std::vector<int> t(10);
  for (int& v : t) v = tok(rng);

  double oracle = 0.0;
  for (int i = 0; i < 10; ++i) {
    double z = 0.0;
    for (double v : l.row(i)) z += std::exp(v);
    oracle += -std::log(std::exp(l.row(i)[t[i]]) / z);
  }
  oracle /= 10.0;
  Logits grad;
  EXPECT_NEAR(prompt_loss(l, t, &grad), oracle, 1e-9);

  for (int k : {0, 77, 300, 639}) {
    Logits plus = l, minus = l;
    plus.values[k] += 1e-6;
    minus.values[k] -= 1e-6;
    const double numeric = (prompt_loss(plus, t) - prompt_loss(minus, t)) / 2e-6;
    EXPECT_NEAR(grad.values[k], numeric, 1e-7);
  }
}

TEST(PromptLoss, InvalidTargets) {
  Logits l(2, 4);
  EXPECT_THROW(prompt_loss(l, std::vector<int>{0, 4}), UsageError);
  EXPECT_THROW(prompt_loss(l, std::vector<int>{0, -1}), UsageError);
  EXPECT_THROW(prompt_loss(l, std::vector<int>{0}), UsageError);
}

TEST(TrainConfig, ValidationAndJson) {
  PromptTrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.epochs = 0;
  EXPECT_THROW(cfg.validate(), UsageError);
  cfg.epochs = 5;
  cfg.learning_rate = 0.0;
  EXPECT_THROW(cfg.validate(), UsageError);
  cfg.learning_rate = 0.3;
  cfg.variant = Placement::Q;
  cfg.pad = 7;
  const nlohmann::json j = cfg;
  const PromptTrainConfig back = j.get<PromptTrainConfig>();
  EXPECT_EQ(back.epochs, 5);
  EXPECT_EQ(back.learning_rate, 0.3);
  EXPECT_EQ(back.variant, Placement::Q);
  EXPECT_EQ(back.pad, 7);
}
