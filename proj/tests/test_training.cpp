#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "helpers.hpp"
#include "oracle.hpp"
#include "twig/error.hpp"
#include "twig/training.hpp"

using namespace twig;
using testing_util::shared_model;
using testing_util::small_config;

namespace {

// Straight-line loss: oracle forward of trunk + twig, mean cross-entropy over
// response predictions.
double oracle_loss(const TwigModel& tm, const std::vector<Example>& batch) {
  const Model& m = *tm.base;
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& ex : batch) {
    auto x = oracle::embed(m, ex.tokens);
    auto pos = testing_util::iota(0, ex.tokens.size());
    for (std::size_t l = 0; l < tm.config.trunk_depth; ++l) x = oracle::block(m.layers[l], m.config.num_heads, x, pos);
    for (const auto& layer : tm.layers) x = oracle::block(layer, m.config.num_heads, x, pos);
    for (std::size_t p = ex.layout.prompt_length() - 1; p + 1 < ex.tokens.size(); ++p) {
      auto z = oracle::logits(tm.final_norm, tm.head, x[p]);
      double mx = z[0];
      for (double v : z) mx = std::max(mx, v);
      double s = 0.0;
      for (double v : z) s += std::exp(v - mx);
      total += std::log(s) + mx - z[static_cast<std::size_t>(ex.tokens[p + 1])];
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

TwigModel grad_check_model(std::uint64_t seed) {
  auto base = shared_model(small_config(4, 16, 2, 16, 32), seed);
  return attach_twig(base, {1, 2, TwigInit::Random}, seed + 1);
}

}  // namespace

TEST(TrainConfig, DefaultsAndValidation) {
  TrainConfig cfg;
  EXPECT_EQ(cfg.peak_lr, 5e-5);
  EXPECT_EQ(cfg.warmup_ratio, 0.03);
  EXPECT_EQ(cfg.beta1, 0.9);
  EXPECT_EQ(cfg.beta2, 0.98);
  EXPECT_EQ(cfg.weight_decay, 0.0);
  cfg.steps = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.beta2 = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.warmup_ratio = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(TrainConfig, WarmupThenCosine) {
  TrainConfig cfg;
  cfg.steps = 100;
  cfg.peak_lr = 1.0;
  cfg.warmup_ratio = 0.1;
  EXPECT_EQ(cfg.warmup_steps(), 10u);
  EXPECT_EQ(cfg.lr_at(0), 0.0);
  EXPECT_DOUBLE_EQ(cfg.lr_at(5), 0.5);
  EXPECT_DOUBLE_EQ(cfg.lr_at(10), 1.0);
  EXPECT_NEAR(cfg.lr_at(55), 0.5 * (1.0 + std::cos(std::numbers::pi * 0.5)), 1e-15);
  for (std::size_t s = 11; s < 100; ++s) EXPECT_LE(cfg.lr_at(s), cfg.lr_at(s - 1));
}

TEST(CopyTask, ResponseRepeatsTextTokens) {
  auto data = make_copy_task(small_config(), 5, {3, 4}, 3, 1);
  ASSERT_EQ(data.size(), 5u);
  for (const auto& ex : data) {
    ASSERT_EQ(ex.tokens.size(), 10u);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(ex.tokens[7 + i], ex.tokens[3 + i]);
    for (auto t : ex.tokens) EXPECT_LT(t, 31);
  }
  EXPECT_THROW(make_copy_task(small_config(), 1, {3, 2}, 3, 1), InputError);
}

TEST(ArLoss, MatchesStraightLineOracle) {
  auto tm = grad_check_model(3);
  auto data = make_copy_task(tm.base->config, 3, {4, 3}, 2, 4);
  EXPECT_NEAR(ar_loss(tm, data), oracle_loss(tm, data), 1e-12);
  EXPECT_NEAR(backward(tm, data).loss, ar_loss(tm, data), 1e-12);
}

TEST(ArLoss, UntrainedLossNearGaussianLogitEstimate) {
  auto tm = grad_check_model(4);
  auto data = make_copy_task(tm.base->config, 8, {4, 3}, 3, 5);
  // Unit-variance logits over V classes: expected cross-entropy is about log V + 1/2.
  EXPECT_NEAR(ar_loss(tm, data), std::log(16.0) + 0.5, 0.3);
}

TEST(Backward, MatchesCentralDifferencesOnSampledParameters) {
  auto tm = grad_check_model(5);
  auto data = make_copy_task(tm.base->config, 2, {4, 3}, 3, 6);
  auto g = backward(tm, data);
  auto params = parameter_spans(tm);
  auto grads = parameter_spans(g.gradients);
  ASSERT_EQ(params.size(), grads.size());
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t s = 0; s < params.size(); ++s) {
    // Every tensor, a handful of entries each; the full sweep runs in the acceptance binary.
    for (std::size_t i = 0; i < params[s].size(); i += 1 + params[s].size() / 7) {
      const double saved = params[s][i];
      params[s][i] = saved + h;
      const double up = ar_loss(tm, data);
      params[s][i] = saved - h;
      const double down = ar_loss(tm, data);
      params[s][i] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(fd), std::abs(grads[s][i]), 1e-6});
      worst = std::max(worst, std::abs(fd - grads[s][i]) / denom);
    }
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(Backward, ZeroSupervisionGivesZeroGradient) {
  auto tm = grad_check_model(6);
  std::vector<Example> empty;
  auto g = backward(tm, empty);
  EXPECT_EQ(g.supervised, 0u);
  for (auto s : parameter_spans(g.gradients)) {
    for (double v : s) EXPECT_EQ(v, 0.0);
  }
  EXPECT_THROW(ar_loss(tm, empty), InputError);
}

TEST(TrainTwig, TrunkFrozenAndDeterministic) {
  auto base = shared_model(small_config(3, 16, 2, 16, 32), 7);
  const auto base_sum = checksum(*base);
  auto data = make_copy_task(base->config, 16, {4, 3}, 2, 8);
  TrainConfig cfg;
  cfg.steps = 20;
  cfg.batch_size = 4;
  cfg.peak_lr = 1e-3;
  cfg.seed = 9;
  auto a = attach_twig(base, {1, 1, TwigInit::LayersKtoKT}, 1);
  auto b = attach_twig(base, {1, 1, TwigInit::LayersKtoKT}, 1);
  const auto before = twig_checksum(a);
  std::size_t callbacks = 0;
  auto ca = train_twig(a, data, cfg, [&](const StepRecord&) { ++callbacks; });
  auto cb = train_twig(b, data, cfg);
  EXPECT_EQ(callbacks, 20u);
  EXPECT_EQ(checksum(*base), base_sum);
  EXPECT_NE(twig_checksum(a), before);
  EXPECT_EQ(twig_checksum(a), twig_checksum(b));
  ASSERT_EQ(ca.size(), cb.size());
  for (std::size_t i = 0; i < ca.size(); ++i) {
    EXPECT_EQ(ca[i].loss, cb[i].loss);
    EXPECT_EQ(ca[i].lr, cfg.lr_at(i));
  }
}

TEST(TrainTwig, NonFiniteLossRaisesTrainingError) {
  auto base = shared_model(small_config(3, 16, 2, 16, 32), 7);
  auto tm = attach_twig(base, {1, 1, TwigInit::Random}, 1);
  tm.head(0, 0) = std::numeric_limits<double>::infinity();
  auto data = make_copy_task(base->config, 4, {4, 3}, 2, 8);
  TrainConfig cfg;
  cfg.steps = 2;
  EXPECT_THROW(train_twig(tm, data, cfg), TrainingError);
}

TEST(TrainTwig, RejectsEmptyDataset) {
  auto base = shared_model(small_config(3, 16, 2, 16, 32), 7);
  auto tm = attach_twig(base, {1, 1, TwigInit::Random}, 1);
  std::vector<Example> none;
  EXPECT_THROW(train_twig(tm, none, TrainConfig{}), InputError);
}
