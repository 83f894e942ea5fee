// Acceptance binary: one PASS/FAIL line per criterion, nonzero exit on any failure.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "oracle.hpp"
#include "twig/engine.hpp"
#include "twig/metrics.hpp"
#include "twig/pruning.hpp"
#include "twig/training.hpp"

using namespace twig;
using testing_util::random_ids;
using testing_util::shared_model;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Outcome ssd_exactness() {
  const auto start = Clock::now();
  SplitMix64 rng(2024);
  const int instances = 120;
  int mismatches = 0;
  std::size_t accepted = 0, drafted = 0;
  for (int i = 0; i < instances; ++i) {
    const std::uint32_t L = rng.below(2) ? 8 : 6;
    const std::uint32_t d = rng.below(2) ? 64 : 32;
    const std::uint32_t K = 1 + static_cast<std::uint32_t>(rng.below(2));
    const std::uint32_t T = 1 + static_cast<std::uint32_t>(rng.below(3));
    const std::size_t M = rng.below(2) ? 24 : 16;
    const std::size_t N = rng.below(2) ? 8 : 4;
    const std::size_t deltas[] = {1, 3, 5};
    const double thetas[] = {0.0, 0.6, 1.0};
    const SsdConfig ssd{deltas[rng.below(3)], thetas[rng.below(3)]};
    const std::size_t max_s = 8 + rng.below(17);
    const ModelConfig cfg{L, d, 4, 4 * d, 64, static_cast<std::uint32_t>(M + N + max_s + 1)};
    auto base = shared_model(cfg, 10'000 + i);
    const TwigInit inits[] = {TwigInit::Random, TwigInit::LastLayers, TwigInit::LayersKtoKT};
    auto tm = attach_twig(base, {K, T, inits[rng.below(3)]}, 20'000 + i);
    std::optional<std::size_t> kf;
    if (rng.below(2) && K + T < L) kf = K + T + 1 + rng.below(L - K - T);
    const PruneConfig prune{K, rng.below(M + 1), kf, K + T};
    const SequenceLayout layout{M, N};
    auto ids = random_ids(M + N, cfg.vocab_size, 30'000 + i);
    GenerateOptions opt;
    opt.ignore_eos = rng.below(2) == 0;
    auto res = ssd_generate(tm, ids, layout, prune, ssd, max_s, opt);
    auto ref = pruned_greedy_generate(*base, ids, layout, prune, res.kept_visual, max_s, opt);
    if (res.tokens != ref.tokens) ++mismatches;
    accepted += res.trace.total_accepted();
    drafted += res.trace.total_drafted();
  }
  const double secs = seconds_since(start);
  return {mismatches == 0 && secs < 120.0,
          fmt("%d instances, %d mismatches, drafted %zu accepted %zu, %.1fs", instances, mismatches, drafted, accepted,
              secs)};
}

Outcome retained_count_reference() {
  const std::uint64_t rs[] = {227, 134, 41}, rbars[] = {192, 128, 64};
  bool ok = true;
  std::string detail;
  for (int i = 0; i < 3; ++i) {
    const auto rbar = avg_retained_finalwipe(576, 2, rs[i], 24, 32);
    const auto r = solve_r(rbars[i], 576, 2, 24, 32);
    ok = ok && rbar == rbars[i] && r == rs[i];
    detail += fmt("R=%llu->%llu->%llu ", static_cast<unsigned long long>(rs[i]), static_cast<unsigned long long>(rbar),
                  static_cast<unsigned long long>(r));
  }
  return {ok, detail};
}

Outcome occupancy() {
  SplitMix64 rng(77);
  int mismatches = 0;
  const int tuples = 1000;
  for (int i = 0; i < tuples; ++i) {
    const std::size_t L = 2 + rng.below(40);
    const std::size_t K = rng.below(L - 1);
    const std::size_t kf = K + 1 + rng.below(L - K);
    const std::size_t M = 1 + rng.below(1000);
    const std::size_t R = rng.below(M + 1);
    auto occ = layer_occupancy({M, 1}, {K, R, kf, K}, L);
    std::uint64_t sum = 0;
    for (const auto& o : occ) sum += o.visual;
    const std::uint64_t rounded = (2 * sum + L) / (2 * L);
    if (rounded != avg_retained_finalwipe(M, K, R, kf, L)) ++mismatches;
  }
  return {mismatches == 0, fmt("%d tuples, %d mismatches", tuples, mismatches)};
}

Outcome top_r() {
  SplitMix64 rng(5);
  int mismatches = 0;
  const int trials = 500;
  for (int t = 0; t < trials; ++t) {
    const std::size_t M = 1 + rng.below(12);
    const std::size_t R = rng.below(M + 1);
    std::vector<double> scores(M);
    // Coarse grid so ties are common.
    for (auto& s : scores) s = static_cast<double>(rng.below(6)) * 0.125;
    if (top_r_select(scores, R) != oracle::exhaustive_top_r(scores, R)) ++mismatches;
  }
  return {mismatches == 0, fmt("%d vectors, %d mismatches", trials, mismatches)};
}

Outcome forced_acceptance() {
  bool ok = true;
  double worst_margin = -1.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::uint32_t L = seed % 2 ? 8 : 6;
    const std::uint32_t K = 1 + static_cast<std::uint32_t>(seed % 3);
    const ModelConfig cfg{L, 32, 4, 128, 64, 80};
    auto base = shared_model(cfg, 500 + seed);
    auto tm = attach_twig(base, {K, L - K, TwigInit::LayersKtoKT}, seed);
    const SequenceLayout layout{16, 8};
    auto ids = random_ids(24, cfg.vocab_size, 600 + seed);
    const std::size_t deltas[] = {1, 3, 5};
    const SsdConfig ssd{deltas[seed % 3], 0.0};
    GenerateOptions opt;
    opt.ignore_eos = true;
    auto res = ssd_generate(tm, ids, layout, {K, 16, std::nullopt, L}, ssd, 32, opt);
    const double n = static_cast<double>(res.tokens.size());
    const double ratio = static_cast<double>(res.trace.target_forwards) / n;
    const double bound = 1.0 / std::min(static_cast<double>(ssd.max_drafts), n) + 1e-12;
    ok = ok && res.trace.total_drafted() > 0 && tok_ar(res.trace) == 1.0 && ratio <= bound;
    worst_margin = std::max(worst_margin, ratio - bound);
  }
  return {ok, fmt("20 seeds, max(forwards/tokens - bound) = %.4f", worst_margin)};
}

Outcome cache_equivalence() {
  SplitMix64 rng(31);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const ModelConfig cfg{2 + static_cast<std::uint32_t>(rng.below(3)), 32, 4, 128, 40, 64};
    auto m = init_model(cfg, 700 + trial);
    const std::size_t total = 8 + rng.below(20);
    const std::size_t visual = 1 + rng.below(4);
    const std::size_t split = visual + 1 + rng.below(total - visual - 1);
    auto ids = random_ids(total, cfg.vocab_size, 800 + trial);
    std::vector<TokenId> prefix(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(split));
    auto pre = prefill(m, prefix, {visual, split - visual});
    auto diff = [](std::span<const double> a, const std::vector<double>& b) {
      double w = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) w = std::max(w, std::abs(a[i] - b[i]));
      return w;
    };
    worst = std::max(worst, diff(pre.last_logits.last(), oracle::target_last_logits(m, prefix, std::nullopt)));
    for (std::size_t p = split; p < total; ++p) {
      auto step = decode_step(m, pre.cache, ids[p]);
      std::vector<TokenId> seen(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(p + 1));
      worst = std::max(worst, diff(step.last(), oracle::target_last_logits(m, seen, std::nullopt)));
    }
  }
  return {worst <= 1e-9, fmt("50 splits, max |diff| = %.3e", worst)};
}

Outcome gradient_check() {
  const auto start = Clock::now();
  auto base = shared_model({4, 16, 2, 64, 16, 32}, 41);
  auto tm = attach_twig(base, {1, 2, TwigInit::Random}, 42);
  auto data = make_copy_task(base->config, 2, {4, 3}, 3, 43);
  auto g = backward(tm, data);
  auto params = parameter_spans(tm);
  auto grads = parameter_spans(g.gradients);
  const double h = 1e-5;
  double worst = 0.0;
  std::size_t count = 0;
  for (std::size_t s = 0; s < params.size(); ++s) {
    for (std::size_t i = 0; i < params[s].size(); ++i) {
      const double saved = params[s][i];
      params[s][i] = saved + h;
      const double up = ar_loss(tm, data);
      params[s][i] = saved - h;
      const double down = ar_loss(tm, data);
      params[s][i] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(fd), std::abs(grads[s][i]), 1e-6});
      worst = std::max(worst, std::abs(fd - grads[s][i]) / denom);
      ++count;
    }
  }
  const double secs = seconds_since(start);
  return {worst <= 1e-4 && secs < 60.0, fmt("%zu parameters, max rel err = %.3e, %.1fs", count, worst, secs)};
}

Outcome frozen_trunk() {
  auto base = shared_model({4, 32, 4, 128, 16, 32}, 51);
  const auto trunk_before = checksum(*base);
  auto data = make_copy_task(base->config, 64, {4, 4}, 4, 52);
  TrainConfig cfg;
  cfg.steps = 200;
  cfg.batch_size = 16;
  cfg.peak_lr = 1e-2;
  cfg.warmup_ratio = 0.05;
  cfg.seed = 53;
  auto a = attach_twig(base, {2, 2, TwigInit::LayersKtoKT}, 54);
  auto b = attach_twig(base, {2, 2, TwigInit::LayersKtoKT}, 54);
  const double initial = ar_loss(a, data);
  auto curve_a = train_twig(a, data, cfg);
  auto curve_b = train_twig(b, data, cfg);
  const double final_loss = ar_loss(a, data);
  bool same = curve_a.size() == curve_b.size() && twig_checksum(a) == twig_checksum(b);
  for (std::size_t i = 0; same && i < curve_a.size(); ++i) same = curve_a[i].loss == curve_b[i].loss;
  const bool frozen = checksum(*base) == trunk_before;
  return {frozen && same && final_loss <= 0.8 * initial,
          fmt("trunk %s, loss %.4f -> %.4f (ratio %.3f), reproducible %s", frozen ? "unchanged" : "CHANGED", initial,
              final_loss, final_loss / initial, same ? "yes" : "no")};
}

Outcome decode_linearity() {
  const ModelConfig cfg{8, 128, 4, 512, 256, 224};
  auto m = init_model(cfg, 61);
  const SequenceLayout layout{64, 16};
  auto ids = random_ids(layout.prompt_length(), cfg.vocab_size, 62);
  const std::size_t lengths[] = {8, 16, 32, 64, 128};
  auto pts = bench_decode_scaling(m, ids, layout, lengths, 5);
  std::vector<double> xs, ys;
  bool increasing = true;
  std::string fractions;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    xs.push_back(static_cast<double>(pts[i].response_length));
    ys.push_back(pts[i].timing.decode_seconds);
    fractions += fmt("%.3f ", pts[i].decode_fraction());
    if (i > 0 && !(pts[i].decode_fraction() > pts[i - 1].decode_fraction())) increasing = false;
  }
  auto fit = linear_fit(xs, ys);
  return {fit.r_squared >= 0.95 && increasing,
          fmt("R^2 = %.4f, decode fractions %s", fit.r_squared, fractions.c_str())};
}

Outcome flop_consistency() {
  SplitMix64 rng(71);
  int mismatches = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::uint32_t L = 2 + static_cast<std::uint32_t>(rng.below(6));
    const std::uint32_t H = 1 + static_cast<std::uint32_t>(rng.below(4));
    const std::uint32_t d = H * (4 + static_cast<std::uint32_t>(rng.below(5)));
    const ModelConfig cfg{L, d, H, d * (1 + static_cast<std::uint32_t>(rng.below(4))), 30, 64};
    auto m = init_model(cfg, 900 + trial);
    const std::size_t M = 1 + rng.below(20), N = 1 + rng.below(8);
    auto ids = random_ids(M + N, cfg.vocab_size, 950 + trial);
    const std::size_t K = 1 + rng.below(L - 1);
    std::optional<std::size_t> kf;
    if (rng.below(2)) kf = K + 1 + rng.below(L - K);
    const PruneConfig p{K, rng.below(M + 1), kf, K + rng.below(L - K + 1)};
    FlopCounter full, pruned;
    prefill(m, ids, {M, N}, {}, &full);
    pruned_prefill(m, ids, {M, N}, p, std::nullopt, &pruned);
    if (full.flops != flops_prefill(cfg, {M, N})) ++mismatches;
    if (pruned.flops != flops_prefill(cfg, {M, N}, p)) ++mismatches;
  }
  return {mismatches == 0, fmt("20 configs x {unpruned, pruned}, %d mismatches", mismatches)};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"ssd_exactness", ssd_exactness},         {"retained_count_reference", retained_count_reference},
      {"occupancy_cross_check", occupancy},     {"top_r_oracle", top_r},
      {"forced_acceptance", forced_acceptance}, {"cache_equivalence", cache_equivalence},
      {"gradient_check", gradient_check},       {"frozen_trunk", frozen_trunk},
      {"decode_linearity", decode_linearity},   {"flop_consistency", flop_consistency},
  };
  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
