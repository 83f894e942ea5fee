#include "twig/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <thread>

#include "twig/error.hpp"

namespace twig {

std::uint64_t flops_layer(std::uint64_t d, std::uint64_t d_ff, std::uint64_t s_q, std::uint64_t s_kv) {
  return 8 * s_q * d * d + 4 * s_q * s_kv * d + 4 * s_q * d * d_ff;
}

std::uint64_t flops_prefill(const ModelConfig& cfg, const SequenceLayout& layout,
                            const std::optional<PruneConfig>& prune) {
  cfg.validate();
  std::uint64_t total = 0;
  if (!prune) {
    const std::uint64_t s = layout.prompt_length();
    for (std::uint32_t l = 0; l < cfg.num_layers; ++l) total += flops_layer(cfg.hidden_dim, cfg.ffn_dim, s, s);
    return total;
  }
  for (const auto& occ : layer_occupancy(layout, *prune, cfg.num_layers)) {
    const std::uint64_t s = occ.visual + occ.text;
    total += flops_layer(cfg.hidden_dim, cfg.ffn_dim, s, s);
  }
  return total;
}

double tok_ar(const GenerationTrace& trace) {
  const std::size_t drafted = trace.total_drafted();
  if (drafted == 0) throw InputError("tok_ar: trace has no drafted tokens");
  return static_cast<double>(trace.total_accepted()) / static_cast<double>(drafted);
}

namespace {

double speed(const TimingReport& r) {
  const double seconds = r.total_seconds();
  if (!(seconds > 0.0)) throw MeasurementError("rel_spd: zero-duration timing report");
  return static_cast<double>(r.tokens_generated) / seconds;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

TimingReport median_report(const std::vector<TimingReport>& runs) {
  std::vector<double> prefill, decode;
  for (const auto& r : runs) {
    prefill.push_back(r.prefill_seconds);
    decode.push_back(r.decode_seconds);
  }
  return {median(prefill), median(decode), runs.front().tokens_generated};
}

}  // namespace

double rel_spd(const TimingReport& base, const TimingReport& accel) { return speed(accel) / speed(base); }

double rel_spd(std::span<const TimingReport> base, std::span<const TimingReport> accel) {
  if (base.empty() || accel.empty()) throw MeasurementError("rel_spd: no samples");
  double base_mean = 0.0;
  for (const auto& r : base) base_mean += speed(r);
  base_mean /= static_cast<double>(base.size());
  double accel_mean = 0.0;
  for (const auto& r : accel) accel_mean += speed(r);
  accel_mean /= static_cast<double>(accel.size());
  return accel_mean / base_mean;
}

std::vector<ScalingPoint> bench_decode_scaling(const Model& model, std::span<const TokenId> token_ids,
                                               const SequenceLayout& layout, std::span<const std::size_t> lengths,
                                               std::size_t repetitions) {
  if (lengths.empty()) throw InputError("bench_decode_scaling: empty S list");
  if (repetitions < 1) throw InputError("bench_decode_scaling: repetitions must be >= 1");
  std::vector<ScalingPoint> out;
  for (auto s : lengths) {
    GenerateOptions options;
    options.ignore_eos = true;
    TimingReport warmup;
    options.timing = &warmup;
    greedy_generate(model, token_ids, layout, s, options);
    std::vector<TimingReport> runs(repetitions);
    for (auto& run : runs) {
      options.timing = &run;
      greedy_generate(model, token_ids, layout, s, options);
    }
    out.push_back({s, median_report(runs)});
  }
  return out;
}

LinearFit linear_fit(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2) throw InputError("linear_fit: need >= 2 paired samples");
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx == 0.0) throw InputError("linear_fit: x values are constant");
  LinearFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.r_squared = syy == 0.0 ? 1.0 : (sxy * sxy) / (sxx * syy);
  return fit;
}

namespace {

BenchRow run_bench_config(const TwigModel& tm, std::span<const TokenId> token_ids, const SequenceLayout& layout,
                          const BenchConfig& cfg, std::size_t length, std::size_t repetitions) {
  const Model& base = *tm.base;
  BenchRow row;
  row.config_id = cfg.id;
  row.response_length = length;
  row.flops_prefill_full = flops_prefill(base.config, layout);
  row.flops_prefill_pruned = cfg.mode == BenchMode::Greedy ? row.flops_prefill_full
                                                           : flops_prefill(base.config, layout, cfg.prune);

  std::vector<TimingReport> runs(repetitions + 1);
  for (std::size_t r = 0; r < runs.size(); ++r) {
    GenerateOptions options;
    options.ignore_eos = true;
    options.timing = &runs[r];
    switch (cfg.mode) {
      case BenchMode::Greedy: {
        auto gen = greedy_generate(base, token_ids, layout, length, options);
        row.tokens = gen.tokens.size();
        row.target_forwards = gen.tokens.size() - 1;
        break;
      }
      case BenchMode::FastV: {
        auto gen = fastv_generate(base, token_ids, layout, *cfg.prune, length, options);
        row.tokens = gen.tokens.size();
        row.target_forwards = gen.tokens.size() - 1;
        break;
      }
      case BenchMode::TwigSsd: {
        auto res = ssd_generate(tm, token_ids, layout, *cfg.prune, cfg.ssd, length, options);
        row.tokens = res.tokens.size();
        row.target_forwards = res.trace.target_forwards;
        row.tok_ar = tok_ar(res.trace);
        break;
      }
    }
  }
  runs.erase(runs.begin());  // warmup
  auto med = median_report(runs);
  row.prefill_seconds = med.prefill_seconds;
  row.decode_seconds = med.decode_seconds;
  return row;
}

}  // namespace

std::vector<BenchRow> bench_sweep(const TwigModel& tm, std::span<const TokenId> token_ids,
                                  const SequenceLayout& layout, std::span<const BenchConfig> configs,
                                  std::span<const std::size_t> lengths, std::size_t repetitions,
                                  std::size_t threads) {
  if (lengths.empty()) throw InputError("bench: empty S list");
  if (repetitions < 1) throw InputError("bench: repetitions must be >= 1");
  for (const auto& cfg : configs) {
    if (cfg.mode != BenchMode::Greedy && !cfg.prune) throw ConfigError("bench: config '" + cfg.id + "' needs pruning");
  }
  std::vector<BenchRow> rows(configs.size() * lengths.size());
  std::vector<std::exception_ptr> errors(configs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t c = next++; c < configs.size(); c = next++) {
      try {
        for (std::size_t s = 0; s < lengths.size(); ++s) {
          rows[c * lengths.size() + s] = run_bench_config(tm, token_ids, layout, configs[c], lengths[s], repetitions);
        }
      } catch (...) {
        errors[c] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(configs.size(), 1));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return rows;
}

std::string bench_csv_header() {
  return "config_id,S,prefill_s,decode_s,tokens,tok_ar,target_forwards,flops_prefill_pruned,flops_prefill_full";
}

std::string to_csv(const BenchRow& row) {
  std::ostringstream os;
  os << std::setprecision(9);
  os << row.config_id << ',' << row.response_length << ',' << row.prefill_seconds << ',' << row.decode_seconds << ','
     << row.tokens << ',';
  if (row.tok_ar) os << *row.tok_ar;
  os << ',' << row.target_forwards << ',' << row.flops_prefill_pruned << ',' << row.flops_prefill_full;
  return os.str();
}

}  // namespace twig
