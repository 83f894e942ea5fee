// twig: command-line front end over the C API.
//
// Subcommands: gen, ssd, prune-solve, train, bench, export-attn, flops.
// Values come from an optional JSON config (--config) with flags taking
// precedence. Exit codes: 0 success, 1 runtime failure, 2 usage/config error;
// failures print {"error": {...}} on stdout.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "twig_c.h"

using nlohmann::json;

namespace {

// A usage or configuration problem, attributed to a config field when known.
struct UsageError : std::runtime_error {
  UsageError(std::string field_path, const std::string& what) : std::runtime_error(what), field(std::move(field_path)) {}
  std::string field;
};

// A failure reported by the C API.
struct ApiError : std::runtime_error {
  ApiError(twig_status s, const std::string& what) : std::runtime_error(what), status(s) {}
  twig_status status;
};

void check(twig_status s, const std::string& field = "") {
  if (s == TWIG_OK) return;
  // Bad parameters surface as config, input or domain errors; all come from flags.
  if (s == TWIG_ERR_CONFIG || s == TWIG_ERR_INPUT || s == TWIG_ERR_DOMAIN) {
    throw UsageError(field, std::string(twig_status_name(s)) + ": " + twig_last_error());
  }
  throw ApiError(s, twig_last_error());
}

std::string dotted(const std::string& pointer) {
  std::string out;
  for (char c : pointer.substr(1)) out += c == '/' ? '.' : c;
  return out;
}

// Every accepted config key, as JSON pointers.
const std::set<std::string>& known_fields() {
  static const std::set<std::string> fields = {
      "/seed",          "/mode",          "/max_s",          "/ignore_eos",      "/weights",
      "/model/layers",  "/model/d",       "/model/heads",    "/model/d_ff",      "/model/vocab",
      "/model/max_positions",             "/layout/m",       "/layout/n",        "/prune/k",
      "/prune/r",       "/prune/target_rbar",                "/prune/kf",        "/prune/depth",
      "/twig/t",        "/twig/init",     "/ssd/delta",      "/ssd/theta",       "/train/steps",
      "/train/lr",      "/train/warmup_ratio",               "/train/batch",     "/train/beta1",
      "/train/beta2",   "/train/eps",     "/train/weight_decay",                 "/train/examples",
      "/train/response", "/bench/lengths", "/bench/reps",    "/bench/modes",     "/attn/layer",
  };
  return fields;
}

void check_known(const json& node, const std::string& prefix) {
  if (!node.is_object()) {
    if (!known_fields().count(prefix)) throw UsageError(dotted(prefix), "unknown config field");
    return;
  }
  if (!prefix.empty() && known_fields().count(prefix)) throw UsageError(dotted(prefix), "expected a scalar value");
  for (const auto& [key, value] : node.items()) {
    const std::string path = prefix + "/" + key;
    bool is_group = false;
    for (const auto& f : known_fields()) is_group |= f.rfind(path + "/", 0) == 0;
    if (!is_group && !known_fields().count(path)) throw UsageError(dotted(path), "unknown config field");
    if (is_group && !value.is_object()) throw UsageError(dotted(path), "expected an object");
    if (is_group) check_known(value, path);
  }
}

class RunConfig {
 public:
  json values = json::object();

  bool has(const std::string& ptr) const { return values.contains(json::json_pointer(ptr)); }

  std::uint64_t u64(const std::string& ptr, std::uint64_t fallback) const {
    if (!has(ptr)) return fallback;
    const auto& v = values.at(json::json_pointer(ptr));
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw UsageError(dotted(ptr), "expected a non-negative integer");
    }
    return v.get<std::uint64_t>();
  }
  std::size_t size(const std::string& ptr, std::size_t fallback) const {
    return static_cast<std::size_t>(u64(ptr, fallback));
  }
  double real(const std::string& ptr, double fallback) const {
    if (!has(ptr)) return fallback;
    const auto& v = values.at(json::json_pointer(ptr));
    if (!v.is_number()) throw UsageError(dotted(ptr), "expected a number");
    return v.get<double>();
  }
  std::string str(const std::string& ptr, const std::string& fallback) const {
    if (!has(ptr)) return fallback;
    const auto& v = values.at(json::json_pointer(ptr));
    if (!v.is_string()) throw UsageError(dotted(ptr), "expected a string");
    return v.get<std::string>();
  }
  bool flag(const std::string& ptr) const {
    if (!has(ptr)) return false;
    const auto& v = values.at(json::json_pointer(ptr));
    if (!v.is_boolean()) throw UsageError(dotted(ptr), "expected a boolean");
    return v.get<bool>();
  }
  std::vector<std::size_t> sizes(const std::string& ptr, std::vector<std::size_t> fallback) const {
    if (!has(ptr)) return fallback;
    const auto& v = values.at(json::json_pointer(ptr));
    if (!v.is_array()) throw UsageError(dotted(ptr), "expected an array of integers");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number_unsigned()) throw UsageError(dotted(ptr) + "[" + std::to_string(i) + "]", "expected a non-negative integer");
      out.push_back(v[i].get<std::size_t>());
    }
    return out;
  }
  std::vector<std::string> strings(const std::string& ptr, std::vector<std::string> fallback) const {
    if (!has(ptr)) return fallback;
    const auto& v = values.at(json::json_pointer(ptr));
    if (!v.is_array()) throw UsageError(dotted(ptr), "expected an array of strings");
    std::vector<std::string> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_string()) throw UsageError(dotted(ptr) + "[" + std::to_string(i) + "]", "expected a string");
      out.push_back(v[i].get<std::string>());
    }
    return out;
  }
};

// Flag values collected during parsing, applied over the config file.
struct Overrides {
  std::string config_path;
  json values = json::object();
};

template <typename T>
void bind(CLI::App* app, Overrides& ov, const std::string& flag, const std::string& ptr, const std::string& help) {
  app->add_option_function<T>(flag, [&ov, ptr](const T& v) { ov.values[json::json_pointer(ptr)] = v; }, help);
}

void bind_switch(CLI::App* app, Overrides& ov, const std::string& flag, const std::string& ptr,
                 const std::string& help) {
  app->add_flag_callback(flag, [&ov, ptr]() { ov.values[json::json_pointer(ptr)] = true; }, help);
}

void add_common(CLI::App* app, Overrides& ov) {
  app->add_option("--config", ov.config_path, "JSON config file; flags override its values");
  bind<std::uint64_t>(app, ov, "--seed", "/seed", "seed for weights and prompt (default 0)");
  bind<std::string>(app, ov, "--weights", "/weights", "load TWG1 weights instead of seeded init");
  bind<std::uint64_t>(app, ov, "--l", "/model/layers", "number of layers L");
  bind<std::uint64_t>(app, ov, "--d", "/model/d", "hidden width d");
  bind<std::uint64_t>(app, ov, "--heads", "/model/heads", "attention heads H");
  bind<std::uint64_t>(app, ov, "--d-ff", "/model/d_ff", "FFN width");
  bind<std::uint64_t>(app, ov, "--vocab", "/model/vocab", "vocabulary size V (EOS = V-1)");
  bind<std::uint64_t>(app, ov, "--max-positions", "/model/max_positions", "positional table size (default M+N+max_s)");
  bind<std::uint64_t>(app, ov, "--m", "/layout/m", "visual tokens M");
  bind<std::uint64_t>(app, ov, "--n", "/layout/n", "text tokens N");
  bind<std::uint64_t>(app, ov, "--k", "/prune/k", "pruning layer K (1-based)");
  bind<std::uint64_t>(app, ov, "--r", "/prune/r", "retained visual tokens R");
  bind<std::uint64_t>(app, ov, "--target-rbar", "/prune/target_rbar", "solve R from a target average");
  bind<std::uint64_t>(app, ov, "--kf", "/prune/kf", "FinalWipe layer K_f (0 disables)");
  bind<std::uint64_t>(app, ov, "--depth", "/prune/depth", "attention depth D guiding selection");
  bind<std::uint64_t>(app, ov, "--t", "/twig/t", "twig layers T");
  bind<std::string>(app, ov, "--twig-init", "/twig/init", "random | last-layers | layers-k-to-kt");
  bind<std::uint64_t>(app, ov, "--delta", "/ssd/delta", "max drafts per iteration (default 5)");
  bind<double>(app, ov, "--theta", "/ssd/theta", "draft confidence threshold (default 0.6)");
  bind<std::uint64_t>(app, ov, "--max-s", "/max_s", "max response tokens");
  bind_switch(app, ov, "--ignore-eos", "/ignore_eos", "forced-length generation");
}

RunConfig load_run_config(const Overrides& ov) {
  RunConfig rc;
  if (!ov.config_path.empty()) {
    std::ifstream in(ov.config_path);
    if (!in) throw UsageError("config", "cannot open config file '" + ov.config_path + "'");
    try {
      rc.values = json::parse(in);
    } catch (const json::parse_error& e) {
      throw UsageError("config", std::string("malformed config file: ") + e.what());
    }
    if (!rc.values.is_object()) throw UsageError("config", "config file must hold a JSON object");
  }
  rc.values.merge_patch(ov.values);
  check_known(rc.values, "");
  return rc;
}

struct Setup {
  std::uint64_t seed = 0;
  twig_model_config cfg{};
  twig_layout layout{};
  std::size_t max_s = 32;
  bool ignore_eos = false;
  std::vector<int32_t> prompt;
  twig_model* model = nullptr;

  ~Setup() { twig_model_free(model); }
};

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seeded prompt ids in [0, V-1); EOS never appears in the prompt.
std::vector<int32_t> make_prompt(std::uint64_t seed, std::size_t length, std::uint32_t vocab) {
  std::vector<int32_t> ids(length);
  std::uint64_t state = mix(seed ^ 0x70726f6d7074ULL);
  for (auto& id : ids) {
    state = mix(state);
    id = static_cast<int32_t>(state % (vocab - 1));
  }
  return ids;
}

void build_model(const RunConfig& rc, Setup& s, std::size_t longest_response) {
  s.seed = rc.u64("/seed", 0);
  s.max_s = rc.size("/max_s", 32);
  s.ignore_eos = rc.flag("/ignore_eos");
  s.layout = {rc.size("/layout/m", 16), rc.size("/layout/n", 8)};
  const std::string weights = rc.str("/weights", "");
  if (!weights.empty()) {
    check(twig_model_load(weights.c_str(), &s.model), "weights");
    check(twig_model_get_config(s.model, &s.cfg));
  } else {
    s.cfg.num_layers = static_cast<std::uint32_t>(rc.u64("/model/layers", 8));
    s.cfg.hidden_dim = static_cast<std::uint32_t>(rc.u64("/model/d", 64));
    s.cfg.num_heads = static_cast<std::uint32_t>(rc.u64("/model/heads", 4));
    s.cfg.ffn_dim = static_cast<std::uint32_t>(rc.u64("/model/d_ff", 4ULL * s.cfg.hidden_dim));
    s.cfg.vocab_size = static_cast<std::uint32_t>(rc.u64("/model/vocab", 128));
    const std::size_t needed = s.layout.num_visual + s.layout.num_text + std::max(s.max_s, longest_response);
    s.cfg.max_positions = static_cast<std::uint32_t>(rc.u64("/model/max_positions", needed));
    check(twig_model_create(&s.cfg, s.seed, &s.model), "model");
  }
  if (s.cfg.vocab_size < 2) throw UsageError("model.vocab", "vocabulary must hold at least 2 ids");
  s.prompt = make_prompt(s.seed, s.layout.num_visual + s.layout.num_text, s.cfg.vocab_size);
}

twig_prune_config read_prune(const RunConfig& rc, const Setup& s, std::size_t default_depth_offset) {
  twig_prune_config p{};
  p.prune_layer = rc.size("/prune/k", 2);
  p.final_wipe_layer = rc.size("/prune/kf", 0);
  const std::size_t m = s.layout.num_visual;
  if (rc.has("/prune/r") && rc.has("/prune/target_rbar")) {
    throw UsageError("prune.target_rbar", "prune.r and prune.target_rbar are mutually exclusive");
  }
  if (rc.has("/prune/target_rbar")) {
    const std::uint64_t kf = p.final_wipe_layer ? p.final_wipe_layer : s.cfg.num_layers;
    std::uint64_t r = 0;
    check(twig_solve_r(rc.u64("/prune/target_rbar", 0), m, p.prune_layer, kf, s.cfg.num_layers, &r),
          "prune.target_rbar");
    p.retained = r;
  } else {
    p.retained = rc.size("/prune/r", m / 2);
  }
  p.selection_depth = rc.size("/prune/depth", p.prune_layer + default_depth_offset);
  return p;
}

void attach_twig(const RunConfig& rc, Setup& s, const twig_prune_config& prune) {
  int has_twig = 0;
  check(twig_model_checksum(s.model, nullptr, nullptr, &has_twig));
  if (has_twig && !rc.has("/twig/t") && !rc.has("/twig/init")) return;
  const auto t = static_cast<std::uint32_t>(rc.u64("/twig/t", 2));
  const std::string init = rc.str("/twig/init", "layers-k-to-kt");
  check(twig_model_attach_twig(s.model, static_cast<std::uint32_t>(prune.prune_layer), t, init.c_str(),
                               mix(s.seed ^ 0x74776967ULL)),
        "twig");
}

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::size_t twig_depth(const twig_model* model) {
  std::uint32_t t = 0;
  check(twig_model_twig_shape(model, nullptr, &t));
  return t;
}

int cmd_gen(const RunConfig& rc) {
  Setup s;
  build_model(rc, s, 0);
  const std::string mode = rc.str("/mode", "greedy");
  std::vector<int32_t> tokens(s.max_s);
  std::size_t len = 0;
  std::uint64_t sum = 0;
  if (mode == "greedy") {
    check(twig_generate_greedy(s.model, s.prompt.data(), s.prompt.size(), &s.layout, s.max_s, s.ignore_eos,
                               tokens.data(), &len, &sum));
  } else if (mode == "fastv") {
    auto prune = read_prune(rc, s, 0);
    check(twig_generate_fastv(s.model, s.prompt.data(), s.prompt.size(), &s.layout, &prune, s.max_s, s.ignore_eos,
                              tokens.data(), &len, &sum),
          "prune");
  } else {
    throw UsageError("mode", "mode must be 'greedy' or 'fastv'");
  }
  tokens.resize(len);
  json out = {{"seed", s.seed}, {"mode", mode}, {"tokens", tokens}, {"logit_checksum", hex64(sum)}};
  std::cout << out.dump() << "\n";
  return 0;
}

int cmd_ssd(const RunConfig& rc, const std::string& trace_path, bool verify) {
  Setup s;
  build_model(rc, s, 0);
  const std::size_t t_default = rc.size("/twig/t", 2);
  auto prune = read_prune(rc, s, t_default);
  attach_twig(rc, s, prune);
  if (!rc.has("/prune/depth")) prune.selection_depth = prune.prune_layer + twig_depth(s.model);
  twig_ssd_config ssd{rc.size("/ssd/delta", 5), rc.real("/ssd/theta", 0.6)};

  twig_trace* trace = nullptr;
  check(twig_ssd_generate(s.model, s.prompt.data(), s.prompt.size(), &s.layout, &prune, &ssd, s.max_s, s.ignore_eos,
                          &trace),
        "ssd");
  std::unique_ptr<twig_trace, decltype(&twig_trace_free)> guard(trace, twig_trace_free);
  twig_trace_summary summary{};
  check(twig_trace_summary_get(trace, &summary));
  const int32_t* tok = nullptr;
  std::size_t ntok = 0;
  check(twig_trace_tokens(trace, &tok, &ntok));
  const std::size_t* kept = nullptr;
  std::size_t nkept = 0;
  check(twig_trace_kept_visual(trace, &kept, &nkept));
  std::vector<int32_t> tokens(tok, tok + ntok);

  if (!trace_path.empty()) {
    std::ofstream jl(trace_path);
    if (!jl) throw ApiError(TWIG_ERR_IO, "cannot open trace file '" + trace_path + "'");
    for (std::size_t i = 0; i < summary.iterations; ++i) {
      twig_iteration it{};
      check(twig_trace_iteration_get(trace, i, &it));
      json line = {{"iter", i},
                   {"drafted", std::vector<int32_t>(it.drafted, it.drafted + it.num_drafted)},
                   {"accepted", it.accepted},
                   {"correction", it.has_correction ? json(it.correction) : json(nullptr)},
                   {"early_exit", it.early_exit != 0}};
      jl << line.dump() << "\n";
    }
    json last = {{"tokens", summary.tokens},
                 {"iterations", summary.iterations},
                 {"tok_ar", summary.tok_ar},
                 {"target_forwards", summary.target_forwards}};
    jl << last.dump() << "\n";
    if (!jl) throw ApiError(TWIG_ERR_IO, "failed writing trace file '" + trace_path + "'");
  }

  json out = {{"seed", s.seed},
              {"tokens", tokens},
              {"iterations", summary.iterations},
              {"drafted", summary.drafted},
              {"accepted", summary.accepted},
              {"tok_ar", summary.tok_ar},
              {"target_forwards", summary.target_forwards},
              {"retained", prune.retained},
              {"kept_visual", std::vector<std::size_t>(kept, kept + nkept)},
              {"delta", ssd.max_drafts},
              {"theta", ssd.threshold}};
  std::cout << out.dump() << "\n";

  if (verify) {
    std::vector<int32_t> reference(s.max_s);
    std::size_t len = 0;
    check(twig_generate_pruned(s.model, s.prompt.data(), s.prompt.size(), &s.layout, &prune, kept, nkept, s.max_s,
                               s.ignore_eos, reference.data(), &len, nullptr));
    reference.resize(len);
    const bool pass = reference == tokens;
    std::cout << "equivalence: " << (pass ? "pass" : "fail") << "\n";
    return pass ? 0 : 1;
  }
  return 0;
}

int cmd_prune_solve(const RunConfig& rc) {
  const std::uint64_t seed = rc.u64("/seed", 0);
  if (!rc.has("/prune/target_rbar")) throw UsageError("prune.target_rbar", "--target-rbar is required");
  const std::uint64_t target = rc.u64("/prune/target_rbar", 0);
  const std::uint64_t m = rc.u64("/layout/m", 576);
  const std::uint64_t k = rc.u64("/prune/k", 2);
  const std::uint64_t l = rc.u64("/model/layers", 32);
  const std::uint64_t kf = rc.u64("/prune/kf", l);
  std::uint64_t r = 0;
  check(twig_solve_r(target, m, k, kf, l, &r), "prune.target_rbar");
  std::uint64_t check_value = 0;
  check(twig_avg_retained_finalwipe(m, k, r, kf, l, &check_value));
  twig_layout layout{m, rc.size("/layout/n", 1)};
  twig_prune_config prune{k, r, kf == l ? 0 : kf, k};
  std::vector<std::size_t> visual(l), text(l);
  check(twig_layer_occupancy(&layout, &prune, l, visual.data(), text.data()), "prune");
  json out = {{"seed", seed}, {"R", r}, {"rbar_check", check_value}, {"occupancy", visual}};
  std::cout << out.dump() << "\n";
  return 0;
}

struct TrainSink {
  std::ostream* out;
};

void on_train_step(std::size_t step, double lr, double loss, void* user) {
  auto* sink = static_cast<TrainSink*>(user);
  *sink->out << step << ',' << std::setprecision(12) << lr << ',' << loss << "\n";
}

int cmd_train(const RunConfig& rc, const std::string& out_path) {
  Setup s;
  const std::size_t response = rc.size("/train/response", 4);
  build_model(rc, s, response);
  auto prune = read_prune(rc, s, 0);
  attach_twig(rc, s, prune);
  twig_train_config tc = twig_train_config_default();
  tc.steps = rc.size("/train/steps", tc.steps);
  tc.peak_lr = rc.real("/train/lr", tc.peak_lr);
  tc.warmup_ratio = rc.real("/train/warmup_ratio", tc.warmup_ratio);
  tc.batch_size = rc.size("/train/batch", tc.batch_size);
  tc.beta1 = rc.real("/train/beta1", tc.beta1);
  tc.beta2 = rc.real("/train/beta2", tc.beta2);
  tc.epsilon = rc.real("/train/eps", tc.epsilon);
  tc.weight_decay = rc.real("/train/weight_decay", tc.weight_decay);
  tc.seed = s.seed;
  twig_copy_task task{rc.size("/train/examples", 64), s.layout.num_visual, s.layout.num_text, response,
                      mix(s.seed ^ 0x64617461ULL)};
  std::cout << "# seed=" << s.seed << "\n";
  std::cout << "step,lr,loss\n";
  TrainSink sink{&std::cout};
  double before = 0.0, after = 0.0;
  check(twig_train_copy_task(s.model, &tc, &task, on_train_step, &sink, &before, &after), "train");
  std::cerr << "dataset loss: " << before << " -> " << after << "\n";
  if (!out_path.empty()) check(twig_model_save(s.model, out_path.c_str()), "out");
  return 0;
}

std::size_t bench_threads() {
  const char* env = std::getenv("TWIG_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const unsigned long v = std::strtoul(env, &end, 10);
  if (*end != '\0' || v == 0) throw UsageError("TWIG_THREADS", "TWIG_THREADS must be a positive integer");
  return v;
}

int cmd_bench(const RunConfig& rc) {
  Setup s;
  const auto lengths = rc.sizes("/bench/lengths", {8, 16, 32, 64, 128});
  if (lengths.empty()) throw UsageError("bench.lengths", "need at least one length");
  build_model(rc, s, *std::max_element(lengths.begin(), lengths.end()));
  const auto modes = rc.strings("/bench/modes", {"greedy", "fastv", "ssd"});
  const std::size_t reps = rc.size("/bench/reps", 3);
  const std::size_t threads = bench_threads();

  std::vector<twig_bench_config> configs;
  for (std::size_t i = 0; i < modes.size(); ++i) {
    twig_bench_config c{};
    if (modes[i] == "greedy") {
      c.mode = TWIG_BENCH_GREEDY;
    } else if (modes[i] == "fastv") {
      c.mode = TWIG_BENCH_FASTV;
      c.prune = read_prune(rc, s, 0);
    } else if (modes[i] == "ssd") {
      c.mode = TWIG_BENCH_SSD;
      c.prune = read_prune(rc, s, 0);
      attach_twig(rc, s, c.prune);
      if (!rc.has("/prune/depth")) c.prune.selection_depth = c.prune.prune_layer + twig_depth(s.model);
      c.ssd = {rc.size("/ssd/delta", 5), rc.real("/ssd/theta", 0.6)};
    } else {
      throw UsageError("bench.modes[" + std::to_string(i) + "]", "mode must be greedy, fastv or ssd");
    }
    configs.push_back(c);
  }
  std::vector<twig_bench_row> rows(configs.size() * lengths.size());
  check(twig_bench(s.model, s.prompt.data(), s.prompt.size(), &s.layout, configs.data(), configs.size(),
                   lengths.data(), lengths.size(), reps, threads, rows.data()),
        "bench");
  std::cout << "# seed=" << s.seed << " threads=" << threads << "\n";
  std::cout << "config_id,S,prefill_s,decode_s,tokens,tok_ar,target_forwards,flops_prefill_pruned,flops_prefill_full\n";
  std::cout << std::setprecision(9);
  for (const auto& r : rows) {
    std::cout << modes[r.config_index] << ',' << r.response_length << ',' << r.prefill_seconds << ','
              << r.decode_seconds << ',' << r.tokens << ',';
    if (r.has_tok_ar) std::cout << r.tok_ar;
    std::cout << ',' << r.target_forwards << ',' << r.flops_prefill_pruned << ',' << r.flops_prefill_full << "\n";
  }
  return 0;
}

int cmd_export_attn(const RunConfig& rc) {
  Setup s;
  build_model(rc, s, 0);
  if (!rc.has("/attn/layer")) throw UsageError("attn.layer", "--layer is required");
  const std::size_t layer = rc.size("/attn/layer", 0);
  const std::size_t retained = rc.size("/prune/r", s.layout.num_visual / 2);
  std::vector<double> scores(s.layout.num_visual);
  std::vector<int> kept(s.layout.num_visual);
  check(twig_export_attention(s.model, s.prompt.data(), s.prompt.size(), &s.layout, layer, retained, scores.data(),
                              kept.data()),
        "attn.layer");
  std::cout << "# seed=" << s.seed << " layer=" << layer << " R=" << retained << "\n";
  std::cout << "index,score,kept\n";
  std::cout << std::setprecision(17);
  for (std::size_t i = 0; i < scores.size(); ++i) std::cout << i << ',' << scores[i] << ',' << kept[i] << "\n";
  return 0;
}

int cmd_flops(const RunConfig& rc) {
  Setup s;
  build_model(rc, s, 0);
  auto prune = read_prune(rc, s, 0);
  std::uint64_t full = 0, pruned = 0, measured_full = 0, measured_pruned = 0;
  check(twig_flops_prefill(&s.cfg, &s.layout, nullptr, &full), "layout");
  check(twig_flops_prefill(&s.cfg, &s.layout, &prune, &pruned), "prune");
  check(twig_flops_prefill_measured(s.model, s.prompt.data(), s.prompt.size(), &s.layout, nullptr, &measured_full));
  check(twig_flops_prefill_measured(s.model, s.prompt.data(), s.prompt.size(), &s.layout, &prune, &measured_pruned),
        "prune");
  json out = {{"seed", s.seed},
              {"flops_prefill_full", full},
              {"flops_prefill_pruned", pruned},
              {"measured_full", measured_full},
              {"measured_pruned", measured_pruned},
              {"retained", prune.retained},
              {"match", full == measured_full && pruned == measured_pruned}};
  std::cout << out.dump() << "\n";
  return 0;
}

void print_error(const std::string& kind, const std::string& message, const std::string& field) {
  json err = {{"kind", kind}, {"message", message}};
  err["field"] = field.empty() ? json(nullptr) : json(field);
  std::cout << json{{"error", err}}.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"twig: speculative decoding runtime with visual-token pruning"};
  app.require_subcommand(1);
  Overrides ov;
  std::string trace_path, out_path;
  bool verify = false;

  auto* gen = app.add_subcommand("gen", "greedy or FastV-style generation");
  add_common(gen, ov);
  bind<std::string>(gen, ov, "--mode", "/mode", "greedy | fastv");

  auto* ssd = app.add_subcommand("ssd", "self-speculative decoding with a twig");
  add_common(ssd, ov);
  ssd->add_option("--trace", trace_path, "write a JSONL iteration trace");
  ssd->add_flag("--verify-against-greedy", verify, "compare against greedy decoding of the pruned target");

  auto* solve = app.add_subcommand("prune-solve", "solve R for a target average retained count");
  add_common(solve, ov);

  auto* train = app.add_subcommand("train", "train the twig on the synthetic copy task");
  add_common(train, ov);
  bind<std::uint64_t>(train, ov, "--steps", "/train/steps", "optimizer steps");
  bind<double>(train, ov, "--lr", "/train/lr", "peak learning rate");
  bind<double>(train, ov, "--warmup-ratio", "/train/warmup_ratio", "warmup fraction of steps");
  bind<std::uint64_t>(train, ov, "--batch", "/train/batch", "batch size");
  bind<double>(train, ov, "--weight-decay", "/train/weight_decay", "AdamW weight decay");
  bind<std::uint64_t>(train, ov, "--examples", "/train/examples", "dataset size");
  bind<std::uint64_t>(train, ov, "--response", "/train/response", "supervised response length");
  train->add_option("--out", out_path, "save trained weights (TWG1)");

  auto* bench = app.add_subcommand("bench", "prefill/decode timing sweep");
  add_common(bench, ov);
  bench->add_option_function<std::vector<std::size_t>>(
           "--lengths", [&ov](const std::vector<std::size_t>& v) { ov.values["bench"]["lengths"] = v; },
           "response lengths S")
      ->delimiter(',');
  bench->add_option_function<std::vector<std::string>>(
           "--modes", [&ov](const std::vector<std::string>& v) { ov.values["bench"]["modes"] = v; },
           "greedy,fastv,ssd")
      ->delimiter(',');
  bind<std::uint64_t>(bench, ov, "--reps", "/bench/reps", "timed repetitions per point");

  auto* attn = app.add_subcommand("export-attn", "export aggregated text-to-visual attention");
  add_common(attn, ov);
  bind<std::uint64_t>(attn, ov, "--layer", "/attn/layer", "1-based layer");

  auto* flops = app.add_subcommand("flops", "closed-form and instrumented prefill FLOPs");
  add_common(flops, ov);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what(), "");
    return 2;
  }

  try {
    const RunConfig rc = load_run_config(ov);
    if (*gen) return cmd_gen(rc);
    if (*ssd) return cmd_ssd(rc, trace_path, verify);
    if (*solve) return cmd_prune_solve(rc);
    if (*train) return cmd_train(rc, out_path);
    if (*bench) return cmd_bench(rc);
    if (*attn) return cmd_export_attn(rc);
    if (*flops) return cmd_flops(rc);
  } catch (const UsageError& e) {
    print_error("config", e.what(), e.field);
    return 2;
  } catch (const ApiError& e) {
    print_error(twig_status_name(e.status), e.what(), "");
    return 1;
  } catch (const std::exception& e) {
    print_error("internal", e.what(), "");
    return 1;
  }
  return 2;
}
