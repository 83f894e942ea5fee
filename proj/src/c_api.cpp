#include "twig_c.h"

#include <algorithm>
#include <memory>
#include <new>
#include <optional>
#include <string>
#include <vector>

#include "twig/engine.hpp"
#include "twig/error.hpp"
#include "twig/metrics.hpp"
#include "twig/model.hpp"
#include "twig/pruning.hpp"
#include "twig/training.hpp"
#include "twig/twig_model.hpp"
#include "twig/weights_io.hpp"

struct twig_model {
  std::shared_ptr<const twig::Model> base;
  std::optional<twig::TwigModel> twig;
};

struct twig_trace {
  twig::SsdResult result;
};

namespace {

thread_local std::string g_last_error;

twig_status status_of(twig::ErrorKind kind) {
  switch (kind) {
    case twig::ErrorKind::Config: return TWIG_ERR_CONFIG;
    case twig::ErrorKind::Input: return TWIG_ERR_INPUT;
    case twig::ErrorKind::Domain: return TWIG_ERR_DOMAIN;
    case twig::ErrorKind::Training: return TWIG_ERR_TRAINING;
    case twig::ErrorKind::Measurement: return TWIG_ERR_MEASUREMENT;
    case twig::ErrorKind::Io: return TWIG_ERR_IO;
    case twig::ErrorKind::Internal: return TWIG_ERR_INTERNAL;
  }
  return TWIG_ERR_INTERNAL;
}

template <typename F>
twig_status guarded(F&& body) {
  g_last_error.clear();
  try {
    body();
    return TWIG_OK;
  } catch (const twig::Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return TWIG_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return TWIG_ERR_INTERNAL;
  }
}

void require(const void* p, const char* name) {
  if (!p) throw twig::InputError(std::string("null argument: ") + name);
}

twig::SequenceLayout to_layout(const twig_layout* l) {
  require(l, "layout");
  return {l->num_visual, l->num_text};
}

twig::PruneConfig to_prune(const twig_prune_config* p) {
  require(p, "prune");
  twig::PruneConfig out;
  out.prune_layer = p->prune_layer;
  out.retained = p->retained;
  if (p->final_wipe_layer != 0) out.final_wipe_layer = p->final_wipe_layer;
  out.selection_depth = p->selection_depth;
  return out;
}

twig::SsdConfig to_ssd(const twig_ssd_config* s) {
  require(s, "ssd");
  return {s->max_drafts, s->threshold};
}

twig::ModelConfig to_config(const twig_model_config* c) {
  require(c, "config");
  return {c->num_layers, c->hidden_dim, c->num_heads, c->ffn_dim, c->vocab_size, c->max_positions};
}

std::span<const twig::TokenId> to_ids(const int32_t* ids, size_t n) {
  if (n > 0) require(ids, "ids");
  return {ids, n};
}

const twig::TwigModel& need_twig(const twig_model* m) {
  if (!m->twig) throw twig::ConfigError("no twig attached to the model");
  return *m->twig;
}

void write_generation(const twig::Generation& gen, int32_t* out_tokens, size_t* out_len, uint64_t* out_sum) {
  require(out_tokens, "out_tokens");
  require(out_len, "out_len");
  std::copy(gen.tokens.begin(), gen.tokens.end(), out_tokens);
  *out_len = gen.tokens.size();
  if (out_sum) *out_sum = gen.logit_checksum;
}

twig_status null_argument(const char* name) {
  g_last_error = std::string("null argument: ") + name;
  return TWIG_ERR_NULL_ARGUMENT;
}

}  // namespace

extern "C" {

const char* twig_last_error(void) { return g_last_error.c_str(); }

const char* twig_status_name(twig_status status) {
  switch (status) {
    case TWIG_OK: return "ok";
    case TWIG_ERR_CONFIG: return "config";
    case TWIG_ERR_INPUT: return "input";
    case TWIG_ERR_DOMAIN: return "domain";
    case TWIG_ERR_TRAINING: return "training";
    case TWIG_ERR_MEASUREMENT: return "measurement";
    case TWIG_ERR_IO: return "io";
    case TWIG_ERR_INTERNAL: return "internal";
    case TWIG_ERR_NULL_ARGUMENT: return "null_argument";
  }
  return "unknown";
}

twig_status twig_model_create(const twig_model_config* cfg, uint64_t seed, twig_model** out) {
  if (!out) return null_argument("out");
  return guarded([&] {
    auto model = std::make_unique<twig_model>();
    model->base = std::make_shared<const twig::Model>(twig::init_model(to_config(cfg), seed));
    *out = model.release();
  });
}

twig_status twig_model_load(const char* path, twig_model** out) {
  if (!out) return null_argument("out");
  if (!path) return null_argument("path");
  return guarded([&] {
    auto loaded = twig::load_weights(path);
    auto model = std::make_unique<twig_model>();
    model->base = loaded.base;
    model->twig = std::move(loaded.twig);
    *out = model.release();
  });
}

twig_status twig_model_save(const twig_model* model, const char* path) {
  if (!model) return null_argument("model");
  if (!path) return null_argument("path");
  return guarded([&] { twig::save_weights(path, *model->base, model->twig ? &*model->twig : nullptr); });
}

void twig_model_free(twig_model* model) { delete model; }

twig_status twig_model_get_config(const twig_model* model, twig_model_config* out) {
  if (!model) return null_argument("model");
  if (!out) return null_argument("out");
  const auto& c = model->base->config;
  *out = {c.num_layers, c.hidden_dim, c.num_heads, c.ffn_dim, c.vocab_size, c.max_positions};
  return TWIG_OK;
}

twig_status twig_model_checksum(const twig_model* model, uint64_t* base_sum, uint64_t* twig_sum, int* has_twig) {
  if (!model) return null_argument("model");
  return guarded([&] {
    if (base_sum) *base_sum = twig::checksum(*model->base);
    if (twig_sum) *twig_sum = model->twig ? twig::twig_checksum(*model->twig) : 0;
    if (has_twig) *has_twig = model->twig ? 1 : 0;
  });
}

twig_status twig_model_attach_twig(twig_model* model, uint32_t trunk_depth, uint32_t num_layers, const char* init,
                                   uint64_t seed) {
  if (!model) return null_argument("model");
  if (!init) return null_argument("init");
  return guarded([&] {
    twig::TwigConfig cfg{trunk_depth, num_layers, twig::parse_twig_init(init)};
    model->twig = twig::attach_twig(model->base, cfg, seed);
  });
}

twig_status twig_model_twig_shape(const twig_model* model, uint32_t* trunk_depth, uint32_t* num_layers) {
  if (!model) return null_argument("model");
  return guarded([&] {
    const auto& tm = need_twig(model);
    if (trunk_depth) *trunk_depth = tm.config.trunk_depth;
    if (num_layers) *num_layers = tm.config.num_layers;
  });
}

twig_status twig_generate_greedy(const twig_model* model, const int32_t* ids, size_t num_ids,
                                 const twig_layout* layout, size_t max_tokens, int ignore_eos, int32_t* out_tokens,
                                 size_t* out_len, uint64_t* out_logit_checksum) {
  if (!model) return null_argument("model");
  return guarded([&] {
    twig::GenerateOptions options;
    options.ignore_eos = ignore_eos != 0;
    auto gen = twig::greedy_generate(*model->base, to_ids(ids, num_ids), to_layout(layout), max_tokens, options);
    write_generation(gen, out_tokens, out_len, out_logit_checksum);
  });
}

twig_status twig_generate_fastv(const twig_model* model, const int32_t* ids, size_t num_ids,
                                const twig_layout* layout, const twig_prune_config* prune, size_t max_tokens,
                                int ignore_eos, int32_t* out_tokens, size_t* out_len, uint64_t* out_logit_checksum) {
  if (!model) return null_argument("model");
  return guarded([&] {
    twig::GenerateOptions options;
    options.ignore_eos = ignore_eos != 0;
    auto gen = twig::fastv_generate(*model->base, to_ids(ids, num_ids), to_layout(layout), to_prune(prune),
                                    max_tokens, options);
    write_generation(gen, out_tokens, out_len, out_logit_checksum);
  });
}

twig_status twig_generate_pruned(const twig_model* model, const int32_t* ids, size_t num_ids,
                                 const twig_layout* layout, const twig_prune_config* prune,
                                 const size_t* kept_visual, size_t num_kept, size_t max_tokens, int ignore_eos,
                                 int32_t* out_tokens, size_t* out_len, uint64_t* out_logit_checksum) {
  if (!model) return null_argument("model");
  return guarded([&] {
    if (num_kept > 0) require(kept_visual, "kept_visual");
    twig::GenerateOptions options;
    options.ignore_eos = ignore_eos != 0;
    auto gen = twig::pruned_greedy_generate(*model->base, to_ids(ids, num_ids), to_layout(layout), to_prune(prune),
                                            {kept_visual, num_kept}, max_tokens, options);
    write_generation(gen, out_tokens, out_len, out_logit_checksum);
  });
}

twig_status twig_ssd_generate(const twig_model* model, const int32_t* ids, size_t num_ids,
                              const twig_layout* layout, const twig_prune_config* prune, const twig_ssd_config* ssd,
                              size_t max_tokens, int ignore_eos, twig_trace** out) {
  if (!model) return null_argument("model");
  if (!out) return null_argument("out");
  return guarded([&] {
    twig::GenerateOptions options;
    options.ignore_eos = ignore_eos != 0;
    auto trace = std::make_unique<twig_trace>();
    trace->result = twig::ssd_generate(need_twig(model), to_ids(ids, num_ids), to_layout(layout), to_prune(prune),
                                       to_ssd(ssd), max_tokens, options);
    *out = trace.release();
  });
}

void twig_trace_free(twig_trace* trace) { delete trace; }

twig_status twig_trace_summary_get(const twig_trace* trace, twig_trace_summary* out) {
  if (!trace) return null_argument("trace");
  if (!out) return null_argument("out");
  const auto& r = trace->result;
  out->tokens = r.tokens.size();
  out->iterations = r.trace.iterations.size();
  out->target_forwards = r.trace.target_forwards;
  out->drafted = r.trace.total_drafted();
  out->accepted = r.trace.total_accepted();
  out->tok_ar = out->drafted == 0 ? 0.0 : twig::tok_ar(r.trace);
  return TWIG_OK;
}

twig_status twig_trace_iteration_get(const twig_trace* trace, size_t index, twig_iteration* out) {
  if (!trace) return null_argument("trace");
  if (!out) return null_argument("out");
  return guarded([&] {
    const auto& its = trace->result.trace.iterations;
    if (index >= its.size()) throw twig::InputError("iteration index out of range");
    const auto& it = its[index];
    out->drafted = it.drafted.data();
    out->num_drafted = it.drafted.size();
    out->accepted = it.accepted;
    out->has_correction = it.correction ? 1 : 0;
    out->correction = it.correction.value_or(-1);
    out->early_exit = it.early_exit ? 1 : 0;
  });
}

twig_status twig_trace_tokens(const twig_trace* trace, const int32_t** tokens, size_t* count) {
  if (!trace) return null_argument("trace");
  if (!tokens || !count) return null_argument("tokens");
  *tokens = trace->result.tokens.data();
  *count = trace->result.tokens.size();
  return TWIG_OK;
}

twig_status twig_trace_kept_visual(const twig_trace* trace, const size_t** kept, size_t* count) {
  if (!trace) return null_argument("trace");
  if (!kept || !count) return null_argument("kept");
  *kept = trace->result.kept_visual.data();
  *count = trace->result.kept_visual.size();
  return TWIG_OK;
}

twig_status twig_avg_retained(uint64_t m, uint64_t k, uint64_t r, uint64_t l, uint64_t* out) {
  if (!out) return null_argument("out");
  return guarded([&] { *out = twig::avg_retained(m, k, r, l); });
}

twig_status twig_avg_retained_finalwipe(uint64_t m, uint64_t k, uint64_t r, uint64_t kf, uint64_t l,
                                        uint64_t* out) {
  if (!out) return null_argument("out");
  return guarded([&] { *out = twig::avg_retained_finalwipe(m, k, r, kf, l); });
}

twig_status twig_solve_r(uint64_t target_rbar, uint64_t m, uint64_t k, uint64_t kf, uint64_t l, uint64_t* out) {
  if (!out) return null_argument("out");
  return guarded([&] { *out = twig::solve_r(target_rbar, m, k, kf, l); });
}

twig_status twig_layer_occupancy(const twig_layout* layout, const twig_prune_config* prune, size_t num_layers,
                                 size_t* visual, size_t* text) {
  if (!visual || !text) return null_argument("visual/text");
  return guarded([&] {
    auto occ = twig::layer_occupancy(to_layout(layout), to_prune(prune), num_layers);
    for (size_t i = 0; i < occ.size(); ++i) {
      visual[i] = occ[i].visual;
      text[i] = occ[i].text;
    }
  });
}

twig_status twig_flops_prefill(const twig_model_config* cfg, const twig_layout* layout,
                               const twig_prune_config* prune, uint64_t* out) {
  if (!out) return null_argument("out");
  return guarded([&] {
    std::optional<twig::PruneConfig> plan;
    auto lay = to_layout(layout);
    const auto mc = to_config(cfg);
    if (prune) {
      plan = to_prune(prune);
      plan->validate(lay, mc.num_layers);
    }
    lay.validate();
    *out = twig::flops_prefill(mc, lay, plan);
  });
}

twig_status twig_flops_prefill_measured(const twig_model* model, const int32_t* ids, size_t num_ids,
                                        const twig_layout* layout, const twig_prune_config* prune, uint64_t* out) {
  if (!model) return null_argument("model");
  if (!out) return null_argument("out");
  return guarded([&] {
    twig::FlopCounter counter;
    if (prune) {
      twig::pruned_prefill(*model->base, to_ids(ids, num_ids), to_layout(layout), to_prune(prune), std::nullopt,
                           &counter);
    } else {
      twig::prefill(*model->base, to_ids(ids, num_ids), to_layout(layout), {}, &counter);
    }
    *out = counter.flops;
  });
}

twig_status twig_export_attention(const twig_model* model, const int32_t* ids, size_t num_ids,
                                  const twig_layout* layout, size_t layer, size_t retained, double* scores,
                                  int* kept) {
  if (!model) return null_argument("model");
  if (!scores || !kept) return null_argument("scores/kept");
  return guarded([&] {
    const auto lay = to_layout(layout);
    const size_t L = model->base->config.num_layers;
    if (layer < 1 || layer > L) {
      throw twig::InputError("layer " + std::to_string(layer) + " out of range [1, " + std::to_string(L) + "]");
    }
    if (retained > lay.num_visual) throw twig::InputError("retained exceeds the number of visual tokens");
    const size_t capture[] = {layer};
    auto pre = twig::prefill(*model->base, to_ids(ids, num_ids), lay, capture);
    auto agg = twig::aggregate_attention(pre.attention.at(layer), lay);
    std::fill(kept, kept + lay.num_visual, 0);
    for (auto i : twig::top_r_select(agg, retained)) kept[i] = 1;
    std::copy(agg.begin(), agg.end(), scores);
  });
}

twig_train_config twig_train_config_default(void) {
  const twig::TrainConfig d;
  return {d.peak_lr, d.warmup_ratio, d.steps, d.batch_size, d.beta1, d.beta2, d.epsilon, d.weight_decay, d.seed};
}

twig_status twig_train_copy_task(twig_model* model, const twig_train_config* cfg, const twig_copy_task* task,
                                 twig_step_callback on_step, void* user, double* initial_loss, double* final_loss) {
  if (!model) return null_argument("model");
  if (!cfg) return null_argument("cfg");
  if (!task) return null_argument("task");
  return guarded([&] {
    if (!model->twig) throw twig::ConfigError("no twig attached to the model");
    twig::TrainConfig tc;
    tc.peak_lr = cfg->peak_lr;
    tc.warmup_ratio = cfg->warmup_ratio;
    tc.steps = cfg->steps;
    tc.batch_size = cfg->batch_size;
    tc.beta1 = cfg->beta1;
    tc.beta2 = cfg->beta2;
    tc.epsilon = cfg->epsilon;
    tc.weight_decay = cfg->weight_decay;
    tc.seed = cfg->seed;
    tc.validate();
    const twig::SequenceLayout lay{task->num_visual, task->num_text};
    auto data = twig::make_copy_task(model->base->config, task->count, lay, task->response_length, task->seed);
    auto& tm = *model->twig;
    if (initial_loss) *initial_loss = twig::ar_loss(tm, data);
    twig::StepCallback cb;
    if (on_step) cb = [&](const twig::StepRecord& r) { on_step(r.step, r.lr, r.loss, user); };
    twig::train_twig(tm, data, tc, cb);
    if (final_loss) *final_loss = twig::ar_loss(tm, data);
  });
}

twig_status twig_bench(const twig_model* model, const int32_t* ids, size_t num_ids, const twig_layout* layout,
                       const twig_bench_config* configs, size_t num_configs, const size_t* lengths,
                       size_t num_lengths, size_t repetitions, size_t threads, twig_bench_row* rows) {
  if (!model) return null_argument("model");
  if (!configs || !lengths || !rows) return null_argument("configs/lengths/rows");
  return guarded([&] {
    std::vector<twig::BenchConfig> cfgs;
    bool needs_twig = false;
    for (size_t i = 0; i < num_configs; ++i) {
      twig::BenchConfig c;
      c.id = std::to_string(i);
      switch (configs[i].mode) {
        case TWIG_BENCH_GREEDY: c.mode = twig::BenchMode::Greedy; break;
        case TWIG_BENCH_FASTV: c.mode = twig::BenchMode::FastV; break;
        case TWIG_BENCH_SSD: c.mode = twig::BenchMode::TwigSsd; break;
        default: throw twig::ConfigError("bench: unknown mode");
      }
      if (c.mode != twig::BenchMode::Greedy) c.prune = to_prune(&configs[i].prune);
      if (c.mode == twig::BenchMode::TwigSsd) {
        c.ssd = to_ssd(&configs[i].ssd);
        needs_twig = true;
      }
      cfgs.push_back(std::move(c));
    }
    twig::TwigModel base_only;
    const twig::TwigModel* tm = nullptr;
    if (model->twig) {
      tm = &*model->twig;
    } else {
      if (needs_twig) throw twig::ConfigError("no twig attached to the model");
      base_only.base = model->base;
      tm = &base_only;
    }
    auto out = twig::bench_sweep(*tm, to_ids(ids, num_ids), to_layout(layout), cfgs, {lengths, num_lengths},
                                 repetitions, threads);
    for (size_t i = 0; i < out.size(); ++i) {
      const auto& r = out[i];
      rows[i] = {std::stoul(r.config_id),
                 r.response_length,
                 r.prefill_seconds,
                 r.decode_seconds,
                 r.tokens,
                 r.tok_ar ? 1 : 0,
                 r.tok_ar.value_or(0.0),
                 r.target_forwards,
                 r.flops_prefill_pruned,
                 r.flops_prefill_full};
    }
  });
}

}  // extern "C"
