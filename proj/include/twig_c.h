#ifndef TWIG_C_H
#define TWIG_C_H

/* C interface to the twig runtime. Every function returns a twig_status;
 * on failure twig_last_error() describes the problem (thread-local, valid
 * until the next call on the same thread). Handles are opaque and owned by
 * the caller; release them with the matching *_free function. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define TWIG_API __declspec(dllexport)
#else
#define TWIG_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum twig_status {
  TWIG_OK = 0,
  TWIG_ERR_CONFIG = 1,
  TWIG_ERR_INPUT = 2,
  TWIG_ERR_DOMAIN = 3,
  TWIG_ERR_TRAINING = 4,
  TWIG_ERR_MEASUREMENT = 5,
  TWIG_ERR_IO = 6,
  TWIG_ERR_INTERNAL = 7,
  TWIG_ERR_NULL_ARGUMENT = 8
} twig_status;

typedef struct twig_model twig_model; /* base model plus an optional twig */
typedef struct twig_trace twig_trace; /* result of one SSD generation */

typedef struct twig_model_config {
  uint32_t num_layers;
  uint32_t hidden_dim;
  uint32_t num_heads;
  uint32_t ffn_dim;
  uint32_t vocab_size;
  uint32_t max_positions;
} twig_model_config;

typedef struct twig_layout {
  size_t num_visual;
  size_t num_text;
} twig_layout;

/* Layer numbers are 1-based depths. final_wipe_layer == 0 disables FinalWipe. */
typedef struct twig_prune_config {
  size_t prune_layer;
  size_t retained;
  size_t final_wipe_layer;
  size_t selection_depth;
} twig_prune_config;

typedef struct twig_ssd_config {
  size_t max_drafts;
  double threshold;
} twig_ssd_config;

TWIG_API const char* twig_last_error(void);
TWIG_API const char* twig_status_name(twig_status status);

/* Models */
TWIG_API twig_status twig_model_create(const twig_model_config* cfg, uint64_t seed, twig_model** out);
TWIG_API twig_status twig_model_load(const char* path, twig_model** out);
TWIG_API twig_status twig_model_save(const twig_model* model, const char* path);
TWIG_API void twig_model_free(twig_model* model);
TWIG_API twig_status twig_model_get_config(const twig_model* model, twig_model_config* out);
/* twig_sum is 0 and *has_twig 0 when no twig is attached. */
TWIG_API twig_status twig_model_checksum(const twig_model* model, uint64_t* base_sum, uint64_t* twig_sum,
                                         int* has_twig);
/* init: "random", "last-layers" or "layers-k-to-kt". Replaces any attached twig. */
TWIG_API twig_status twig_model_attach_twig(twig_model* model, uint32_t trunk_depth, uint32_t num_layers,
                                            const char* init, uint64_t seed);
TWIG_API twig_status twig_model_twig_shape(const twig_model* model, uint32_t* trunk_depth, uint32_t* num_layers);

/* Generation. out_tokens must hold max_tokens entries. */
TWIG_API twig_status twig_generate_greedy(const twig_model* model, const int32_t* ids, size_t num_ids,
                                          const twig_layout* layout, size_t max_tokens, int ignore_eos,
                                          int32_t* out_tokens, size_t* out_len, uint64_t* out_logit_checksum);
TWIG_API twig_status twig_generate_fastv(const twig_model* model, const int32_t* ids, size_t num_ids,
                                         const twig_layout* layout, const twig_prune_config* prune,
                                         size_t max_tokens, int ignore_eos, int32_t* out_tokens, size_t* out_len,
                                         uint64_t* out_logit_checksum);
/* Greedy decoding of the pruned target with a fixed kept visual set. */
TWIG_API twig_status twig_generate_pruned(const twig_model* model, const int32_t* ids, size_t num_ids,
                                          const twig_layout* layout, const twig_prune_config* prune,
                                          const size_t* kept_visual, size_t num_kept, size_t max_tokens,
                                          int ignore_eos, int32_t* out_tokens, size_t* out_len,
                                          uint64_t* out_logit_checksum);

/* Self-speculative decoding; needs an attached twig. */
TWIG_API twig_status twig_ssd_generate(const twig_model* model, const int32_t* ids, size_t num_ids,
                                       const twig_layout* layout, const twig_prune_config* prune,
                                       const twig_ssd_config* ssd, size_t max_tokens, int ignore_eos,
                                       twig_trace** out);
TWIG_API void twig_trace_free(twig_trace* trace);

typedef struct twig_trace_summary {
  size_t tokens;
  size_t iterations;
  size_t target_forwards;
  size_t drafted;
  size_t accepted;
  double tok_ar; /* 0 when nothing was drafted */
} twig_trace_summary;

typedef struct twig_iteration {
  const int32_t* drafted; /* owned by the trace */
  size_t num_drafted;
  size_t accepted;
  int has_correction;
  int32_t correction;
  int early_exit;
} twig_iteration;

TWIG_API twig_status twig_trace_summary_get(const twig_trace* trace, twig_trace_summary* out);
TWIG_API twig_status twig_trace_iteration_get(const twig_trace* trace, size_t index, twig_iteration* out);
TWIG_API twig_status twig_trace_tokens(const twig_trace* trace, const int32_t** tokens, size_t* count);
TWIG_API twig_status twig_trace_kept_visual(const twig_trace* trace, const size_t** kept, size_t* count);

/* Pruning arithmetic */
TWIG_API twig_status twig_avg_retained(uint64_t m, uint64_t k, uint64_t r, uint64_t l, uint64_t* out);
TWIG_API twig_status twig_avg_retained_finalwipe(uint64_t m, uint64_t k, uint64_t r, uint64_t kf, uint64_t l,
                                                 uint64_t* out);
TWIG_API twig_status twig_solve_r(uint64_t target_rbar, uint64_t m, uint64_t k, uint64_t kf, uint64_t l,
                                  uint64_t* out);
/* visual and text must hold num_layers entries. */
TWIG_API twig_status twig_layer_occupancy(const twig_layout* layout, const twig_prune_config* prune,
                                          size_t num_layers, size_t* visual, size_t* text);

/* FLOPs. prune may be NULL for the unpruned prefill. */
TWIG_API twig_status twig_flops_prefill(const twig_model_config* cfg, const twig_layout* layout,
                                        const twig_prune_config* prune, uint64_t* out);
/* Counts the FLOPs actually issued by a prefill of the given prompt. */
TWIG_API twig_status twig_flops_prefill_measured(const twig_model* model, const int32_t* ids, size_t num_ids,
                                                 const twig_layout* layout, const twig_prune_config* prune,
                                                 uint64_t* out);

/* Aggregated text-to-visual attention at a 1-based layer of the base model.
 * scores and kept hold num_visual entries; kept marks the Top-R selection. */
TWIG_API twig_status twig_export_attention(const twig_model* model, const int32_t* ids, size_t num_ids,
                                           const twig_layout* layout, size_t layer, size_t retained,
                                           double* scores, int* kept);

/* Twig training on the synthetic copy task. */
typedef struct twig_train_config {
  double peak_lr;
  double warmup_ratio;
  size_t steps;
  size_t batch_size;
  double beta1;
  double beta2;
  double epsilon;
  double weight_decay;
  uint64_t seed;
} twig_train_config;

typedef struct twig_copy_task {
  size_t count;
  size_t num_visual;
  size_t num_text;
  size_t response_length;
  uint64_t seed;
} twig_copy_task;

TWIG_API twig_train_config twig_train_config_default(void);

typedef void (*twig_step_callback)(size_t step, double lr, double loss, void* user);

/* Loss values are over the whole dataset, before and after training. */
TWIG_API twig_status twig_train_copy_task(twig_model* model, const twig_train_config* cfg,
                                          const twig_copy_task* task, twig_step_callback on_step, void* user,
                                          double* initial_loss, double* final_loss);

/* Benchmarks */
typedef enum twig_bench_mode { TWIG_BENCH_GREEDY = 0, TWIG_BENCH_FASTV = 1, TWIG_BENCH_SSD = 2 } twig_bench_mode;

typedef struct twig_bench_config {
  twig_bench_mode mode;
  twig_prune_config prune; /* ignored for TWIG_BENCH_GREEDY */
  twig_ssd_config ssd;     /* used by TWIG_BENCH_SSD only */
} twig_bench_config;

typedef struct twig_bench_row {
  size_t config_index;
  size_t response_length;
  double prefill_seconds;
  double decode_seconds;
  size_t tokens;
  int has_tok_ar;
  double tok_ar;
  size_t target_forwards;
  uint64_t flops_prefill_pruned;
  uint64_t flops_prefill_full;
} twig_bench_row;

/* rows must hold num_configs * num_lengths entries, ordered configs x lengths. */
TWIG_API twig_status twig_bench(const twig_model* model, const int32_t* ids, size_t num_ids,
                                const twig_layout* layout, const twig_bench_config* configs, size_t num_configs,
                                const size_t* lengths, size_t num_lengths, size_t repetitions, size_t threads,
                                twig_bench_row* rows);

#ifdef __cplusplus
}
#endif

#endif /* TWIG_C_H */
