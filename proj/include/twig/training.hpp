#pragma once

// Twig finetuning with a frozen trunk: autoregressive cross-entropy on the
// shallow path, exact reverse-mode gradients for twig parameters, and AdamW
// with linear warmup + cosine decay.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "twig/model.hpp"
#include "twig/twig_model.hpp"

namespace twig {

struct TrainConfig {
  double peak_lr = 5e-5;
  double warmup_ratio = 0.03;
  std::size_t steps = 100;
  std::size_t batch_size = 8;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t warmup_steps() const;
  double lr_at(std::size_t step) const;
};

// Prompt (M visual + N text ids) followed by `response_length` supervised
// response ids. Position p predicts tokens[p + 1] for p in [M+N-1, end-1).
struct Example {
  std::vector<TokenId> tokens;
  SequenceLayout layout;
  std::size_t response_length = 0;
};

// Same shapes as the twig's trainable parameters.
struct TwigGradients {
  std::vector<LayerWeights> layers;
  LayerNormParams final_norm;
  Matrix head;

  static TwigGradients zeros_like(const TwigModel& tm);
};

// Flat views over every trainable twig parameter, in a fixed order shared by
// the two overloads.
std::vector<std::span<double>> parameter_spans(TwigModel& tm);
std::vector<std::span<double>> parameter_spans(TwigGradients& grads);

// Mean cross-entropy of shallow-path logits over all supervised positions.
double ar_loss(const TwigModel& tm, std::span<const Example> batch);

struct LossAndGradients {
  double loss = 0.0;
  std::size_t supervised = 0;
  TwigGradients gradients;
};

// Gradients of ar_loss with respect to the twig parameters only.
LossAndGradients backward(const TwigModel& tm, std::span<const Example> batch);

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

using StepCallback = std::function<void(const StepRecord&)>;

// Returns the pre-update batch loss of every step. Throws TrainingError on a
// non-finite loss.
std::vector<StepRecord> train_twig(TwigModel& tm, std::span<const Example> dataset, const TrainConfig& cfg,
                                   const StepCallback& on_step = {});

// Synthetic copy task: random visual and text ids; the response repeats the
// first `response_length` text tokens in order. Ids are drawn from
// [0, V-1), so EOS never appears.
std::vector<Example> make_copy_task(const ModelConfig& cfg, std::size_t count, const SequenceLayout& layout,
                                    std::size_t response_length, std::uint64_t seed);

}  // namespace twig
