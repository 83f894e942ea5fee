#include "twig/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>

#include "twig/error.hpp"
#include "twig/rng.hpp"

namespace twig {

void TrainConfig::validate() const {
  if (!(peak_lr >= 0.0) || !std::isfinite(peak_lr)) throw ConfigError("train config: learning rate must be >= 0");
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) throw ConfigError("train config: warmup_ratio must lie in [0, 1)");
  if (steps == 0) throw ConfigError("train config: steps must be >= 1");
  if (batch_size == 0) throw ConfigError("train config: batch_size must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train config: betas must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw ConfigError("train config: epsilon must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train config: weight_decay must be >= 0");
}

std::size_t TrainConfig::warmup_steps() const {
  return static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(steps)));
}

double TrainConfig::lr_at(std::size_t step) const {
  const std::size_t warmup = warmup_steps();
  if (step < warmup) return peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(steps - warmup);
  return peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

TwigGradients TwigGradients::zeros_like(const TwigModel& tm) {
  TwigGradients g;
  for (const auto& layer : tm.layers) {
    LayerWeights z;
    z.w_q = Matrix(layer.w_q.rows(), layer.w_q.cols());
    z.w_k = Matrix(layer.w_k.rows(), layer.w_k.cols());
    z.w_v = Matrix(layer.w_v.rows(), layer.w_v.cols());
    z.w_o = Matrix(layer.w_o.rows(), layer.w_o.cols());
    z.ffn_in = Matrix(layer.ffn_in.rows(), layer.ffn_in.cols());
    z.ffn_out = Matrix(layer.ffn_out.rows(), layer.ffn_out.cols());
    const std::size_t d = layer.w_q.rows();
    z.attn_norm = {std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
    z.ffn_norm = z.attn_norm;
    g.layers.push_back(std::move(z));
  }
  g.final_norm = {std::vector<double>(tm.final_norm.scale.size(), 0.0), std::vector<double>(tm.final_norm.bias.size(), 0.0)};
  g.head = Matrix(tm.head.rows(), tm.head.cols());
  return g;
}

namespace {

std::vector<std::span<double>> spans_of(std::vector<LayerWeights>& layers, LayerNormParams& final_norm, Matrix& head) {
  std::vector<std::span<double>> out;
  for (auto& l : layers) {
    for (Matrix* m : {&l.w_q, &l.w_k, &l.w_v, &l.w_o, &l.ffn_in, &l.ffn_out}) out.push_back(m->flat());
    for (LayerNormParams* p : {&l.attn_norm, &l.ffn_norm}) {
      out.push_back(p->scale);
      out.push_back(p->bias);
    }
  }
  out.push_back(final_norm.scale);
  out.push_back(final_norm.bias);
  out.push_back(head.flat());
  return out;
}

// Layer norm with the per-row statistics kept for the backward pass.
struct NormTape {
  Matrix normalized;  // x_hat
  std::vector<double> rstd;
};

Matrix norm_forward(const Matrix& x, const LayerNormParams& p, NormTape& tape) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  tape.normalized = Matrix(n, d);
  tape.rstd.assign(n, 0.0);
  Matrix out(n, d);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = x.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    tape.rstd[r] = rstd;
    for (std::size_t c = 0; c < d; ++c) {
      const double xhat = (row[c] - mean) * rstd;
      tape.normalized(r, c) = xhat;
      out(r, c) = xhat * p.scale[c] + p.bias[c];
    }
  }
  return out;
}

// Returns dL/dx; accumulates scale/bias gradients. Rows with an all-zero
// upstream gradient contribute nothing.
Matrix norm_backward(const Matrix& dy, const LayerNormParams& p, const NormTape& tape, LayerNormParams& grad) {
  const std::size_t n = dy.rows();
  const std::size_t d = dy.cols();
  Matrix dx(n, d);
  std::vector<double> dxhat(d);
  for (std::size_t r = 0; r < n; ++r) {
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      grad.scale[c] += dy(r, c) * tape.normalized(r, c);
      grad.bias[c] += dy(r, c);
      dxhat[c] = dy(r, c) * p.scale[c];
      mean_dxhat += dxhat[c];
      mean_dxhat_xhat += dxhat[c] * tape.normalized(r, c);
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) {
      dx(r, c) = tape.rstd[r] * (dxhat[c] - mean_dxhat - tape.normalized(r, c) * mean_dxhat_xhat);
    }
  }
  return dx;
}

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

struct LayerTape {
  Matrix input;
  NormTape attn_norm;
  Matrix attn_in;  // LN_attn(x)
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, rows x rows (causal)
  Matrix context;
  Matrix hidden;  // x + attention
  NormTape ffn_norm;
  Matrix ffn_in;  // LN_ffn(hidden)
  Matrix pre_act;
  Matrix act;
};

void add_into(Matrix& dst, const Matrix& src) {
  for (std::size_t i = 0; i < dst.flat().size(); ++i) dst.flat()[i] += src.flat()[i];
}

// Full-sequence block over contiguous positions; same math as layer_forward.
Matrix layer_forward_taped(const LayerWeights& w, std::size_t num_heads, const Matrix& x, LayerTape& tape) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  const std::size_t dh = d / num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  tape.input = x;
  tape.attn_in = norm_forward(x, w.attn_norm, tape.attn_norm);
  tape.q = matmul(tape.attn_in.view(), w.w_q.view());
  tape.k = matmul(tape.attn_in.view(), w.w_k.view());
  tape.v = matmul(tape.attn_in.view(), w.w_v.view());
  tape.context = Matrix(n, d);
  tape.probs.assign(num_heads, Matrix(n, n));
  for (std::size_t h = 0; h < num_heads; ++h) {
    Matrix& p = tape.probs[h];
    gemm(tape.q.view().columns(h * dh, dh), tape.k.view().columns(h * dh, dh).transposed(), p.view());
    for (std::size_t i = 0; i < n; ++i) {
      double top = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= i; ++j) top = std::max(top, p(i, j) * scale);
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        p(i, j) = j <= i ? std::exp(p(i, j) * scale - top) : 0.0;
        total += p(i, j);
      }
      for (std::size_t j = 0; j < n; ++j) p(i, j) /= total;
    }
    gemm(p.view(), tape.v.view().columns(h * dh, dh), tape.context.view().columns(h * dh, dh));
  }
  tape.hidden = x;
  add_into(tape.hidden, matmul(tape.context.view(), w.w_o.view()));
  tape.ffn_in = norm_forward(tape.hidden, w.ffn_norm, tape.ffn_norm);
  tape.pre_act = matmul(tape.ffn_in.view(), w.ffn_in.view());
  tape.act = tape.pre_act;
  for (double& a : tape.act.flat()) a = gelu(a);
  Matrix out = tape.hidden;
  add_into(out, matmul(tape.act.view(), w.ffn_out.view()));
  return out;
}

Matrix layer_backward(const LayerWeights& w, std::size_t num_heads, const LayerTape& tape, const Matrix& dout,
                      LayerWeights& grad) {
  const std::size_t n = dout.rows();
  const std::size_t d = dout.cols();
  const std::size_t dh = d / num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // FFN branch.
  Matrix dhidden = dout;
  gemm_accumulate(tape.act.view().transposed(), dout.view(), grad.ffn_out.view());
  Matrix dact = matmul(dout.view(), w.ffn_out.view().transposed());
  for (std::size_t i = 0; i < dact.flat().size(); ++i) dact.flat()[i] *= gelu_derivative(tape.pre_act.flat()[i]);
  gemm_accumulate(tape.ffn_in.view().transposed(), dact.view(), grad.ffn_in.view());
  Matrix dffn_in = matmul(dact.view(), w.ffn_in.view().transposed());
  add_into(dhidden, norm_backward(dffn_in, w.ffn_norm, tape.ffn_norm, grad.ffn_norm));

  // Attention branch.
  gemm_accumulate(tape.context.view().transposed(), dhidden.view(), grad.w_o.view());
  Matrix dcontext = matmul(dhidden.view(), w.w_o.view().transposed());
  Matrix dq(n, d), dk(n, d), dv(n, d);
  for (std::size_t h = 0; h < num_heads; ++h) {
    const Matrix& p = tape.probs[h];
    auto dctx_h = dcontext.view().columns(h * dh, dh);
    Matrix dp = matmul(dctx_h, tape.v.view().columns(h * dh, dh).transposed());
    gemm(p.view().transposed(), dctx_h, dv.view().columns(h * dh, dh));
    Matrix ds(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j <= i; ++j) dot += p(i, j) * dp(i, j);
      for (std::size_t j = 0; j <= i; ++j) ds(i, j) = scale * p(i, j) * (dp(i, j) - dot);
    }
    gemm(ds.view(), tape.k.view().columns(h * dh, dh), dq.view().columns(h * dh, dh));
    gemm(ds.view().transposed(), tape.q.view().columns(h * dh, dh), dk.view().columns(h * dh, dh));
  }
  gemm_accumulate(tape.attn_in.view().transposed(), dq.view(), grad.w_q.view());
  gemm_accumulate(tape.attn_in.view().transposed(), dk.view(), grad.w_k.view());
  gemm_accumulate(tape.attn_in.view().transposed(), dv.view(), grad.w_v.view());
  Matrix dattn_in = matmul(dq.view(), w.w_q.view().transposed());
  add_into(dattn_in, matmul(dk.view(), w.w_k.view().transposed()));
  add_into(dattn_in, matmul(dv.view(), w.w_v.view().transposed()));

  Matrix dx = dhidden;
  add_into(dx, norm_backward(dattn_in, w.attn_norm, tape.attn_norm, grad.attn_norm));
  return dx;
}

void check_example(const TwigModel& tm, const Example& ex) {
  ex.layout.validate();
  if (ex.tokens.size() != ex.layout.prompt_length() + ex.response_length) {
    throw InputError("example: token count must equal M + N + response_length");
  }
  if (ex.tokens.size() > tm.base->config.max_positions) throw InputError("example: sequence exceeds max_positions");
}

Latents trunk_latents(const TwigModel& tm, const Example& ex) {
  check_example(tm, ex);
  const Model& base = *tm.base;
  auto x = embed(base, ex.tokens, position_range(0, ex.tokens.size()));
  return forward_stack(tm.trunk_layers(), base.config.num_heads, std::move(x)).latents;
}

std::size_t supervised_count(std::span<const Example> batch) {
  std::size_t n = 0;
  for (const auto& ex : batch) n += ex.response_length;
  return n;
}

// Adds this example's gradient (of loss_sum / total) into `grads`.
double accumulate_example(const TwigModel& tm, const Example& ex, const Latents& trunk, double weight,
                          TwigGradients* grads) {
  const std::size_t heads = tm.base->config.num_heads;
  const std::size_t prompt = ex.layout.prompt_length();
  const std::size_t n = ex.tokens.size();

  std::vector<LayerTape> tapes(tm.layers.size());
  Matrix x = trunk.values;
  for (std::size_t t = 0; t < tm.layers.size(); ++t) x = layer_forward_taped(tm.layers[t], heads, x, tapes[t]);

  NormTape final_tape;
  Matrix normed = norm_forward(x, tm.final_norm, final_tape);
  Matrix logits = matmul(normed.view(), tm.head.view());

  const std::size_t V = logits.cols();
  Matrix dlogits(n, V);
  double loss_sum = 0.0;
  for (std::size_t p = prompt - 1; p + 1 < n; ++p) {
    auto row = logits.row(p);
    const double top = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double z : row) total += std::exp(z - top);
    const auto target = static_cast<std::size_t>(ex.tokens[p + 1]);
    loss_sum += std::log(total) + top - row[target];
    for (std::size_t c = 0; c < V; ++c) dlogits(p, c) = weight * std::exp(row[c] - top) / total;
    dlogits(p, target) -= weight;
  }
  if (!grads) return loss_sum;

  gemm_accumulate(normed.view().transposed(), dlogits.view(), grads->head.view());
  Matrix dnormed = matmul(dlogits.view(), tm.head.view().transposed());
  Matrix dx = norm_backward(dnormed, tm.final_norm, final_tape, grads->final_norm);
  for (std::size_t t = tm.layers.size(); t-- > 0;) dx = layer_backward(tm.layers[t], heads, tapes[t], dx, grads->layers[t]);
  return loss_sum;
}

LossAndGradients backward_with_trunk(const TwigModel& tm, std::span<const Example> batch,
                                     std::span<const Latents> trunks) {
  LossAndGradients out;
  out.gradients = TwigGradients::zeros_like(tm);
  out.supervised = supervised_count(batch);
  if (out.supervised == 0) return out;
  const double weight = 1.0 / static_cast<double>(out.supervised);
  double loss_sum = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    loss_sum += accumulate_example(tm, batch[i], trunks[i], weight, &out.gradients);
  }
  out.loss = loss_sum / static_cast<double>(out.supervised);
  return out;
}

}  // namespace

std::vector<std::span<double>> parameter_spans(TwigModel& tm) {
  return spans_of(tm.layers, tm.final_norm, tm.head);
}

std::vector<std::span<double>> parameter_spans(TwigGradients& grads) {
  return spans_of(grads.layers, grads.final_norm, grads.head);
}

double ar_loss(const TwigModel& tm, std::span<const Example> batch) {
  const std::size_t total = supervised_count(batch);
  if (total == 0) throw InputError("ar_loss: batch has no supervised positions");
  const Model& base = *tm.base;
  double loss_sum = 0.0;
  for (const auto& ex : batch) {
    auto x = forward_stack(tm.layers, base.config.num_heads, trunk_latents(tm, ex)).latents;
    Logits logits = project_logits(tm.final_norm, tm.head, x.values);
    for (std::size_t p = ex.layout.prompt_length() - 1; p + 1 < ex.tokens.size(); ++p) {
      auto row = logits.row(p);
      const double top = *std::max_element(row.begin(), row.end());
      double total_exp = 0.0;
      for (double z : row) total_exp += std::exp(z - top);
      loss_sum += std::log(total_exp) + top - row[static_cast<std::size_t>(ex.tokens[p + 1])];
    }
  }
  return loss_sum / static_cast<double>(total);
}

LossAndGradients backward(const TwigModel& tm, std::span<const Example> batch) {
  std::vector<Latents> trunks;
  trunks.reserve(batch.size());
  for (const auto& ex : batch) trunks.push_back(trunk_latents(tm, ex));
  return backward_with_trunk(tm, batch, trunks);
}

std::vector<StepRecord> train_twig(TwigModel& tm, std::span<const Example> dataset, const TrainConfig& cfg,
                                   const StepCallback& on_step) {
  cfg.validate();
  if (dataset.empty()) throw InputError("train_twig: empty dataset");

  // The trunk is frozen, so its layer-K output is computed once per example.
  std::vector<Latents> trunks;
  trunks.reserve(dataset.size());
  for (const auto& ex : dataset) trunks.push_back(trunk_latents(tm, ex));

  auto params = parameter_spans(tm);
  std::size_t total = 0;
  for (auto s : params) total += s.size();
  std::vector<double> first_moment(total, 0.0);
  std::vector<double> second_moment(total, 0.0);
  double beta1_power = 1.0;
  double beta2_power = 1.0;

  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  std::size_t epoch = 0;
  auto next_index = [&]() {
    if (cursor == order.size()) {
      order.resize(dataset.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      SplitMix64 rng(derive_seed(cfg.seed, epoch++));
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      cursor = 0;
    }
    return order[cursor++];
  };

  std::vector<StepRecord> curve;
  curve.reserve(cfg.steps);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<std::size_t> picks;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) picks.push_back(next_index());
    // Fixed reduction order within a batch.
    std::sort(picks.begin(), picks.end());
    std::vector<Example> batch;
    std::vector<Latents> batch_trunks;
    for (auto i : picks) {
      batch.push_back(dataset[i]);
      batch_trunks.push_back(trunks[i]);
    }
    auto result = backward_with_trunk(tm, batch, batch_trunks);
    if (result.supervised == 0) throw InputError("train_twig: batch has no supervised positions");
    if (!std::isfinite(result.loss)) {
      throw TrainingError("train_twig: non-finite loss at step " + std::to_string(step));
    }

    const double lr = cfg.lr_at(step);
    beta1_power *= cfg.beta1;
    beta2_power *= cfg.beta2;
    auto grads = parameter_spans(result.gradients);
    std::size_t flat = 0;
    for (std::size_t s = 0; s < params.size(); ++s) {
      for (std::size_t i = 0; i < params[s].size(); ++i, ++flat) {
        const double g = grads[s][i];
        first_moment[flat] = cfg.beta1 * first_moment[flat] + (1.0 - cfg.beta1) * g;
        second_moment[flat] = cfg.beta2 * second_moment[flat] + (1.0 - cfg.beta2) * g * g;
        const double m_hat = first_moment[flat] / (1.0 - beta1_power);
        const double v_hat = second_moment[flat] / (1.0 - beta2_power);
        double& p = params[s][i];
        p -= lr * (m_hat / (std::sqrt(v_hat) + cfg.epsilon) + cfg.weight_decay * p);
      }
    }

    StepRecord record{step, lr, result.loss};
    curve.push_back(record);
    if (on_step) on_step(record);
  }
  return curve;
}

std::vector<Example> make_copy_task(const ModelConfig& cfg, std::size_t count, const SequenceLayout& layout,
                                    std::size_t response_length, std::uint64_t seed) {
  layout.validate();
  if (response_length == 0 || response_length > layout.num_text) {
    throw InputError("make_copy_task: response length must lie in [1, N]");
  }
  SplitMix64 rng(derive_seed(seed, 0xc0b7ULL));
  const std::uint64_t content = cfg.vocab_size - 1;
  std::vector<Example> out;
  out.reserve(count);
  for (std::size_t e = 0; e < count; ++e) {
    Example ex;
    ex.layout = layout;
    ex.response_length = response_length;
    for (std::size_t i = 0; i < layout.prompt_length(); ++i) ex.tokens.push_back(static_cast<TokenId>(rng.below(content)));
    for (std::size_t i = 0; i < response_length; ++i) ex.tokens.push_back(ex.tokens[layout.num_visual + i]);
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace twig
