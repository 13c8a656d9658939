#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <map>
#include <tuple>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtp/batching.hpp"
#include "mtp/decoding.hpp"
#include "mtp/losses.hpp"
#include "mtp/model/model.hpp"
#include "mtp/sampler.hpp"
#include "mtp/training/adamw.hpp"
#include "mtp/training/checkpoint.hpp"
#include "mtp/training/corpus.hpp"

namespace mtp {

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  CorpusSpec corpus;
  ModelConfig model;  // vocab_size is derived from the corpus
  std::uint64_t seed = 1;

  // Ordinary next-token pretraining of the base model (skipped when a base
  // model is supplied).
  std::size_t base_steps = 1500;
  std::size_t base_warmup = 100;
  double base_lr = 3e-3;
  std::size_t base_batch = 8;

  // Multi-token fine-tuning of adapters, mask embeddings and sampler.
  std::size_t steps = 2000;
  std::size_t warmup = 200;
  double lr = 2e-4;
  std::size_t batch_size = 8;
  LossWeights weights;
  bool use_sampler = true;
  // Gold previous tokens condition the sampler during training; the
  // self-sampled alternative is not implemented.
  bool sampler_teacher_forcing = true;
  AdamWConfig adamw;

  std::size_t eval_every = 0;  // 0: no periodic acceptance eval
  std::size_t eval_prompts = 16;
  std::size_t eval_max_new = 32;
  std::size_t probe_sequences = 4;

  // Divergence guard: abort when the loss exceeds `divergence_factor` x its
  // first value for `divergence_patience` consecutive steps.
  double divergence_factor = 10.0;
  std::size_t divergence_patience = 50;

  void validate() const {
    if (lr <= 0 || base_lr <= 0) throw ConfigError("learning rates must be positive");
    if (warmup > steps) throw ConfigError("warmup exceeds total fine-tuning steps");
    if (base_warmup > base_steps && base_steps > 0) {
      throw ConfigError("base warmup exceeds base steps");
    }
    if (batch_size == 0 || base_batch == 0) throw ConfigError("batch size must be positive");
    if (weights.base < 0 || weights.sampler < 0 || weights.lcm < 0) {
      throw ConfigError("loss weights must be non-negative");
    }
    if (!sampler_teacher_forcing) {
      throw ConfigError("self-sampled sampler conditioning is not supported");
    }
  }
};

inline ModelConfig resolve_model_config(const TrainConfig& cfg) {
  ModelConfig m = cfg.model;
  m.vocab_size = derive_vocabulary(cfg.corpus).size() + m.k_masks;
  m.validate();
  return m;
}

struct MetricsRow {
  std::size_t step = 0;
  LossReport loss;
  double lr = 0.0;
  double wall_ms = 0.0;
};

inline std::string metrics_header() {
  return "step,base_ce,sampler_ce,lcm,total,ntp_only_ce,lr,wall_ms";
}

inline std::string to_csv(const MetricsRow& r) {
  std::ostringstream os;
  os << std::setprecision(9) << r.step << ',' << r.loss.base_ce << ',' << r.loss.sampler_ce << ','
     << r.loss.lcm << ',' << r.loss.total << ',' << r.loss.ntp_only_ce << ',' << r.lr << ','
     << std::setprecision(6) << r.wall_ms;
  return os.str();
}

struct EvalPoint {
  std::size_t step = 0;
  double rate = 0.0;
};

struct TrainResult {
  ModelBundle<float> model;
  std::optional<SamplerHead<float>> sampler;
  std::vector<MetricsRow> base_metrics;
  std::vector<MetricsRow> metrics;
  std::vector<EvalPoint> evals;
  double probe_ntp_ce_start = 0.0;
  double probe_ntp_ce_end = 0.0;
  std::vector<float> probe_ntp_logits_start;
  std::vector<float> probe_ntp_logits_end;
};

using MetricsSink = std::function<void(const MetricsRow&)>;

namespace detail {

inline double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

class DivergenceGuard {
 public:
  DivergenceGuard(double factor, std::size_t patience) : factor_(factor), patience_(patience) {}
  void observe(std::size_t step, double loss) {
    if (!std::isfinite(loss)) {
      throw DivergenceError("non-finite loss at step " + std::to_string(step));
    }
    if (!initial_) initial_ = loss;
    run_ = loss > factor_ * *initial_ ? run_ + 1 : 0;
    if (run_ >= patience_) {
      throw DivergenceError("loss above " + std::to_string(factor_) + "x initial for " +
                            std::to_string(patience_) + " steps (step " + std::to_string(step) + ")");
    }
  }

 private:
  double factor_;
  std::size_t patience_;
  std::optional<double> initial_;
  std::size_t run_ = 0;
};

// NTP logits (gate-0 labelled rows) and NTP-only CE over a fixed set of masked
// sequences.
inline std::pair<double, std::vector<float>> probe_ntp(const ModelBundle<float>& model,
                                                       const std::vector<MaskedBatch>& probe) {
  Tape<float> off(false);
  double ce = 0.0;
  std::vector<float> logits;
  for (const auto& b : probe) {
    auto fwd = forward(off, model, b.tokens, b.position_ids, b.attention, b.gate);
    ce += ntp_only_ce(b, fwd.logits);
    for (std::size_t t = 0; t < b.size(); ++t) {
      if (b.gate[t] != 0) continue;
      logits.insert(logits.end(), fwd.logits.row(t), fwd.logits.row(t) + fwd.logits.cols());
    }
  }
  return {probe.empty() ? 0.0 : ce / double(probe.size()), std::move(logits)};
}

}  // namespace detail

// Trains every base weight with ordinary next-token cross-entropy.
inline ModelBundle<float> pretrain_base(const TrainConfig& cfg, const MetricsSink& sink = {},
                                        std::vector<MetricsRow>* log = nullptr) {
  cfg.validate();
  const ModelConfig mc = resolve_model_config(cfg);
  auto model = init_model<float>(mc, derive_seed(cfg.seed, "model"));
  const auto corpus = generate_corpus(cfg.corpus);
  model.set_phase(TrainPhase::kBasePretrain);
  AdamW<float> opt(model.base_parameters(), cfg.adamw);
  Rng rng(cfg.seed, "pretrain.batches");
  detail::DivergenceGuard guard(cfg.divergence_factor, cfg.divergence_patience);
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t step = 0; step < cfg.base_steps; ++step) {
    opt.zero_grad();
    MetricsRow row;
    row.step = step;
    for (std::size_t b = 0; b < cfg.base_batch; ++b) {
      const auto& ex = corpus[static_cast<std::size_t>(rng.integer(0, std::int64_t(corpus.size()) - 1))];
      std::vector<TokenId> labels(ex.tokens.size(), kIgnore);
      for (std::size_t i = 0; i + 1 < ex.tokens.size(); ++i) {
        if (ex.loss_flags[i]) labels[i] = ex.tokens[i + 1];
      }
      Tape<float> tape;
      auto fwd = forward_causal(tape, model, ex.tokens);
      auto ce = ops::cross_entropy(tape, fwd.logits, labels, kIgnore);
      tape.backward(ops::scale(tape, ce, 1.0f / float(cfg.base_batch)));
      row.loss.base_ce += ce.item() / double(cfg.base_batch);
    }
    row.loss.total = row.loss.ntp_only_ce = row.loss.base_ce;
    guard.observe(step, row.loss.total);
    row.lr = warmup_flat_lr(step, cfg.base_lr, cfg.base_warmup);
    opt.step(row.lr);
    row.wall_ms = detail::elapsed_ms(t0);
    if (sink) sink(row);
    if (log) log->push_back(row);
  }
  model.set_phase(TrainPhase::kFrozen);
  return model;
}

// Multi-token fine-tuning on top of a frozen base.
inline TrainResult finetune(const TrainConfig& cfg, const ModelBundle<float>& base,
                            const MetricsSink& sink = {}) {
  cfg.validate();
  const ModelConfig mc = resolve_model_config(cfg);
  if (base.config.vocab_size != mc.vocab_size || base.config.d_model != mc.d_model ||
      base.config.n_layers != mc.n_layers || base.config.k_masks != mc.k_masks) {
    throw ConfigError("base model does not match the training configuration");
  }
  TrainResult res;
  // Fresh adapters of the configured rank on top of the base weights.
  res.model = init_model<float>(mc, derive_seed(cfg.seed, "model"));
  {
    auto dst = res.model.named_parameters();
    auto src = base.named_parameters();
    std::map<std::string, Tensor<float>> by_name(src.begin(), src.end());
    for (auto& [name, t] : dst) {
      if (ModelBundle<float>::is_lora_name(name)) continue;
      auto it = by_name.find(name);
      if (it == by_name.end() || it->second.shape() != t.shape()) {
        throw ConfigError("base model lacks parameter " + name);
      }
      std::copy(it->second.data().begin(), it->second.data().end(), t.mutable_data().begin());
    }
  }
  auto& model = res.model;
  if (cfg.use_sampler) res.sampler = init_sampler<float>(mc.d_model, derive_seed(cfg.seed, "sampler"));
  SamplerHead<float>* head = res.sampler ? &*res.sampler : nullptr;

  const auto corpus = generate_corpus(cfg.corpus);
  std::vector<MaskedBatch> batches;
  batches.reserve(corpus.size());
  for (const auto& ex : corpus) batches.push_back(build_training_batch(ex.tokens, ex.loss_flags, mc));

  CorpusSpec probe_spec = cfg.corpus;
  probe_spec.size = cfg.probe_sequences;
  probe_spec.seed = derive_seed(cfg.seed, "probe");
  std::vector<MaskedBatch> probe;
  for (const auto& ex : generate_corpus(probe_spec)) probe.push_back(build_training_batch(ex.tokens, ex.loss_flags, mc));
  std::tie(res.probe_ntp_ce_start, res.probe_ntp_logits_start) = detail::probe_ntp(model, probe);

  const auto eval_prompts = heldout_prompts(cfg.corpus, cfg.eval_prompts, cfg.seed);
  DecodeOptions eval_opt;
  eval_opt.strategy = Strategy::kQuadratic;
  eval_opt.k_eval = mc.k_masks;
  eval_opt.max_new = cfg.eval_max_new;

  model.set_phase(TrainPhase::kMtpFinetune);
  std::vector<Tensor<float>> params;
  for (auto& [name, t] : model.named_parameters()) {
    if (t.requires_grad()) params.push_back(t);
  }
  if (head) {
    head->set_trainable(true);
    for (auto& t : head->parameters()) params.push_back(t);
  }
  AdamW<float> opt(params, cfg.adamw);
  Rng rng(cfg.seed, "finetune.batches");
  detail::DivergenceGuard guard(cfg.divergence_factor, cfg.divergence_patience);
  const auto t0 = std::chrono::steady_clock::now();
  const double inv_b = 1.0 / double(cfg.batch_size);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    opt.zero_grad();
    MetricsRow row;
    row.step = step;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const auto& batch = batches[static_cast<std::size_t>(rng.integer(0, std::int64_t(batches.size()) - 1))];
      Tape<float> tape;
      auto fwd = forward(tape, model, batch.tokens, batch.position_ids, batch.attention, batch.gate);
      auto loss = compute_losses(tape, batch, model, fwd, head, cfg.weights);
      tape.backward(ops::scale(tape, loss.total, float(inv_b)));
      auto& r = row.loss;
      r.base_ce += loss.report.base_ce * inv_b;
      r.sampler_ce += loss.report.sampler_ce * inv_b;
      r.lcm += loss.report.lcm * inv_b;
      r.total += loss.report.total * inv_b;
      r.ntp_only_ce += loss.report.ntp_only_ce * inv_b;
      r.ntp_rows += loss.report.ntp_rows;
      r.mtp_rows += loss.report.mtp_rows;
      r.lcm_anchors += loss.report.lcm_anchors;
    }
    guard.observe(step, row.loss.total);
    row.lr = warmup_flat_lr(step, cfg.lr, cfg.warmup);
    opt.step(row.lr);
    row.wall_ms = detail::elapsed_ms(t0);
    if (sink) sink(row);
    res.metrics.push_back(row);
    if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && !eval_prompts.empty()) {
      res.evals.push_back({step + 1, measure_acceptance(model, static_cast<const SamplerHead<float>*>(head),
                                                        eval_prompts, eval_opt).mean});
    }
  }
  model.set_phase(TrainPhase::kFrozen);
  if (head) head->set_trainable(false);
  std::tie(res.probe_ntp_ce_end, res.probe_ntp_logits_end) = detail::probe_ntp(model, probe);
  return res;
}

inline TrainResult train(const TrainConfig& cfg, const std::optional<ModelBundle<float>>& base = std::nullopt,
                         const MetricsSink& sink = {}) {
  std::vector<MetricsRow> base_log;
  ModelBundle<float> b = base ? *base : pretrain_base(cfg, sink, &base_log);
  TrainResult res = finetune(cfg, b, sink);
  res.base_metrics = std::move(base_log);
  return res;
}

// Header entries written next to the weights so a checkpoint is
// self-describing for decoding and benchmarking.
inline KeyValues training_metadata(const TrainConfig& cfg) {
  KeyValues kv = cfg.corpus.to_key_values();
  kv["vocab.chars"] = derive_vocabulary(cfg.corpus).chars();
  kv["train.seed"] = std::to_string(cfg.seed);
  kv["train.use_sampler"] = cfg.use_sampler ? "1" : "0";
  kv["train.lcm_weight"] = std::to_string(cfg.weights.lcm);
  kv["train.sampler_weight"] = std::to_string(cfg.weights.sampler);
  kv["train.steps"] = std::to_string(cfg.steps);
  return kv;
}

}  // namespace mtp
