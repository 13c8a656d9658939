#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtp/batching.hpp"
#include "mtp/model/model.hpp"
#include "mtp/numerics/ops.hpp"
#include "mtp/sampler.hpp"

namespace mtp {

enum class Strategy { kLinear, kQuadratic };

inline const char* to_string(Strategy s) {
  return s == Strategy::kLinear ? "linear" : "quadratic";
}

inline Strategy parse_strategy(const std::string& s) {
  if (s == "linear") return Strategy::kLinear;
  if (s == "quadratic") return Strategy::kQuadratic;
  throw std::invalid_argument("unknown strategy '" + s + "'");
}

// Where the speculation used by the following step came from.
enum class SpeculationSource { kNone, kSampler, kBaseArgmax, kOverride };

struct StepTrace {
  std::size_t speculated = 0;
  std::size_t accepted = 0;
  std::size_t emitted = 0;  // after eos / budget truncation
  SpeculationSource next_source = SpeculationSource::kNone;
};

struct AcceptanceStats {
  std::size_t generated = 0;  // G
  std::size_t steps = 0;      // T, one per forward pass
  std::vector<std::size_t> accepted_histogram;  // index a = accepted count
  std::vector<StepTrace> trace;
};

inline double acceptance_rate(const AcceptanceStats& stats) {
  if (stats.steps == 0) throw std::invalid_argument("acceptance rate with zero steps");
  return static_cast<double>(stats.generated) / static_cast<double>(stats.steps);
}

struct DecodeState {
  std::vector<TokenId> verified;
  std::vector<TokenId> speculated;
  AcceptanceStats stats;
};

struct Verification {
  std::size_t accepted = 0;
  std::vector<TokenId> emitted;  // s_1..s_a then c_a
};

// chain_preds[j] is the base argmax at chain position j: j = 0 at the last
// verified token, j >= 1 at s_j. Accepts the longest prefix with s_j equal to
// chain_preds[j-1] and appends the model's own next token.
inline Verification verify_speculated(std::span<const TokenId> chain_preds,
                                      std::span<const TokenId> speculated) {
  if (chain_preds.size() != speculated.size() + 1) {
    throw std::invalid_argument("verify: need one chain prediction per speculated token plus one");
  }
  Verification v;
  while (v.accepted < speculated.size() &&
         speculated[v.accepted] == chain_preds[v.accepted]) {
    v.emitted.push_back(speculated[v.accepted]);
    ++v.accepted;
  }
  v.emitted.push_back(chain_preds[v.accepted]);
  return v;
}

// Replaces the model's proposal for the next step. Receives the verified
// sequence after the current step and the model's own proposal.
using ProposalOverride = std::function<std::vector<TokenId>(
    std::span<const TokenId> verified, std::span<const TokenId> proposed)>;

struct DecodeOptions {
  Strategy strategy = Strategy::kQuadratic;
  std::size_t k_eval = 1;
  std::size_t max_steps = 100;
  std::size_t max_new = std::numeric_limits<std::size_t>::max();
  std::optional<TokenId> eos;
  bool cover_reject_first = true;
  bool use_sampler = true;  // falls back to base argmax when no head is given
  ProposalOverride override_proposal;
};

struct DecodeResult {
  std::vector<TokenId> tokens;  // continuation only
  AcceptanceStats stats;
};

template <class Real>
TokenId argmax_row(const Tensor<Real>& logits, std::size_t row) {
  return static_cast<TokenId>(ops::argmax(logits.row(row), logits.cols()));
}

// Reference decoder: one token per full-prefix pass, every gate closed.
template <class Real>
std::vector<TokenId> greedy_autoregressive(const ModelBundle<Real>& model,
                                           std::span<const TokenId> prompt,
                                           std::size_t max_new,
                                           std::optional<TokenId> eos = std::nullopt) {
  if (prompt.empty()) throw std::invalid_argument("empty prompt");
  std::vector<TokenId> seq(prompt.begin(), prompt.end()), out;
  Tape<Real> off(false);
  while (out.size() < max_new) {
    auto fwd = forward_causal(off, model, seq);
    const TokenId next = argmax_row(fwd.logits, seq.size() - 1);
    out.push_back(next);
    seq.push_back(next);
    if (eos && next == *eos) break;
  }
  return out;
}

namespace detail {

inline std::vector<std::size_t> rows_anchored_at(const MaskedBatch& b, std::size_t anchor) {
  std::vector<std::size_t> rows;
  for (std::size_t t = 0; t < b.size(); ++t) {
    if (b.gate[t] == 1 && b.block_anchor[t] == anchor) rows.push_back(t);
  }
  return rows;
}

}  // namespace detail

// Self-speculative decoding. Every step is exactly one forward pass; the
// verified output is token-for-token what greedy_autoregressive produces.
template <class Real>
DecodeResult speculative_decode(const ModelBundle<Real>& model,
                                const SamplerHead<Real>* head,
                                std::span<const TokenId> prompt,
                                const DecodeOptions& opt) {
  if (prompt.empty()) throw std::invalid_argument("empty prompt");
  if (opt.k_eval < 1 || opt.k_eval > model.config.k_masks) {
    throw std::invalid_argument("k_eval must be in [1, k_masks]");
  }
  const std::size_t k = opt.k_eval;
  const bool sampler_on = opt.use_sampler && head != nullptr;
  DecodeState st;
  st.verified.assign(prompt.begin(), prompt.end());
  st.stats.accepted_histogram.assign(k + 1, 0);
  DecodeResult result;
  Tape<Real> off(false);

  bool done = false;
  while (!done && st.stats.steps < opt.max_steps && result.tokens.size() < opt.max_new) {
    const bool cold = st.speculated.empty();
    MaskedBatch batch =
        (opt.strategy == Strategy::kLinear || cold)
            ? build_linear_inference_input(st.verified, st.speculated, k, model.config)
            : build_quadratic_inference_input(st.verified, st.speculated, k, model.config,
                                              opt.cover_reject_first);
    auto fwd = forward(off, model, batch.tokens, batch.position_ids, batch.attention, batch.gate);

    std::vector<std::size_t> chain_rows;  // last verified row, then s_1..s_s
    for (std::size_t t = st.verified.size() - 1; t < batch.size(); ++t) {
      if (batch.gate[t] == 0) chain_rows.push_back(t);
    }
    std::vector<TokenId> chain_preds;
    for (std::size_t r : chain_rows) chain_preds.push_back(argmax_row(fwd.logits, r));
    Verification ver = verify_speculated(chain_preds, st.speculated);

    StepTrace step;
    step.speculated = st.speculated.size();
    step.accepted = ver.accepted;
    for (TokenId id : ver.emitted) {
      if (result.tokens.size() >= opt.max_new) {
        done = true;
        break;
      }
      result.tokens.push_back(id);
      st.verified.push_back(id);
      ++step.emitted;
      if (opt.eos && id == *opt.eos) {
        done = true;
        break;
      }
    }
    ++st.stats.steps;
    st.stats.generated += step.emitted;
    ++st.stats.accepted_histogram[ver.accepted];

    st.speculated.clear();
    if (!done && result.tokens.size() < opt.max_new) {
      const std::size_t anchor = chain_rows[ver.accepted];
      const auto mask_rows = detail::rows_anchored_at(batch, anchor);
      if (!mask_rows.empty()) {
        const TokenId seed = ver.emitted.back();
        if (sampler_on) {
          std::vector<std::span<const Real>> zs;
          for (std::size_t r : mask_rows) zs.emplace_back(fwd.hidden.row(r), model.config.d_model);
          st.speculated = sampler_chain(*head, model, seed, zs);
          step.next_source = SpeculationSource::kSampler;
        } else {
          for (std::size_t r : mask_rows) st.speculated.push_back(argmax_row(fwd.logits, r));
          step.next_source = SpeculationSource::kBaseArgmax;
        }
        if (opt.override_proposal) {
          st.speculated = opt.override_proposal(st.verified, st.speculated);
          if (st.speculated.size() != k) {
            throw std::invalid_argument("proposal override must return k_eval tokens");
          }
          step.next_source = SpeculationSource::kOverride;
        }
      }
    }
    st.stats.trace.push_back(step);
  }
  result.stats = std::move(st.stats);
  return result;
}

// Rank (1-based, ties broken toward lower ids) of true_future[j] in the base
// logits of mask m_{j+1} appended after the prompt. m_1 targets the token
// after the immediate next one.
template <class Real>
std::vector<std::size_t> future_rank_probe(const ModelBundle<Real>& model,
                                           std::span<const TokenId> prompt,
                                           std::span<const TokenId> true_future,
                                           std::size_t k) {
  if (true_future.size() > k) throw std::invalid_argument("more future tokens than masks");
  MaskedBatch b = build_linear_inference_input(prompt, {}, k, model.config);
  Tape<Real> off(false);
  auto fwd = forward(off, model, b.tokens, b.position_ids, b.attention, b.gate);
  std::vector<std::size_t> ranks;
  for (std::size_t j = 0; j < true_future.size(); ++j) {
    const Real* row = fwd.logits.row(prompt.size() + j);
    const auto target = static_cast<std::size_t>(true_future[j]);
    std::size_t rank = 1;
    for (std::size_t v = 0; v < fwd.logits.cols(); ++v) {
      if (row[v] > row[target] || (row[v] == row[target] && v < target)) ++rank;
    }
    ranks.push_back(rank);
  }
  return ranks;
}

struct RateSummary {
  double mean = 0.0;
  double stdev = 0.0;
  std::vector<double> rates;
  std::size_t tokens = 0;
};

inline RateSummary summarize_rates(std::vector<double> rates, std::size_t tokens = 0) {
  RateSummary s;
  s.rates = std::move(rates);
  s.tokens = tokens;
  if (s.rates.empty()) return s;
  for (double r : s.rates) s.mean += r;
  s.mean /= double(s.rates.size());
  for (double r : s.rates) s.stdev += (r - s.mean) * (r - s.mean);
  s.stdev = s.rates.size() > 1 ? std::sqrt(s.stdev / double(s.rates.size() - 1)) : 0.0;
  return s;
}

template <class Real>
RateSummary measure_acceptance(const ModelBundle<Real>& model, const SamplerHead<Real>* head,
                               const std::vector<std::vector<TokenId>>& prompts,
                               const DecodeOptions& opt) {
  std::vector<double> rates;
  std::size_t tokens = 0;
  for (const auto& p : prompts) {
    auto r = speculative_decode(model, head, p, opt);
    rates.push_back(acceptance_rate(r.stats));
    tokens += r.stats.generated;
  }
  return summarize_rates(std::move(rates), tokens);
}

}  // namespace mtp
