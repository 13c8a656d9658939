#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mtp/model/model.hpp"
#include "mtp/numerics/ops.hpp"
#include "mtp/numerics/rng.hpp"

namespace mtp {

// Two (linear -> SiLU -> LayerNorm) blocks over [E_prev ; z], projected back
// through the model's unembedding.
template <class Real>
struct SamplerHead {
  Tensor<Real> w1, b1;    // [d x 2d], [d]
  Tensor<Real> ln1_gain, ln1_bias;
  Tensor<Real> w2, b2;    // [d x d], [d]
  Tensor<Real> ln2_gain, ln2_bias;

  std::size_t width() const { return w2.shape()[0]; }

  std::vector<std::pair<std::string, Tensor<Real>>> named_parameters() const {
    return {{"sampler.w1", w1},       {"sampler.b1", b1},
            {"sampler.ln1.gain", ln1_gain}, {"sampler.ln1.bias", ln1_bias},
            {"sampler.w2", w2},       {"sampler.b2", b2},
            {"sampler.ln2.gain", ln2_gain}, {"sampler.ln2.bias", ln2_bias}};
  }

  std::vector<Tensor<Real>> parameters() const {
    std::vector<Tensor<Real>> out;
    for (auto& [n, t] : named_parameters()) out.push_back(t);
    return out;
  }

  void set_trainable(bool on) {
    for (auto& t : parameters()) {
      auto copy = t;
      copy.set_requires_grad(on);
    }
  }

  template <class Other>
  SamplerHead<Other> cast() const {
    SamplerHead<Other> h;
    h.w1 = w1.template cast<Other>();
    h.b1 = b1.template cast<Other>();
    h.ln1_gain = ln1_gain.template cast<Other>();
    h.ln1_bias = ln1_bias.template cast<Other>();
    h.w2 = w2.template cast<Other>();
    h.b2 = b2.template cast<Other>();
    h.ln2_gain = ln2_gain.template cast<Other>();
    h.ln2_bias = ln2_bias.template cast<Other>();
    return h;
  }
};

template <class Real = float>
SamplerHead<Real> init_sampler(std::size_t d, std::uint64_t seed) {
  auto normal = [seed](const std::string& name, Shape shape, double std) {
    Rng rng(seed, name);
    const std::size_t n = shape_size(shape);
    return Tensor<Real>(std::move(shape), rng.normal_vector<Real>(n, std));
  };
  SamplerHead<Real> h;
  h.w1 = normal("sampler.w1", {d, 2 * d}, 1.0 / std::sqrt(2.0 * double(d)));
  h.b1 = Tensor<Real>::zeros({d});
  h.ln1_gain = Tensor<Real>::filled({d}, Real(1));
  h.ln1_bias = Tensor<Real>::zeros({d});
  h.w2 = normal("sampler.w2", {d, d}, 1.0 / std::sqrt(double(d)));
  h.b2 = Tensor<Real>::zeros({d});
  h.ln2_gain = Tensor<Real>::filled({d}, Real(1));
  h.ln2_bias = Tensor<Real>::zeros({d});
  return h;
}

// Batched sampler logits: row t conditions on prev_tokens[t] and hidden[t].
// Returns [T x V].
template <class Real>
Tensor<Real> sampler_forward(Tape<Real>& tape, const SamplerHead<Real>& head,
                             const ModelBundle<Real>& model,
                             std::span<const TokenId> prev_tokens,
                             const Tensor<Real>& hidden) {
  if (prev_tokens.size() != hidden.rows()) {
    throw ShapeError("sampler: one previous token per hidden row expected");
  }
  Tensor<Real> e = ops::split_embedding_lookup(tape, model.base_embed,
                                               model.mask_embed, prev_tokens);
  Tensor<Real> x = ops::concat_cols(tape, e, hidden);
  x = ops::add_row_bias(tape, ops::linear(tape, x, head.w1), head.b1);
  x = ops::layer_norm(tape, ops::silu(tape, x), head.ln1_gain, head.ln1_bias);
  x = ops::add_row_bias(tape, ops::linear(tape, x, head.w2), head.b2);
  x = ops::layer_norm(tape, ops::silu(tape, x), head.ln2_gain, head.ln2_bias);
  return ops::linear(tape, x, model.unembed);
}

template <class Real>
std::vector<Real> sampler_logits(const SamplerHead<Real>& head,
                                 const ModelBundle<Real>& model, TokenId prev_token,
                                 std::span<const Real> z) {
  if (prev_token < 0 || static_cast<std::size_t>(prev_token) >= model.config.vocab_size) {
    throw std::invalid_argument("sampler: invalid previous token " +
                                std::to_string(prev_token));
  }
  Tape<Real> off(false);
  Tensor<Real> h({1, z.size()}, std::vector<Real>(z.begin(), z.end()));
  const TokenId prev[1] = {prev_token};
  Tensor<Real> logits = sampler_forward(off, head, model, prev, h);
  return {logits.data().begin(), logits.data().end()};
}

// Greedy chain y_1 = argmax p(. | seed, z_1), y_{j+1} = argmax p(. | y_j, z_{j+1}).
template <class Real>
std::vector<TokenId> sampler_chain(const SamplerHead<Real>& head,
                                   const ModelBundle<Real>& model, TokenId seed_token,
                                   const std::vector<std::span<const Real>>& zs) {
  std::vector<TokenId> out;
  TokenId prev = seed_token;
  for (const auto& z : zs) {
    const auto logits = sampler_logits(head, model, prev, z);
    prev = static_cast<TokenId>(ops::argmax(logits.data(), logits.size()));
    out.push_back(prev);
  }
  return out;
}

}  // namespace mtp
