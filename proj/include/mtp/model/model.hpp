#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mtp/model/config.hpp"
#include "mtp/numerics/attention_mask.hpp"
#include "mtp/numerics/ops.hpp"
#include "mtp/numerics/rng.hpp"
#include "mtp/numerics/tensor.hpp"

namespace mtp {

// y_t = W x_t + gate_t * scale * B^T (A^T x_t). W is frozen outside base
// pretraining; A and B are absent when the rank is zero.
template <class Real>
struct GatedLoraLinear {
  Tensor<Real> weight;  // [out x in]
  Tensor<Real> lora_a;  // [in x r]
  Tensor<Real> lora_b;  // [r x out]

  std::size_t in_features() const { return weight.shape()[1]; }
  std::size_t out_features() const { return weight.shape()[0]; }
  std::size_t rank() const { return lora_a.defined() ? lora_a.shape()[1] : 0; }

  Tensor<Real> apply(Tape<Real>& tape, const Tensor<Real>& x,
                     std::span<const std::uint8_t> gate, Real scale) const {
    return ops::gated_lora_linear(tape, x, weight, lora_a, lora_b, gate, scale);
  }
};

template <class Real>
struct TransformerBlock {
  Tensor<Real> ln1_gain, ln1_bias;
  GatedLoraLinear<Real> query, key, value, attn_out;
  Tensor<Real> ln2_gain, ln2_bias;
  GatedLoraLinear<Real> ff_in, ff_out;
};

enum class TrainPhase {
  kFrozen,        // nothing tracked (inference)
  kBasePretrain,  // ordinary next-token training of the base weights
  kMtpFinetune,   // adapters + mask embeddings only
};

template <class Real>
struct ModelBundle {
  ModelConfig config;
  Tensor<Real> base_embed;  // [(V-k) x d]
  Tensor<Real> mask_embed;  // [k x d], rows m_1..m_k
  std::vector<TransformerBlock<Real>> layers;
  Tensor<Real> final_gain, final_bias;
  Tensor<Real> unembed;  // [V x d]
  Tensor<Real> positions;  // [max_position x d] sinusoidal table, not a parameter

  // alpha / r with alpha = 2r.
  static constexpr Real kLoraScale = Real(2);

  std::vector<std::pair<std::string, Tensor<Real>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<Real>>> out;
    out.emplace_back("embed.base", base_embed);
    out.emplace_back("embed.mask", mask_embed);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& b = layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      out.emplace_back(p + "ln1.gain", b.ln1_gain);
      out.emplace_back(p + "ln1.bias", b.ln1_bias);
      auto lin = [&](const std::string& name, const GatedLoraLinear<Real>& g) {
        out.emplace_back(p + name + ".W", g.weight);
        if (g.rank() > 0) {
          out.emplace_back(p + name + ".A", g.lora_a);
          out.emplace_back(p + name + ".B", g.lora_b);
        }
      };
      lin("attn.q", b.query);
      lin("attn.k", b.key);
      lin("attn.v", b.value);
      lin("attn.o", b.attn_out);
      out.emplace_back(p + "ln2.gain", b.ln2_gain);
      out.emplace_back(p + "ln2.bias", b.ln2_bias);
      lin("ff.in", b.ff_in);
      lin("ff.out", b.ff_out);
    }
    out.emplace_back("final_ln.gain", final_gain);
    out.emplace_back("final_ln.bias", final_bias);
    out.emplace_back("unembed", unembed);
    return out;
  }

  static bool is_lora_name(const std::string& name) {
    return name.size() > 2 && name[name.size() - 2] == '.' &&
           (name.back() == 'A' || name.back() == 'B');
  }

  std::vector<Tensor<Real>> lora_parameters() const {
    std::vector<Tensor<Real>> out;
    for (auto& [name, t] : named_parameters()) {
      if (is_lora_name(name)) out.push_back(t);
    }
    return out;
  }

  std::vector<Tensor<Real>> base_parameters() const {
    std::vector<Tensor<Real>> out;
    for (auto& [name, t] : named_parameters()) {
      if (!is_lora_name(name) && name != "embed.mask") out.push_back(t);
    }
    return out;
  }

  void set_phase(TrainPhase phase) {
    for (auto& [name, t] : named_parameters()) {
      const bool lora = is_lora_name(name);
      const bool mask = name == "embed.mask";
      bool on = false;
      switch (phase) {
        case TrainPhase::kFrozen:
          break;
        case TrainPhase::kBasePretrain:
          on = !lora && !mask;
          break;
        case TrainPhase::kMtpFinetune:
          on = lora || (mask && config.train_mask_embeddings);
          break;
      }
      auto copy = t;
      copy.set_requires_grad(on);
    }
  }

  // Deep copy with a different scalar type (gradient checks run in double).
  template <class Other>
  ModelBundle<Other> cast() const {
    ModelBundle<Other> m;
    m.config = config;
    m.base_embed = base_embed.template cast<Other>();
    m.mask_embed = mask_embed.template cast<Other>();
    for (const auto& b : layers) {
      TransformerBlock<Other> o;
      auto lin = [](const GatedLoraLinear<Real>& g) {
        GatedLoraLinear<Other> r;
        r.weight = g.weight.template cast<Other>();
        if (g.rank() > 0) {
          r.lora_a = g.lora_a.template cast<Other>();
          r.lora_b = g.lora_b.template cast<Other>();
        }
        return r;
      };
      o.ln1_gain = b.ln1_gain.template cast<Other>();
      o.ln1_bias = b.ln1_bias.template cast<Other>();
      o.query = lin(b.query);
      o.key = lin(b.key);
      o.value = lin(b.value);
      o.attn_out = lin(b.attn_out);
      o.ln2_gain = b.ln2_gain.template cast<Other>();
      o.ln2_bias = b.ln2_bias.template cast<Other>();
      o.ff_in = lin(b.ff_in);
      o.ff_out = lin(b.ff_out);
      m.layers.push_back(std::move(o));
    }
    m.final_gain = final_gain.template cast<Other>();
    m.final_bias = final_bias.template cast<Other>();
    m.unembed = unembed.template cast<Other>();
    m.positions = positions.template cast<Other>();
    return m;
  }

  ModelBundle clone() const { return cast<Real>(); }
};

template <class Real>
Tensor<Real> sinusoidal_table(std::size_t max_position, std::size_t d) {
  std::vector<Real> data(max_position * d);
  for (std::size_t pos = 0; pos < max_position; ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) /
                                                static_cast<double>(d));
      const double angle = static_cast<double>(pos) * freq;
      data[pos * d + i] = static_cast<Real>(i % 2 == 0 ? std::sin(angle)
                                                       : std::cos(angle));
    }
  }
  return Tensor<Real>({max_position, d}, std::move(data));
}

namespace detail {

template <class Real>
Tensor<Real> normal_tensor(std::uint64_t seed, const std::string& name,
                           Shape shape, double stddev) {
  Rng rng(seed, name);
  const std::size_t n = shape_size(shape);
  return Tensor<Real>(std::move(shape), rng.normal_vector<Real>(n, stddev));
}

template <class Real>
GatedLoraLinear<Real> init_linear(std::uint64_t seed, const std::string& name,
                                  std::size_t in, std::size_t out,
                                  std::size_t rank, double weight_scale = 1.0) {
  GatedLoraLinear<Real> g;
  g.weight = normal_tensor<Real>(seed, name + ".W", {out, in},
                                 weight_scale / std::sqrt(double(in)));
  if (rank > 0) {
    g.lora_a = normal_tensor<Real>(seed, name + ".A", {in, rank},
                                   1.0 / std::sqrt(double(in)));
    g.lora_b = Tensor<Real>::zeros({rank, out});
  }
  return g;
}

}  // namespace detail

// Base weights ~ N(0, 1/fan_in) (output projections shrunk by depth), LoRA A
// ~ N(0, 1/fan_in) and B = 0 so the adapter starts as an exact no-op. Mask
// embeddings share the base embedding scale.
template <class Real = float>
ModelBundle<Real> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.d_model, r = config.lora_rank;
  const double out_scale = 1.0 / std::sqrt(2.0 * double(config.n_layers));
  ModelBundle<Real> m;
  m.config = config;
  m.base_embed = detail::normal_tensor<Real>(seed, "embed.base", {config.base_vocab(), d}, 1.0);
  m.mask_embed = detail::normal_tensor<Real>(seed, "embed.mask", {config.k_masks, d}, 1.0);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    TransformerBlock<Real> b;
    b.ln1_gain = Tensor<Real>::filled({d}, Real(1));
    b.ln1_bias = Tensor<Real>::zeros({d});
    b.query = detail::init_linear<Real>(seed, p + "attn.q", d, d, r);
    b.key = detail::init_linear<Real>(seed, p + "attn.k", d, d, r);
    b.value = detail::init_linear<Real>(seed, p + "attn.v", d, d, r);
    b.attn_out = detail::init_linear<Real>(seed, p + "attn.o", d, d, r, out_scale);
    b.ln2_gain = Tensor<Real>::filled({d}, Real(1));
    b.ln2_bias = Tensor<Real>::zeros({d});
    b.ff_in = detail::init_linear<Real>(seed, p + "ff.in", d, config.d_ff, r);
    b.ff_out = detail::init_linear<Real>(seed, p + "ff.out", config.d_ff, d, r, out_scale);
    m.layers.push_back(std::move(b));
  }
  m.final_gain = Tensor<Real>::filled({d}, Real(1));
  m.final_bias = Tensor<Real>::zeros({d});
  m.unembed = detail::normal_tensor<Real>(seed, "unembed", {config.vocab_size, d},
                                          1.0 / std::sqrt(double(d)));
  m.positions = sinusoidal_table<Real>(config.max_position, d);
  return m;
}

template <class Real>
struct ForwardResult {
  Tensor<Real> hidden;  // [T x d], last layer after the final norm
  Tensor<Real> logits;  // [T x V]
};

// One pass over an arbitrary layout. `mask` must only look backwards; rows with
// gate 1 take the adapter path (every row does when the model is configured
// for plain LoRA).
template <class Real>
ForwardResult<Real> forward(Tape<Real>& tape, const ModelBundle<Real>& model,
                            std::span<const TokenId> tokens,
                            std::span<const std::size_t> position_ids,
                            const AttentionMask& mask,
                            std::span<const std::uint8_t> gate) {
  const auto& cfg = model.config;
  const std::size_t t = tokens.size(), d = cfg.d_model;
  if (t == 0) throw ShapeError("forward on an empty sequence");
  if (position_ids.size() != t || gate.size() != t || mask.size() != t) {
    throw ShapeError("forward inputs disagree on sequence length");
  }
  mask.validate();
  std::vector<Real> pos(t * d);
  for (std::size_t i = 0; i < t; ++i) {
    if (position_ids[i] >= cfg.max_position) {
      throw ShapeError("position id " + std::to_string(position_ids[i]) +
                       " exceeds max_position " + std::to_string(cfg.max_position));
    }
    std::copy_n(model.positions.row(position_ids[i]), d, pos.begin() + i * d);
  }
  std::vector<std::uint8_t> effective_gate(gate.begin(), gate.end());
  if (!cfg.gated_lora) std::fill(effective_gate.begin(), effective_gate.end(), 1);
  const std::span<const std::uint8_t> g(effective_gate);
  const Real s = ModelBundle<Real>::kLoraScale;

  Tensor<Real> x = ops::split_embedding_lookup(tape, model.base_embed, model.mask_embed, tokens);
  x = ops::add(tape, x, Tensor<Real>({t, d}, std::move(pos)));
  for (const auto& b : model.layers) {
    Tensor<Real> h = ops::layer_norm(tape, x, b.ln1_gain, b.ln1_bias);
    Tensor<Real> q = b.query.apply(tape, h, g, s);
    Tensor<Real> k = b.key.apply(tape, h, g, s);
    Tensor<Real> v = b.value.apply(tape, h, g, s);
    Tensor<Real> a = ops::attention(tape, q, k, v, mask, cfg.n_heads);
    x = ops::add(tape, x, b.attn_out.apply(tape, a, g, s));
    h = ops::layer_norm(tape, x, b.ln2_gain, b.ln2_bias);
    Tensor<Real> f = ops::silu(tape, b.ff_in.apply(tape, h, g, s));
    x = ops::add(tape, x, b.ff_out.apply(tape, f, g, s));
  }
  ForwardResult<Real> out;
  out.hidden = ops::layer_norm(tape, x, model.final_gain, model.final_bias);
  out.logits = ops::linear(tape, out.hidden, model.unembed);
  return out;
}

// Plain causal pass over consecutive positions with every gate closed.
template <class Real>
ForwardResult<Real> forward_causal(Tape<Real>& tape, const ModelBundle<Real>& model,
                                   std::span<const TokenId> tokens) {
  std::vector<std::size_t> pos(tokens.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
  std::vector<std::uint8_t> gate(tokens.size(), 0);
  return forward(tape, model, tokens, pos, AttentionMask::causal(tokens.size()), gate);
}

}  // namespace mtp
