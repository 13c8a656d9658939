#pragma once

// Masked-input construction. Training layout: every loss-bearing token x_i is
// followed by its own block of k masks, so one pass answers the n prompts
// "x_1..x_i + masks" at once. Inference layouts put masks after the verified
// tail (linear) or after every speculated token (quadratic).

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mtp/model/config.hpp"
#include "mtp/numerics/attention_mask.hpp"

namespace mtp {

inline constexpr TokenId kIgnore = -1;
inline constexpr std::size_t kNoRow = std::numeric_limits<std::size_t>::max();

struct LcmPair {
  std::size_t mtp_row;
  std::size_t anchor_row;
  bool operator==(const LcmPair&) const = default;
};

struct MaskedBatch {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> position_ids;
  std::vector<std::uint8_t> gate;  // 1 = mask (MTP) row
  std::vector<TokenId> base_labels;
  AttentionMask attention;
  std::vector<std::size_t> block_anchor;  // kNoRow on real-token rows
  std::vector<LcmPair> lcm_pairs;
  std::vector<TokenId> prev_token;  // kIgnore when no conditioning token exists

  std::size_t size() const { return tokens.size(); }

  std::size_t count_gate(std::uint8_t value) const {
    std::size_t n = 0;
    for (auto g : gate) n += g == value;
    return n;
  }
};

namespace detail {

inline void push_row(MaskedBatch& b, TokenId token, std::size_t pos,
                     std::uint8_t gate, TokenId label, std::size_t anchor,
                     TokenId prev) {
  b.tokens.push_back(token);
  b.position_ids.push_back(pos);
  b.gate.push_back(gate);
  b.base_labels.push_back(label);
  b.block_anchor.push_back(anchor);
  b.prev_token.push_back(prev);
}

}  // namespace detail

// seq = x_1..x_n (stored 0-based), loss_flags[i] = 1 when the row of x_i
// carries a loss. Masks follow x_i iff its flag is set and i < n.
inline MaskedBatch build_training_batch(std::span<const TokenId> seq,
                                        std::span<const std::uint8_t> loss_flags,
                                        const ModelConfig& config) {
  const std::size_t n = seq.size(), k = config.k_masks;
  if (n < 2) throw std::invalid_argument("training sequence needs at least 2 tokens");
  if (loss_flags.size() != n) {
    throw std::invalid_argument("loss_flags must have one entry per token");
  }
  if (k < 1) throw std::invalid_argument("k must be at least 1");

  MaskedBatch b;
  std::vector<std::size_t> ntp_row(n);
  // mask_row[i][j-1]: row of m_j in the block after x_i (0-based i).
  std::vector<std::vector<std::size_t>> mask_row(n);
  for (std::size_t i = 0; i < n; ++i) {
    const bool flagged = loss_flags[i] != 0;
    ntp_row[i] = b.size();
    const TokenId ntp_label = (flagged && i + 1 < n) ? seq[i + 1] : kIgnore;
    detail::push_row(b, seq[i], i, 0, ntp_label, kNoRow, seq[i]);
    if (!flagged || i + 1 >= n) continue;
    for (std::size_t j = 1; j <= k; ++j) {
      mask_row[i].push_back(b.size());
      const std::size_t target = i + 1 + j;
      const TokenId label = target < n ? seq[target] : kIgnore;
      const TokenId prev = target < n ? seq[target - 1] : kIgnore;
      detail::push_row(b, config.mask_id(j), i + j, 1, label, ntp_row[i], prev);
    }
  }

  const std::size_t t = b.size();
  b.attention = AttentionMask(t);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p <= i; ++p) b.attention.allow(ntp_row[i], ntp_row[p]);
    for (std::size_t j = 0; j < mask_row[i].size(); ++j) {
      const std::size_t row = mask_row[i][j];
      for (std::size_t p = 0; p <= i; ++p) b.attention.allow(row, ntp_row[p]);
      for (std::size_t q = 0; q <= j; ++q) b.attention.allow(row, mask_row[i][q]);
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 1; j <= mask_row[i].size(); ++j) {
      if (i + j > n - 1) break;
      const std::size_t m = mask_row[i][j - 1], a = ntp_row[i + j];
      if (b.base_labels[m] != kIgnore && b.base_labels[a] != kIgnore) {
        b.lcm_pairs.push_back({m, a});
      }
    }
  }
  return b;
}

// verified + speculated + [m_1..m_k], fully causal, masks gated on.
inline MaskedBatch build_linear_inference_input(std::span<const TokenId> verified,
                                                std::span<const TokenId> speculated,
                                                std::size_t k,
                                                const ModelConfig& config) {
  if (verified.empty()) throw std::invalid_argument("verified prefix is empty");
  if (speculated.size() > k) {
    throw std::invalid_argument("more speculated tokens than masks");
  }
  if (k < 1 || k > config.k_masks) {
    throw std::invalid_argument("k must be in [1, k_masks]");
  }
  MaskedBatch b;
  for (TokenId id : verified) {
    detail::push_row(b, id, b.size(), 0, kIgnore, kNoRow, kIgnore);
  }
  for (TokenId id : speculated) {
    detail::push_row(b, id, b.size(), 0, kIgnore, kNoRow, kIgnore);
  }
  const std::size_t anchor = b.size() - 1;
  for (std::size_t j = 1; j <= k; ++j) {
    detail::push_row(b, config.mask_id(j), b.size(), 1, kIgnore, anchor, kIgnore);
  }
  b.attention = AttentionMask::causal(b.size());
  return b;
}

// verified + [pre-block] + [s_1, m_1..m_k] + ... + [s_k, m_1..m_k]. Chain
// tokens see the verified prefix and earlier chain tokens only; each mask
// block sees the prefix, the chain up to its anchor and its own earlier masks.
inline MaskedBatch build_quadratic_inference_input(std::span<const TokenId> verified,
                                                   std::span<const TokenId> speculated,
                                                   std::size_t k,
                                                   const ModelConfig& config,
                                                   bool cover_reject_first = true) {
  if (verified.empty()) throw std::invalid_argument("verified prefix is empty");
  if (k < 1 || k > config.k_masks) {
    throw std::invalid_argument("k must be in [1, k_masks]");
  }
  if (speculated.size() != k) {
    throw std::invalid_argument("quadratic layout needs exactly k speculated tokens, got " +
                                std::to_string(speculated.size()));
  }
  const std::size_t nv = verified.size();
  MaskedBatch b;
  for (std::size_t i = 0; i < nv; ++i) {
    detail::push_row(b, verified[i], i, 0, kIgnore, kNoRow, kIgnore);
  }
  std::vector<std::size_t> chain_rows;  // rows that are real tokens, in order
  for (std::size_t i = 0; i < nv; ++i) chain_rows.push_back(i);
  std::vector<std::pair<std::size_t, std::vector<std::size_t>>> blocks;

  auto emit_block = [&](std::size_t anchor_row) {
    std::vector<std::size_t> rows;
    const std::size_t p = b.position_ids[anchor_row];
    for (std::size_t l = 1; l <= k; ++l) {
      rows.push_back(b.size());
      detail::push_row(b, config.mask_id(l), p + l, 1, kIgnore, anchor_row, kIgnore);
    }
    blocks.emplace_back(anchor_row, std::move(rows));
  };

  if (cover_reject_first) emit_block(nv - 1);
  for (std::size_t j = 0; j < k; ++j) {
    chain_rows.push_back(b.size());
    detail::push_row(b, speculated[j], nv + j, 0, kIgnore, kNoRow, kIgnore);
    emit_block(chain_rows.back());
  }

  b.attention = AttentionMask(b.size());
  for (std::size_t c = 0; c < chain_rows.size(); ++c) {
    for (std::size_t p = 0; p <= c; ++p) b.attention.allow(chain_rows[c], chain_rows[p]);
  }
  for (const auto& [anchor, rows] : blocks) {
    for (std::size_t c = 0; c < chain_rows.size() && chain_rows[c] <= anchor; ++c) {
      for (std::size_t row : rows) b.attention.allow(row, chain_rows[c]);
    }
    for (std::size_t l = 0; l < rows.size(); ++l) {
      for (std::size_t q = 0; q <= l; ++q) b.attention.allow(rows[l], rows[q]);
    }
  }
  return b;
}

}  // namespace mtp
