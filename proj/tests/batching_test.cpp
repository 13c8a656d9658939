#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "mtp/batching.hpp"
#include "test_util.hpp"

namespace mtp {
namespace {

using testing::tiny_config;

// Token ids for the worked example: a=3, b=4, c=5, masks 11 and 12 (k=2).
TEST(TrainingBatch, ThreeTokenExample) {
  auto cfg = tiny_config(11, 2);
  const std::vector<TokenId> seq = {3, 4, 5};
  const std::vector<std::uint8_t> flags = {1, 1, 1};
  auto b = build_training_batch(seq, flags, cfg);
  const TokenId m1 = cfg.mask_id(1), m2 = cfg.mask_id(2);
  EXPECT_EQ(b.tokens, (std::vector<TokenId>{3, m1, m2, 4, m1, m2, 5}));
  EXPECT_EQ(b.position_ids, (std::vector<std::size_t>{0, 1, 2, 1, 2, 3, 2}));
  EXPECT_EQ(b.base_labels, (std::vector<TokenId>{4, 5, kIgnore, 5, kIgnore, kIgnore, kIgnore}));
  EXPECT_EQ(b.gate, (std::vector<std::uint8_t>{0, 1, 1, 0, 1, 1, 0}));
  // m_1 after a shares its label with the NTP row of b.
  EXPECT_EQ(b.lcm_pairs, (std::vector<LcmPair>{{1, 3}}));
  EXPECT_EQ(b.prev_token[1], 4);
}

TEST(TrainingBatch, NoFlagsGivesPlainCausalSequence) {
  auto cfg = tiny_config(11, 3);
  const std::vector<TokenId> seq = {3, 4, 5, 6};
  auto b = build_training_batch(seq, std::vector<std::uint8_t>(4, 0), cfg);
  EXPECT_EQ(b.tokens, seq);
  EXPECT_EQ(b.count_gate(1), 0u);
  EXPECT_EQ(b.attention, AttentionMask::causal(4));
  for (auto l : b.base_labels) EXPECT_EQ(l, kIgnore);
}

TEST(TrainingBatch, RowCountAndBlockIsolation) {
  auto cfg = tiny_config(11, 3);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed, "flags");
    const std::size_t n = 2 + seed;
    auto seq = testing::random_tokens(n, cfg.base_vocab(), seed);
    std::vector<std::uint8_t> flags(n);
    for (auto& f : flags) f = static_cast<std::uint8_t>(rng.integer(0, 1));
    auto b = build_training_batch(seq, flags, cfg);
    std::size_t flagged = 0;
    for (std::size_t i = 0; i + 1 < n; ++i) flagged += flags[i];
    ASSERT_EQ(b.size(), n + flagged * cfg.k_masks);
    ASSERT_NO_THROW(b.attention.validate());
    for (std::size_t r = 0; r < b.size(); ++r) {
      for (std::size_t key = 0; key < b.size(); ++key) {
        if (!b.attention.allowed(r, key)) continue;
        if (b.gate[r] == 0) {
          EXPECT_EQ(b.gate[key], 0) << "real token row sees a mask";
        } else if (b.gate[key] == 1) {
          EXPECT_EQ(b.block_anchor[key], b.block_anchor[r]) << "mask sees another block";
        }
      }
    }
  }
}

TEST(TrainingBatch, RejectsBadInputs) {
  auto cfg = tiny_config();
  const std::vector<TokenId> one = {3};
  EXPECT_THROW(build_training_batch(one, std::vector<std::uint8_t>{1}, cfg), std::invalid_argument);
  const std::vector<TokenId> two = {3, 4};
  EXPECT_THROW(build_training_batch(two, std::vector<std::uint8_t>{1}, cfg), std::invalid_argument);
}

TEST(LinearInput, ColdStepIsPrefixPlusMasks) {
  auto cfg = tiny_config(11, 3);
  const std::vector<TokenId> v = {1, 4, 5};
  auto b = build_linear_inference_input(v, {}, 3, cfg);
  EXPECT_EQ(b.tokens, (std::vector<TokenId>{1, 4, 5, 11, 12, 13}));
  EXPECT_EQ(b.count_gate(1), 3u);
  EXPECT_EQ(b.attention, AttentionMask::causal(6));
}

TEST(LinearInput, SizeAndPositions) {
  auto cfg = tiny_config(11, 3);
  const std::vector<TokenId> v = {1, 4, 5, 6, 7}, s = {3, 4, 5};
  auto b = build_linear_inference_input(v, s, 3, cfg);
  ASSERT_EQ(b.size(), 11u);
  for (std::size_t i = 0; i < 11; ++i) EXPECT_EQ(b.position_ids[i], i);
  EXPECT_EQ(b.count_gate(1), 3u);
  EXPECT_THROW(build_linear_inference_input(v, std::vector<TokenId>{1, 2, 3, 4}, 3, cfg),
               std::invalid_argument);
}

TEST(QuadraticInput, SmallestCase) {
  auto cfg = tiny_config(11, 1);
  const std::vector<TokenId> v = {1, 4};
  const std::vector<TokenId> s = {5};
  auto with = build_quadratic_inference_input(v, s, 1, cfg, true);
  EXPECT_EQ(with.tokens, (std::vector<TokenId>{1, 4, 11, 5, 11}));
  auto without = build_quadratic_inference_input(v, s, 1, cfg, false);
  EXPECT_EQ(without.tokens, (std::vector<TokenId>{1, 4, 5, 11}));
  EXPECT_FALSE(with.attention.allowed(4, 2));
  EXPECT_FALSE(with.attention.allowed(3, 2));
}

TEST(QuadraticInput, ThreeMasksWithoutPreBlock) {
  auto cfg = tiny_config(11, 3);
  const std::vector<TokenId> v = {1, 4, 5, 6};
  const std::vector<TokenId> s = {7, 8, 9};
  auto b = build_quadratic_inference_input(v, s, 3, cfg, false);
  ASSERT_EQ(b.size(), 4u + 3u + 9u);
  // Layout: v0..v3, s1, m m m, s2, m m m, s3, m m m.
  const std::size_t s1 = 4, s2 = 8, block2_m1 = 9;
  EXPECT_EQ(b.tokens[s2], 8);
  EXPECT_EQ(b.tokens[block2_m1], cfg.mask_id(1));
  const std::vector<std::size_t> expected = {0, 1, 2, 3, s1, s2, block2_m1};
  EXPECT_EQ(b.attention.keys(block2_m1), expected);
  EXPECT_EQ(b.position_ids[block2_m1], 6u);
}

TEST(QuadraticInput, MasksNeverSeeOtherBlocks) {
  auto cfg = tiny_config(11, 4);
  for (std::size_t k = 1; k <= 4; ++k) {
    for (bool cover : {false, true}) {
      auto v = testing::random_tokens(5, cfg.base_vocab(), k);
      auto s = testing::random_tokens(k, cfg.base_vocab(), k + 10);
      auto b = build_quadratic_inference_input(v, s, k, cfg, cover);
      ASSERT_NO_THROW(b.attention.validate());
      EXPECT_EQ(b.size(), 5 + k + (k + (cover ? 1 : 0)) * k);
      for (std::size_t r = 0; r < b.size(); ++r) {
        for (std::size_t key : b.attention.keys(r)) {
          if (b.gate[key] == 1) {
            EXPECT_EQ(b.block_anchor[key], b.block_anchor[r]);
          }
          if (b.gate[r] == 0) {
            EXPECT_EQ(b.gate[key], 0);
          }
        }
      }
    }
  }
}

TEST(QuadraticInput, NeedsExactlyKSpeculatedTokens) {
  auto cfg = tiny_config(11, 3);
  const std::vector<TokenId> v = {1}, s = {4, 5};
  EXPECT_THROW(build_quadratic_inference_input(v, s, 3, cfg), std::invalid_argument);
}

// Every prefix-plus-masks prompt in a training batch is answered exactly as if
// it were run on its own.
TEST(TrainingBatch, EquivalentToPlainAndStandaloneForwards) {
  auto cfg = tiny_config(11, 3);
  auto model = init_model<double>(cfg, 30);
  testing::randomize_lora(model, 31);
  Tape<double> off(false);
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const std::size_t n = 3 + 2 * seed;
    auto seq = testing::random_tokens(n, cfg.base_vocab(), 40 + seed);
    auto b = build_training_batch(seq, std::vector<std::uint8_t>(n, 1), cfg);
    auto fwd = forward(off, model, b.tokens, b.position_ids, b.attention, b.gate);
    auto plain = forward_causal(off, model, seq);
    std::size_t i = 0;
    for (std::size_t r = 0; r < b.size(); ++r) {
      if (b.gate[r] != 0) continue;
      for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
        ASSERT_NEAR(fwd.logits.at(r, v), plain.logits.at(i, v), 1e-6);
      }
      ++i;
    }
    for (std::size_t p = 0; p + 1 < n; ++p) {
      std::vector<TokenId> prefix(seq.begin(), seq.begin() + std::ptrdiff_t(p + 1));
      auto alone = build_linear_inference_input(prefix, {}, cfg.k_masks, cfg);
      auto af = forward(off, model, alone.tokens, alone.position_ids, alone.attention, alone.gate);
      std::size_t j = 0;
      for (std::size_t r = 0; r < b.size(); ++r) {
        if (b.gate[r] != 1 || b.position_ids[b.block_anchor[r]] != p) continue;
        for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
          ASSERT_NEAR(fwd.logits.at(r, v), af.logits.at(p + 1 + j, v), 1e-6);
        }
        ++j;
      }
      EXPECT_EQ(j, cfg.k_masks);
    }
  }
}

}  // namespace
}  // namespace mtp
