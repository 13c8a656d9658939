#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "mtp/model/model.hpp"
#include "test_util.hpp"

namespace mtp {
namespace {

using testing::tiny_config;

// Independent causal transformer written with plain loops: pre-norm blocks,
// no adapters, no masks, no tape.
std::vector<double> reference_logits(const ModelBundle<double>& m, const std::vector<TokenId>& tokens) {
  const auto& c = m.config;
  const std::size_t t = tokens.size(), d = c.d_model, hd = c.head_dim();
  using Mat = std::vector<std::vector<double>>;
  auto ln = [&](const Mat& x, const Tensor<double>& g, const Tensor<double>& b) {
    Mat y = x;
    for (auto& row : y) {
      double mean = 0, var = 0;
      for (double v : row) mean += v;
      mean /= double(d);
      for (double v : row) var += (v - mean) * (v - mean);
      var /= double(d);
      for (std::size_t i = 0; i < d; ++i) row[i] = (row[i] - mean) / std::sqrt(var + 1e-5) * g[i] + b[i];
    }
    return y;
  };
  auto proj = [](const Mat& x, const Tensor<double>& w) {
    const std::size_t out = w.shape()[0], in = w.shape()[1];
    Mat y(x.size(), std::vector<double>(out, 0.0));
    for (std::size_t r = 0; r < x.size(); ++r)
      for (std::size_t o = 0; o < out; ++o)
        for (std::size_t i = 0; i < in; ++i) y[r][o] += w.at(o, i) * x[r][i];
    return y;
  };
  Mat x(t, std::vector<double>(d));
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const auto id = static_cast<std::size_t>(tokens[i]);
      const double e = id < c.base_vocab() ? m.base_embed.at(id, j) : m.mask_embed.at(id - c.base_vocab(), j);
      x[i][j] = e + m.positions.at(i, j);
    }
  }
  for (const auto& b : m.layers) {
    Mat h = ln(x, b.ln1_gain, b.ln1_bias);
    Mat q = proj(h, b.query.weight), k = proj(h, b.key.weight), v = proj(h, b.value.weight);
    Mat a(t, std::vector<double>(d, 0.0));
    for (std::size_t hh = 0; hh < c.n_heads; ++hh) {
      for (std::size_t i = 0; i < t; ++i) {
        std::vector<double> s(i + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          double acc = 0;
          for (std::size_t cc = 0; cc < hd; ++cc) acc += q[i][hh * hd + cc] * k[j][hh * hd + cc];
          s[j] = acc / std::sqrt(double(hd));
          mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j <= i; ++j)
          for (std::size_t cc = 0; cc < hd; ++cc) a[i][hh * hd + cc] += s[j] / z * v[j][hh * hd + cc];
      }
    }
    Mat o = proj(a, b.attn_out.weight);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < d; ++j) x[i][j] += o[i][j];
    h = ln(x, b.ln2_gain, b.ln2_bias);
    Mat f = proj(h, b.ff_in.weight);
    for (auto& row : f)
      for (auto& v2 : row) v2 = v2 / (1.0 + std::exp(-v2));
    Mat f2 = proj(f, b.ff_out.weight);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < d; ++j) x[i][j] += f2[i][j];
  }
  Mat z = proj(ln(x, m.final_gain, m.final_bias), m.unembed);
  std::vector<double> out;
  for (auto& row : z) out.insert(out.end(), row.begin(), row.end());
  return out;
}

TEST(ModelConfig, ValidatesShapes) {
  auto c = tiny_config();
  EXPECT_NO_THROW(c.validate());
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.vocab_size = c.k_masks;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfig, MaskIdsSitAtTheTopOfTheVocabulary) {
  auto c = tiny_config(11, 3);
  EXPECT_EQ(c.mask_id(1), 11);
  EXPECT_EQ(c.mask_id(3), 13);
  EXPECT_TRUE(c.is_mask(12));
  EXPECT_FALSE(c.is_mask(10));
}

TEST(ModelConfig, KeyValueRoundTripAndDiff) {
  auto c = tiny_config();
  c.gated_lora = false;
  EXPECT_EQ(ModelConfig::from_key_values(c.to_key_values()), c);
  auto other = c;
  other.lora_rank = 9;
  auto diff = diff_key_values(c.to_key_values(), other.to_key_values());
  ASSERT_EQ(diff.size(), 1u);
  EXPECT_NE(diff[0].find("model.lora_rank"), std::string::npos);
}

TEST(InitModel, SameSeedIsBitwiseEqual) {
  auto a = init_model<float>(tiny_config(), 3);
  auto b = init_model<float>(tiny_config(), 3);
  auto pa = a.named_parameters(), pb = b.named_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    auto da = pa[i].second.data(), db = pb[i].second.data();
    EXPECT_TRUE(std::equal(da.begin(), da.end(), db.begin(), db.end())) << pa[i].first;
  }
}

TEST(InitModel, AdapterBStartsAtZero) {
  auto m = init_model<float>(tiny_config(), 3);
  for (auto& [name, t] : m.named_parameters()) {
    if (name.back() != 'B' || !ModelBundle<float>::is_lora_name(name)) continue;
    for (float v : t.data()) EXPECT_EQ(v, 0.0f) << name;
  }
}

TEST(InitModel, RankZeroHasNoAdapters) {
  auto c = tiny_config(11, 3, 0);
  auto m = init_model<float>(c, 3);
  for (auto& [name, t] : m.named_parameters()) EXPECT_FALSE(ModelBundle<float>::is_lora_name(name)) << name;
  const auto tokens = testing::random_tokens(6, c.vocab_size, 4);
  std::vector<std::size_t> pos = {0, 1, 2, 3, 4, 5};
  Tape<float> off(false);
  auto closed = forward(off, m, tokens, pos, AttentionMask::causal(6), std::vector<std::uint8_t>(6, 0));
  auto open = forward(off, m, tokens, pos, AttentionMask::causal(6), std::vector<std::uint8_t>(6, 1));
  for (std::size_t i = 0; i < closed.logits.size(); ++i) EXPECT_EQ(closed.logits[i], open.logits[i]);
}

TEST(Forward, SingleTokenGivesOneDistribution) {
  auto c = tiny_config();
  auto m = init_model<double>(c, 8);
  Tape<double> off(false);
  const std::vector<TokenId> tok = {4};
  auto fwd = forward_causal(off, m, tok);
  ASSERT_EQ(fwd.logits.shape(), (Shape{1, c.vocab_size}));
  auto p = ops::softmax_rows(off, fwd.logits);
  double s = 0;
  for (double v : p.data()) s += v;
  EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(Forward, MatchesReferenceCausalTransformer) {
  auto c = tiny_config();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto m = init_model<double>(c, seed);
    testing::randomize_lora(m, seed + 100);  // gate 0 must ignore these
    const auto tokens = testing::random_tokens(3 + seed * 3, c.base_vocab(), seed);
    Tape<double> off(false);
    auto fwd = forward_causal(off, m, tokens);
    const auto ref = reference_logits(m, tokens);
    EXPECT_LT(testing::max_abs_diff<double>(fwd.logits.data(), ref), 1e-6) << "seed " << seed;
  }
}

TEST(Forward, FreshModelLogitsDoNotDependOnGate) {
  auto c = tiny_config();
  auto m = init_model<float>(c, 9);
  const auto tokens = testing::random_tokens(7, c.vocab_size, 10);
  std::vector<std::size_t> pos(7);
  for (std::size_t i = 0; i < 7; ++i) pos[i] = i;
  Tape<float> off(false);
  auto base = forward(off, m, tokens, pos, AttentionMask::causal(7), std::vector<std::uint8_t>(7, 0));
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<std::uint8_t> gate(7);
    for (auto& g : gate) g = static_cast<std::uint8_t>(rng.integer(0, 1));
    auto out = forward(off, m, tokens, pos, AttentionMask::causal(7), gate);
    for (std::size_t i = 0; i < out.logits.size(); ++i) ASSERT_EQ(out.logits[i], base.logits[i]);
  }
}

TEST(Forward, ClosedRowsIgnoreAdapterWeights) {
  auto c = tiny_config();
  auto zero = init_model<float>(c, 12);
  auto live = zero.clone();
  testing::randomize_lora(live, 13);
  const auto tokens = testing::random_tokens(6, c.vocab_size, 14);
  const std::vector<std::size_t> pos = {0, 1, 2, 3, 4, 5};
  const std::vector<std::uint8_t> gate = {0, 0, 1, 0, 1, 1};
  // Closed rows attend only to closed rows here.
  AttentionMask mask = AttentionMask::causal(6);
  mask.allow(3, 2, false);
  Tape<float> off(false);
  auto a = forward(off, zero, tokens, pos, mask, gate);
  auto b = forward(off, live, tokens, pos, mask, gate);
  for (std::size_t r : {0u, 1u, 3u})
    for (std::size_t v = 0; v < c.vocab_size; ++v) EXPECT_EQ(a.logits.at(r, v), b.logits.at(r, v));
  double diff = 0;
  for (std::size_t v = 0; v < c.vocab_size; ++v) diff += std::abs(a.logits.at(4, v) - b.logits.at(4, v));
  EXPECT_GT(diff, 0.0);
}

TEST(Forward, PlainLoraAblationOpensEveryRow) {
  auto c = tiny_config();
  c.gated_lora = false;
  auto m = init_model<float>(c, 15);
  testing::randomize_lora(m, 16);
  auto gated = m.clone();
  gated.config.gated_lora = true;
  const auto tokens = testing::random_tokens(5, c.base_vocab(), 17);
  Tape<float> off(false);
  auto plain = forward_causal(off, m, tokens);
  auto closed = forward_causal(off, gated, tokens);
  double diff = 0;
  for (std::size_t i = 0; i < plain.logits.size(); ++i) diff += std::abs(plain.logits[i] - closed.logits[i]);
  EXPECT_GT(diff, 0.0);
}

TEST(Forward, RejectsBadInputs) {
  auto c = tiny_config();
  auto m = init_model<float>(c, 18);
  Tape<float> off(false);
  const std::vector<TokenId> tok = {1, 2};
  const std::vector<std::size_t> pos = {0, 1};
  EXPECT_THROW(forward(off, m, tok, pos, AttentionMask::causal(3), std::vector<std::uint8_t>(2, 0)), ShapeError);
  AttentionMask future = AttentionMask::causal(2);
  future.allow(0, 1);
  EXPECT_THROW(forward(off, m, tok, pos, future, std::vector<std::uint8_t>(2, 0)), ShapeError);
  const std::vector<std::size_t> far = {0, c.max_position};
  EXPECT_THROW(forward(off, m, tok, far, AttentionMask::causal(2), std::vector<std::uint8_t>(2, 0)), ShapeError);
}

TEST(Phases, TrainableSetsFollowThePhase) {
  auto m = init_model<float>(tiny_config(), 19);
  m.set_phase(TrainPhase::kMtpFinetune);
  for (auto& [name, t] : m.named_parameters()) {
    const bool expect = ModelBundle<float>::is_lora_name(name) || name == "embed.mask";
    EXPECT_EQ(t.requires_grad(), expect) << name;
  }
  m.set_phase(TrainPhase::kBasePretrain);
  for (auto& [name, t] : m.named_parameters()) {
    const bool expect = !ModelBundle<float>::is_lora_name(name) && name != "embed.mask";
    EXPECT_EQ(t.requires_grad(), expect) << name;
  }
  m.set_phase(TrainPhase::kFrozen);
  for (auto& [name, t] : m.named_parameters()) EXPECT_FALSE(t.requires_grad()) << name;
}

TEST(Phases, OneBackwardTouchesExactlyTheTrainableSet) {
  auto c = tiny_config();
  auto m = init_model<double>(c, 20);
  testing::randomize_lora(m, 21);
  m.set_phase(TrainPhase::kMtpFinetune);
  const auto tokens = testing::random_tokens(6, c.base_vocab(), 22);
  const std::vector<std::uint8_t> flags(6, 1);
  auto batch = build_training_batch(tokens, flags, c);
  Tape<double> tape;
  auto fwd = forward(tape, m, batch.tokens, batch.position_ids, batch.attention, batch.gate);
  tape.backward(ops::cross_entropy(tape, fwd.logits, batch.base_labels, kIgnore));
  for (auto& [name, t] : m.named_parameters()) {
    const bool trainable = ModelBundle<double>::is_lora_name(name) || name == "embed.mask";
    EXPECT_EQ(t.has_grad(), trainable) << name;
  }
}

TEST(Cast, RoundTripThroughDoublePreservesFloats) {
  auto m = init_model<float>(tiny_config(), 23);
  auto back = m.cast<double>().cast<float>();
  auto pa = m.named_parameters(), pb = back.named_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    auto da = pa[i].second.data(), db = pb[i].second.data();
    EXPECT_TRUE(std::equal(da.begin(), da.end(), db.begin(), db.end()));
  }
}

}  // namespace
}  // namespace mtp
