#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "mtp/losses.hpp"
#include "test_util.hpp"

namespace mtp {
namespace {

using testing::tiny_config;

struct Fixture {
  ModelConfig cfg = tiny_config(11, 3);
  ModelBundle<double> model = init_model<double>(cfg, 1);
  SamplerHead<double> head = init_sampler<double>(cfg.d_model, 2);
  MaskedBatch batch;

  explicit Fixture(std::size_t n = 9) {
    testing::randomize_lora(model, 3);
    auto seq = testing::random_tokens(n, cfg.base_vocab(), 4);
    std::vector<std::uint8_t> flags(n, 1);
    flags[1] = 0;
    batch = build_training_batch(seq, flags, cfg);
  }
};

double row_nll(const Tensor<double>& logits, std::size_t r, TokenId label) {
  double mx = -1e300, z = 0;
  for (std::size_t v = 0; v < logits.cols(); ++v) mx = std::max(mx, logits.at(r, v));
  for (std::size_t v = 0; v < logits.cols(); ++v) z += std::exp(logits.at(r, v) - mx);
  return mx + std::log(z) - logits.at(r, std::size_t(label));
}

TEST(Losses, AllIgnoredLabelsGiveZeroAndNoGradient) {
  Fixture f;
  f.model.set_phase(TrainPhase::kMtpFinetune);
  f.head.set_trainable(true);
  std::fill(f.batch.base_labels.begin(), f.batch.base_labels.end(), kIgnore);
  Tape<double> tape;
  auto fwd = forward(tape, f.model, f.batch.tokens, f.batch.position_ids, f.batch.attention, f.batch.gate);
  auto terms = base_and_sampler_ce(tape, f.batch, f.model, fwd, &f.head);
  EXPECT_EQ(terms.base_ce.item(), 0.0);
  EXPECT_EQ(terms.sampler_ce.item(), 0.0);
  tape.backward(ops::add(tape, terms.base_ce, terms.sampler_ce));
  for (auto& t : f.model.lora_parameters()) EXPECT_FALSE(t.has_grad());
  for (auto& t : f.head.parameters()) EXPECT_FALSE(t.has_grad());
}

TEST(Losses, UniformLogitsGiveLogV) {
  Fixture f;
  MaskedBatch b;
  b.base_labels = {1, 3};
  b.prev_token = {kIgnore, kIgnore};
  b.gate = {0, 1};
  ForwardResult<double> fwd;
  fwd.logits = Tensor<double>::zeros({2, 4});
  fwd.hidden = Tensor<double>::zeros({2, f.cfg.d_model});
  Tape<double> off(false);
  auto terms = base_and_sampler_ce(off, b, f.model, fwd, static_cast<const SamplerHead<double>*>(nullptr));
  EXPECT_NEAR(terms.base_ce.item(), std::log(4.0), 1e-12);
}

TEST(Losses, MatchPerRowLoop) {
  Fixture f;
  Tape<double> off(false);
  auto fwd = forward(off, f.model, f.batch.tokens, f.batch.position_ids, f.batch.attention, f.batch.gate);
  auto terms = base_and_sampler_ce(off, f.batch, f.model, fwd, &f.head);
  double base = 0, samp = 0;
  std::size_t nb = 0, ns = 0;
  for (std::size_t t = 0; t < f.batch.size(); ++t) {
    const TokenId y = f.batch.base_labels[t];
    if (y == kIgnore) continue;
    base += row_nll(fwd.logits, t, y);
    ++nb;
    if (f.batch.prev_token[t] == kIgnore) continue;
    const auto s = sampler_logits(f.head, f.model, f.batch.prev_token[t],
                                  std::span<const double>(fwd.hidden.row(t), f.cfg.d_model));
    Tensor<double> row({1, s.size()}, s);
    samp += row_nll(row, 0, y);
    ++ns;
  }
  ASSERT_GT(nb, 0u);
  EXPECT_NEAR(terms.base_ce.item(), base / double(nb), 1e-8);
  EXPECT_NEAR(terms.sampler_ce.item(), samp / double(ns), 1e-8);
}

TEST(Lcm, ZeroWhenMtpHiddensCopyTheirAnchors) {
  Fixture f;
  Tape<double> off(false);
  auto fwd = forward(off, f.model, f.batch.tokens, f.batch.position_ids, f.batch.attention, f.batch.gate);
  ASSERT_FALSE(f.batch.lcm_pairs.empty());
  auto h = fwd.hidden.clone();
  const std::size_t d = h.cols();
  for (const auto& p : f.batch.lcm_pairs) {
    std::copy_n(h.row(p.anchor_row), d, h.mutable_row(p.mtp_row));
  }
  EXPECT_EQ(lcm_loss(off, h, f.batch.lcm_pairs).item(), 0.0);
}

TEST(Lcm, SinglePairHandValue) {
  Tape<double> off(false);
  Tensor<double> h({2, 2}, {1, 0, 0, 0});
  const std::vector<LcmPair> pairs = {{1, 0}};
  EXPECT_DOUBLE_EQ(lcm_loss(off, h, pairs, true).item(), 0.5);
  EXPECT_DOUBLE_EQ(lcm_loss(off, h, pairs, false).item(), 1.0);
}

TEST(Lcm, AveragesWithinAnchorThenAcrossAnchors) {
  Tape<double> off(false);
  // Anchor 0 has two partners at squared distance 1 and 9; anchor 3 one at 4.
  Tensor<double> h({5, 1}, {0, 1, 3, 0, 2});
  const std::vector<LcmPair> pairs = {{1, 0}, {2, 0}, {4, 3}};
  EXPECT_DOUBLE_EQ(lcm_loss(off, h, pairs).item(), (5.0 + 4.0) / 2.0);
}

TEST(Lcm, AnchorSideReceivesNoGradient) {
  Tape<double> tape;
  auto h = testing::random_tensor<double>({4, 3}, 5, 1.0, true);
  const std::vector<LcmPair> pairs = {{1, 0}, {3, 2}};
  tape.backward(lcm_loss(tape, h, pairs));
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(h.grad()[0 * 3 + c], 0.0);
    EXPECT_EQ(h.grad()[2 * 3 + c], 0.0);
    EXPECT_NE(h.grad()[1 * 3 + c], 0.0);
  }
  // Holding anchors fixed, the mtp side matches central differences.
  std::function<double()> value = [&] {
    Tape<double> off(false);
    return lcm_loss(off, h, pairs).item();
  };
  std::vector<double> g(h.grad().begin(), h.grad().end());
  for (std::size_t c = 0; c < 3; ++c) g[0 * 3 + c] = g[2 * 3 + c] = 0;
  // Anchor coordinates would show a nonzero finite difference, so only mtp
  // rows are compared.
  double worst = 0;
  for (std::size_t i : {3u, 4u, 5u, 9u, 10u, 11u}) {
    auto data = h.mutable_data();
    const double saved = data[i];
    data[i] = saved + 1e-6;
    const double up = value();
    data[i] = saved - 1e-6;
    const double down = value();
    data[i] = saved;
    worst = std::max(worst, relative_error(g[i], (up - down) / 2e-6, 1e-8));
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Lcm, AnchorsAreUntouchedByTrainableParameters) {
  Fixture f;
  f.model.set_phase(TrainPhase::kMtpFinetune);
  Tape<double> off(false);
  auto before = forward(off, f.model, f.batch.tokens, f.batch.position_ids, f.batch.attention, f.batch.gate);
  for (auto& t : f.model.lora_parameters()) {
    for (auto& v : t.mutable_data()) v += 0.05;
  }
  for (auto& v : f.model.mask_embed.mutable_data()) v += 0.05;
  auto after = forward(off, f.model, f.batch.tokens, f.batch.position_ids, f.batch.attention, f.batch.gate);
  for (const auto& p : f.batch.lcm_pairs) {
    for (std::size_t c = 0; c < f.cfg.d_model; ++c) {
      ASSERT_EQ(before.hidden.at(p.anchor_row, c), after.hidden.at(p.anchor_row, c));
    }
  }
}

TEST(TotalLoss, WeightCombinations) {
  Tape<double> off(false);
  auto b = Tensor<double>::scalar(1.25), s = Tensor<double>::scalar(0.5), l = Tensor<double>::scalar(0.125);
  EXPECT_EQ(total_loss(off, b, s, l, LossWeights{1, 0, 0, true}).item(), 1.25);
  EXPECT_EQ(total_loss(off, b, s, l, LossWeights{0, 0, 0, true}).item(), 0.0);
  EXPECT_NEAR(total_loss(off, b, s, l, LossWeights{}).item(), 1.875, 1e-12);
  EXPECT_THROW(total_loss(off, b, s, l, LossWeights{-1, 0, 0, true}), std::invalid_argument);
}

TEST(ComputeLosses, ReportIsConsistent) {
  Fixture f;
  Tape<double> off(false);
  auto fwd = forward(off, f.model, f.batch.tokens, f.batch.position_ids, f.batch.attention, f.batch.gate);
  auto out = compute_losses(off, f.batch, f.model, fwd, &f.head, LossWeights{});
  const auto& r = out.report;
  EXPECT_NEAR(r.total, r.base_ce + r.sampler_ce + r.lcm, 1e-12);
  EXPECT_GT(r.ntp_rows, 0u);
  EXPECT_GT(r.mtp_rows, 0u);
  EXPECT_GT(r.lcm_anchors, 0u);
  EXPECT_NEAR(r.ntp_only_ce, ntp_only_ce(f.batch, fwd.logits), 0.0);
}

TEST(ComputeLosses, FullObjectiveGradientMatchesFiniteDifferences) {
  Fixture f(7);
  f.model.set_phase(TrainPhase::kMtpFinetune);
  f.head.set_trainable(true);
  std::vector<Tensor<double>> params;
  for (auto& [name, t] : f.model.named_parameters())
    if (t.requires_grad()) params.push_back(t);
  for (auto& t : f.head.parameters()) params.push_back(t);
  GradCheckOptions opt;
  opt.sample_coords = 6;
  auto r = finite_diff_check<double>(
      [&](Tape<double>& tape) {
        auto fwd = forward(tape, f.model, f.batch.tokens, f.batch.position_ids, f.batch.attention, f.batch.gate);
        return compute_losses(tape, f.batch, f.model, fwd, &f.head, LossWeights{}).total;
      },
      params, opt);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

}  // namespace
}  // namespace mtp
