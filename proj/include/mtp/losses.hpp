#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <vector>

#include "mtp/batching.hpp"
#include "mtp/model/model.hpp"
#include "mtp/numerics/ops.hpp"
#include "mtp/sampler.hpp"

namespace mtp {

struct LossWeights {
  double base = 1.0;
  double sampler = 1.0;
  double lcm = 1.0;
  // Average (z_t - z)^2 over hidden dimensions as well as over S(z_t).
  bool lcm_mean_over_dims = true;
};

struct LossReport {
  double base_ce = 0.0;
  double sampler_ce = 0.0;
  double lcm = 0.0;
  double total = 0.0;
  double ntp_only_ce = 0.0;
  std::size_t ntp_rows = 0;  // labelled gate-0 rows
  std::size_t mtp_rows = 0;  // labelled gate-1 rows
  std::size_t lcm_anchors = 0;
};

template <class Real>
struct LossTerms {
  Tensor<Real> base_ce;
  Tensor<Real> sampler_ce;
};

// Mean base and sampler cross-entropy over every labelled row, NTP and MTP
// alike. The sampler conditions row t on batch.prev_token[t].
template <class Real>
LossTerms<Real> base_and_sampler_ce(Tape<Real>& tape, const MaskedBatch& batch,
                                    const ModelBundle<Real>& model,
                                    const ForwardResult<Real>& fwd,
                                    const SamplerHead<Real>* head) {
  LossTerms<Real> out;
  out.base_ce = ops::cross_entropy(tape, fwd.logits, batch.base_labels, kIgnore);
  if (head == nullptr) {
    out.sampler_ce = Tensor<Real>::scalar(Real(0));
    return out;
  }
  std::vector<std::size_t> rows;
  std::vector<TokenId> prev, labels;
  for (std::size_t t = 0; t < batch.size(); ++t) {
    if (batch.base_labels[t] == kIgnore || batch.prev_token[t] == kIgnore) continue;
    rows.push_back(t);
    prev.push_back(batch.prev_token[t]);
    labels.push_back(batch.base_labels[t]);
  }
  if (rows.empty()) {
    out.sampler_ce = Tensor<Real>::scalar(Real(0));
    return out;
  }
  Tensor<Real> z = ops::gather_rows(tape, fwd.hidden, rows);
  Tensor<Real> logits = sampler_forward(tape, *head, model, prev, z);
  out.sampler_ce = ops::cross_entropy(tape, logits, labels, kIgnore);
  return out;
}

// Latent consistency: for each NTP anchor t with a nonempty S(z_t), the mean
// over its paired MTP rows of (z_t - z)^2, then averaged over anchors. The
// anchor side is treated as a constant.
template <class Real>
Tensor<Real> lcm_loss(Tape<Real>& tape, const Tensor<Real>& hidden,
                      std::span<const LcmPair> pairs, bool mean_over_dims = true) {
  const std::size_t d = hidden.cols(), t = hidden.rows();
  std::map<std::size_t, std::vector<std::size_t>> groups;  // anchor -> mtp rows
  for (const auto& p : pairs) {
    if (p.mtp_row >= t || p.anchor_row >= t) {
      throw ShapeError("lcm pair references a row outside the batch");
    }
    groups[p.anchor_row].push_back(p.mtp_row);
  }
  const Real dim_norm = mean_over_dims ? Real(d) : Real(1);
  Real total = 0;
  for (const auto& [anchor, rows] : groups) {
    Real acc = 0;
    for (std::size_t m : rows) {
      for (std::size_t c = 0; c < d; ++c) {
        const Real diff = hidden.at(anchor, c) - hidden.at(m, c);
        acc += diff * diff;
      }
    }
    total += acc / (dim_norm * Real(rows.size()));
  }
  const Real n_anchors = Real(groups.size());
  Tensor<Real> y = Tensor<Real>::scalar(groups.empty() ? Real(0) : total / n_anchors);
  if (!groups.empty() && tape.should_record({&hidden})) {
    y.set_requires_grad(true);
    tape.record(y, [hidden, y, d, dim_norm, n_anchors,
                    groups = std::move(groups)]() mutable {
      const Real g = y.grad()[0];
      auto dh = hidden.grad_buffer();
      for (const auto& [anchor, rows] : groups) {
        const Real k = g * Real(2) / (n_anchors * dim_norm * Real(rows.size()));
        for (std::size_t m : rows) {
          for (std::size_t c = 0; c < d; ++c) {
            dh[m * d + c] += k * (hidden.at(m, c) - hidden.at(anchor, c));
          }
        }
      }
    });
  }
  return y;
}

template <class Real>
Tensor<Real> total_loss(Tape<Real>& tape, const Tensor<Real>& base_ce,
                        const Tensor<Real>& sampler_ce, const Tensor<Real>& lcm,
                        const LossWeights& w) {
  if (w.base < 0 || w.sampler < 0 || w.lcm < 0) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
  return ops::weighted_sum(tape, {base_ce, sampler_ce, lcm},
                           {Real(w.base), Real(w.sampler), Real(w.lcm)});
}

// Base cross-entropy restricted to labelled gate-0 rows.
template <class Real>
double ntp_only_ce(const MaskedBatch& batch, const Tensor<Real>& logits) {
  std::vector<TokenId> labels(batch.base_labels);
  for (std::size_t t = 0; t < labels.size(); ++t) {
    if (batch.gate[t] != 0) labels[t] = kIgnore;
  }
  Tape<Real> off(false);
  return static_cast<double>(ops::cross_entropy(off, logits, labels, kIgnore).item());
}

template <class Real>
struct BatchLoss {
  Tensor<Real> total;
  LossReport report;
};

// Full objective for one masked sequence. The sampler and LCM terms are
// skipped entirely when their weight is zero (or no head is given).
template <class Real>
BatchLoss<Real> compute_losses(Tape<Real>& tape, const MaskedBatch& batch,
                               const ModelBundle<Real>& model,
                               const ForwardResult<Real>& fwd,
                               const SamplerHead<Real>* head, const LossWeights& w) {
  const SamplerHead<Real>* used_head = w.sampler > 0 ? head : nullptr;
  LossTerms<Real> ce = base_and_sampler_ce(tape, batch, model, fwd, used_head);
  Tensor<Real> lcm = w.lcm > 0
                         ? lcm_loss(tape, fwd.hidden, batch.lcm_pairs, w.lcm_mean_over_dims)
                         : Tensor<Real>::scalar(Real(0));
  BatchLoss<Real> out;
  out.total = total_loss(tape, ce.base_ce, ce.sampler_ce, lcm, w);
  auto& r = out.report;
  r.base_ce = ce.base_ce.item();
  r.sampler_ce = ce.sampler_ce.item();
  r.lcm = lcm.item();
  r.total = out.total.item();
  r.ntp_only_ce = ntp_only_ce(batch, fwd.logits);
  std::map<std::size_t, int> anchors;
  for (const auto& p : batch.lcm_pairs) anchors[p.anchor_row] = 1;
  r.lcm_anchors = anchors.size();
  for (std::size_t t = 0; t < batch.size(); ++t) {
    if (batch.base_labels[t] == kIgnore) continue;
    (batch.gate[t] ? r.mtp_rows : r.ntp_rows) += 1;
  }
  return out;
}

}  // namespace mtp
