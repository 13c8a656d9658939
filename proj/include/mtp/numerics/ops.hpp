#pragma once

// Differentiable operations. Every op takes the tape it records onto; when no
// input requires a gradient (or the tape is disabled) nothing is recorded.
//
// Kernels are row-independent: an output row depends only on the matching
// input row and the weights, never on how many other rows are in the batch.
// The bitwise equivalence checks between masked and plain layouts rely on it.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mtp/numerics/attention_mask.hpp"
#include "mtp/numerics/tensor.hpp"

namespace mtp::ops {

using TokenId = std::int32_t;

template <class Real>
inline Real dot(const Real* a, const Real* b, std::size_t n) {
  Real s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

template <class Real>
inline void axpy(Real alpha, const Real* x, Real* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

template <class Real>
void require_matrix(const Tensor<Real>& t, const char* name) {
  require(t.defined() && t.rank() == 2,
          std::string(name) + " must be a 2-d tensor");
}

}  // namespace detail

// a[m x p] . b[p x n]
template <class Real>
Tensor<Real> matmul(Tape<Real>& tape, const Tensor<Real>& a,
                    const Tensor<Real>& b) {
  detail::require_matrix(a, "matmul lhs");
  detail::require_matrix(b, "matmul rhs");
  const std::size_t m = a.shape()[0], p = a.shape()[1], n = b.shape()[1];
  detail::require(b.shape()[0] == p, "matmul inner dimension mismatch: " +
                                         shape_string(a.shape()) + " . " +
                                         shape_string(b.shape()));
  Tensor<Real> y = Tensor<Real>::zeros({m, n});
  auto yd = y.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < p; ++k) {
      axpy(a.at(i, k), b.row(k), yd.data() + i * n, n);
    }
  }
  check_finite(y, "matmul");
  if (tape.should_record({&a, &b})) {
    y.set_requires_grad(true);
    tape.record(y, [a, b, y, m, p, n]() mutable {
      auto dy = y.grad();
      if (a.requires_grad()) {
        auto da = a.grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t k = 0; k < p; ++k) {
            da[i * p + k] += dot(dy.data() + i * n, b.row(k), n);
          }
        }
      }
      if (b.requires_grad()) {
        auto db = b.grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t k = 0; k < p; ++k) {
            axpy(a.at(i, k), dy.data() + i * n, db.data() + k * n, n);
          }
        }
      }
    });
  }
  return y;
}

// x[T x in] . W^T with W stored [out x in].
template <class Real>
Tensor<Real> linear(Tape<Real>& tape, const Tensor<Real>& x,
                    const Tensor<Real>& w) {
  detail::require_matrix(x, "linear input");
  detail::require_matrix(w, "linear weight");
  const std::size_t t = x.shape()[0], in = x.shape()[1], out = w.shape()[0];
  detail::require(w.shape()[1] == in, "linear shape mismatch: " +
                                          shape_string(x.shape()) + " vs W " +
                                          shape_string(w.shape()));
  Tensor<Real> y = Tensor<Real>::zeros({t, out});
  auto yd = y.mutable_data();
  for (std::size_t r = 0; r < t; ++r) {
    for (std::size_t o = 0; o < out; ++o) {
      yd[r * out + o] = dot(x.row(r), w.row(o), in);
    }
  }
  check_finite(y, "linear");
  if (tape.should_record({&x, &w})) {
    y.set_requires_grad(true);
    tape.record(y, [x, w, y, t, in, out]() mutable {
      auto dy = y.grad();
      if (x.requires_grad()) {
        auto dx = x.grad_buffer();
        for (std::size_t r = 0; r < t; ++r) {
          for (std::size_t o = 0; o < out; ++o) {
            axpy(dy[r * out + o], w.row(o), dx.data() + r * in, in);
          }
        }
      }
      if (w.requires_grad()) {
        auto dw = w.grad_buffer();
        for (std::size_t r = 0; r < t; ++r) {
          for (std::size_t o = 0; o < out; ++o) {
            axpy(dy[r * out + o], x.row(r), dw.data() + o * in, in);
          }
        }
      }
    });
  }
  return y;
}

// Row t: W.x_t, plus scale * (x_t A) B when gate[t] is set. A is [in x r],
// B is [r x out]; both may be undefined for a rank-0 layer. Rows with a zero
// gate never touch A or B.
template <class Real>
Tensor<Real> gated_lora_linear(Tape<Real>& tape, const Tensor<Real>& x,
                               const Tensor<Real>& w, const Tensor<Real>& a,
                               const Tensor<Real>& b,
                               std::span<const std::uint8_t> gate, Real scale) {
  detail::require_matrix(x, "gated_lora input");
  const std::size_t t = x.shape()[0], in = x.shape()[1], out = w.shape()[0];
  detail::require(gate.size() == t, "gate length " +
                                        std::to_string(gate.size()) +
                                        " does not match rows " +
                                        std::to_string(t));
  for (auto g : gate) detail::require(g <= 1, "gate entries must be 0 or 1");
  detail::require(w.shape()[1] == in, "gated_lora weight shape mismatch");
  const bool has_lora = a.defined() && b.defined() && a.shape()[1] > 0;
  const std::size_t r = has_lora ? a.shape()[1] : 0;
  if (has_lora) {
    detail::require(a.shape()[0] == in && b.shape()[0] == r &&
                        b.shape()[1] == out,
                    "LoRA factor shapes do not match layer");
  }

  Tensor<Real> y = Tensor<Real>::zeros({t, out});
  auto yd = y.mutable_data();
  std::vector<Real> xa(t * r, Real(0));
  for (std::size_t row = 0; row < t; ++row) {
    Real* yr = yd.data() + row * out;
    for (std::size_t o = 0; o < out; ++o) yr[o] = dot(x.row(row), w.row(o), in);
    if (!has_lora || gate[row] == 0) continue;
    Real* xar = xa.data() + row * r;
    for (std::size_t i = 0; i < in; ++i) axpy(x.at(row, i), a.row(i), xar, r);
    std::vector<Real> delta(out, Real(0));
    for (std::size_t j = 0; j < r; ++j) axpy(xar[j], b.row(j), delta.data(), out);
    for (std::size_t o = 0; o < out; ++o) yr[o] += scale * delta[o];
  }
  check_finite(y, "gated_lora_linear");

  const bool record = has_lora ? tape.should_record({&x, &w, &a, &b})
                               : tape.should_record({&x, &w});
  if (record) {
    y.set_requires_grad(true);
    std::vector<std::uint8_t> gate_copy(gate.begin(), gate.end());
    tape.record(y, [x, w, a, b, y, t, in, out, r, has_lora, scale,
                    gate_copy = std::move(gate_copy),
                    xa = std::move(xa)]() mutable {
      auto dy = y.grad();
      if (x.requires_grad()) {
        auto dx = x.grad_buffer();
        for (std::size_t row = 0; row < t; ++row) {
          for (std::size_t o = 0; o < out; ++o) {
            axpy(dy[row * out + o], w.row(o), dx.data() + row * in, in);
          }
        }
      }
      if (w.requires_grad()) {
        auto dw = w.grad_buffer();
        for (std::size_t row = 0; row < t; ++row) {
          for (std::size_t o = 0; o < out; ++o) {
            axpy(dy[row * out + o], x.row(row), dw.data() + o * in, in);
          }
        }
      }
      if (!has_lora) return;
      std::vector<Real> dxa(r);
      for (std::size_t row = 0; row < t; ++row) {
        if (gate_copy[row] == 0) continue;
        const Real* dyr = dy.data() + row * out;
        for (std::size_t j = 0; j < r; ++j) dxa[j] = scale * dot(dyr, b.row(j), out);
        if (b.requires_grad()) {
          auto db = b.grad_buffer();
          for (std::size_t j = 0; j < r; ++j) {
            axpy(scale * xa[row * r + j], dyr, db.data() + j * out, out);
          }
        }
        if (a.requires_grad()) {
          auto da = a.grad_buffer();
          for (std::size_t i = 0; i < in; ++i) {
            axpy(x.at(row, i), dxa.data(), da.data() + i * r, r);
          }
        }
        if (x.requires_grad()) {
          auto dx = x.grad_buffer();
          for (std::size_t i = 0; i < in; ++i) {
            dx[row * in + i] += dot(a.row(i), dxa.data(), r);
          }
        }
      }
    });
  }
  return y;
}

template <class Real>
Tensor<Real> add(Tape<Real>& tape, const Tensor<Real>& a,
                 const Tensor<Real>& b) {
  detail::require(a.shape() == b.shape(), "add shape mismatch: " +
                                              shape_string(a.shape()) + " vs " +
                                              shape_string(b.shape()));
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Tensor<Real> y(a.shape(), std::move(out));
  check_finite(y, "add");
  if (tape.should_record({&a, &b})) {
    y.set_requires_grad(true);
    tape.record(y, [a, b, y]() mutable {
      auto dy = y.grad();
      if (a.requires_grad()) {
        auto da = a.grad_buffer();
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
      }
      if (b.requires_grad()) {
        auto db = b.grad_buffer();
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
      }
    });
  }
  return y;
}

// x[T x n] + bias[n] broadcast over rows.
template <class Real>
Tensor<Real> add_row_bias(Tape<Real>& tape, const Tensor<Real>& x,
                          const Tensor<Real>& bias) {
  const std::size_t n = x.cols(), t = x.size() / n;
  detail::require(bias.size() == n, "row bias length mismatch");
  std::vector<Real> out(x.size());
  for (std::size_t r = 0; r < t; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = x[r * n + c] + bias[c];
  }
  Tensor<Real> y(x.shape(), std::move(out));
  check_finite(y, "add_row_bias");
  if (tape.should_record({&x, &bias})) {
    y.set_requires_grad(true);
    tape.record(y, [x, bias, y, n, t]() mutable {
      auto dy = y.grad();
      if (x.requires_grad()) {
        auto dx = x.grad_buffer();
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
      }
      if (bias.requires_grad()) {
        auto db = bias.grad_buffer();
        for (std::size_t r = 0; r < t; ++r) axpy(Real(1), dy.data() + r * n, db.data(), n);
      }
    });
  }
  return y;
}

template <class Real>
Tensor<Real> scale(Tape<Real>& tape, const Tensor<Real>& x, Real c) {
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x[i];
  Tensor<Real> y(x.shape(), std::move(out));
  check_finite(y, "scale");
  if (tape.should_record({&x})) {
    y.set_requires_grad(true);
    tape.record(y, [x, y, c]() mutable {
      auto dy = y.grad();
      auto dx = x.grad_buffer();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += c * dy[i];
    });
  }
  return y;
}

template <class Real>
Tensor<Real> sum(Tape<Real>& tape, const Tensor<Real>& x) {
  Real s = 0;
  for (Real v : x.data()) s += v;
  Tensor<Real> y = Tensor<Real>::scalar(s);
  check_finite(y, "sum");
  if (tape.should_record({&x})) {
    y.set_requires_grad(true);
    tape.record(y, [x, y]() mutable {
      const Real g = y.grad()[0];
      auto dx = x.grad_buffer();
      for (auto& v : dx) v += g;
    });
  }
  return y;
}

// Weighted sum of scalars: sum_i weights[i] * terms[i].
template <class Real>
Tensor<Real> weighted_sum(Tape<Real>& tape, const std::vector<Tensor<Real>>& terms,
                          const std::vector<Real>& weights) {
  detail::require(terms.size() == weights.size(), "weighted_sum arity mismatch");
  Real s = 0;
  bool record = false;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    s += weights[i] * terms[i].item();
    record = record || tape.should_record({&terms[i]});
  }
  Tensor<Real> y = Tensor<Real>::scalar(s);
  check_finite(y, "weighted_sum");
  if (record) {
    y.set_requires_grad(true);
    tape.record(y, [terms, weights, y]() mutable {
      const Real g = y.grad()[0];
      for (std::size_t i = 0; i < terms.size(); ++i) {
        if (terms[i].requires_grad()) terms[i].grad_buffer()[0] += weights[i] * g;
      }
    });
  }
  return y;
}

template <class Real>
Tensor<Real> silu(Tape<Real>& tape, const Tensor<Real>& x) {
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Real s = Real(1) / (Real(1) + std::exp(-x[i]));
    out[i] = x[i] * s;
  }
  Tensor<Real> y(x.shape(), std::move(out));
  check_finite(y, "silu");
  if (tape.should_record({&x})) {
    y.set_requires_grad(true);
    tape.record(y, [x, y]() mutable {
      auto dy = y.grad();
      auto dx = x.grad_buffer();
      for (std::size_t i = 0; i < dy.size(); ++i) {
        const Real s = Real(1) / (Real(1) + std::exp(-x[i]));
        dx[i] += dy[i] * s * (Real(1) + x[i] * (Real(1) - s));
      }
    });
  }
  return y;
}

template <class Real>
Tensor<Real> layer_norm(Tape<Real>& tape, const Tensor<Real>& x,
                        const Tensor<Real>& gain, const Tensor<Real>& bias,
                        Real eps = Real(1e-5)) {
  const std::size_t d = x.cols(), t = x.size() / d;
  detail::require(d >= 1, "layer_norm needs at least one feature");
  detail::require(gain.size() == d && bias.size() == d,
                  "layer_norm gain/bias length mismatch");
  std::vector<Real> out(x.size()), xhat(x.size()), inv_std(t);
  for (std::size_t r = 0; r < t; ++r) {
    const Real* xr = x.row(r);
    Real mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += xr[c];
    mean /= Real(d);
    Real var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= Real(d);
    inv_std[r] = Real(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (xr[c] - mean) * inv_std[r];
      out[r * d + c] = gain[c] * xhat[r * d + c] + bias[c];
    }
  }
  Tensor<Real> y(x.shape(), std::move(out));
  check_finite(y, "layer_norm");
  if (tape.should_record({&x, &gain, &bias})) {
    y.set_requires_grad(true);
    tape.record(y, [x, gain, bias, y, d, t, xhat = std::move(xhat),
                    inv_std = std::move(inv_std)]() mutable {
      auto dy = y.grad();
      if (gain.requires_grad()) {
        auto dg = gain.grad_buffer();
        for (std::size_t i = 0; i < dy.size(); ++i) dg[i % d] += dy[i] * xhat[i];
      }
      if (bias.requires_grad()) {
        auto db = bias.grad_buffer();
        for (std::size_t i = 0; i < dy.size(); ++i) db[i % d] += dy[i];
      }
      if (!x.requires_grad()) return;
      auto dx = x.grad_buffer();
      std::vector<Real> dxhat(d);
      for (std::size_t r = 0; r < t; ++r) {
        Real s1 = 0, s2 = 0;
        for (std::size_t c = 0; c < d; ++c) {
          dxhat[c] = dy[r * d + c] * gain[c];
          s1 += dxhat[c];
          s2 += dxhat[c] * xhat[r * d + c];
        }
        const Real k = inv_std[r] / Real(d);
        for (std::size_t c = 0; c < d; ++c) {
          dx[r * d + c] +=
              k * (Real(d) * dxhat[c] - s1 - xhat[r * d + c] * s2);
        }
      }
    });
  }
  return y;
}

// Row-wise softmax. -inf entries are treated as excluded and get probability
// exactly zero; NaN and +inf are rejected.
template <class Real>
Tensor<Real> softmax_rows(Tape<Real>& tape, const Tensor<Real>& x) {
  const std::size_t n = x.cols(), t = x.size() / n;
  std::vector<Real> out(x.size(), Real(0));
  for (std::size_t r = 0; r < t; ++r) {
    const Real* xr = x.row(r);
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t c = 0; c < n; ++c) {
      if (std::isnan(xr[c]) || xr[c] == std::numeric_limits<Real>::infinity()) {
        throw NonFiniteError("softmax_rows input contains NaN or +inf");
      }
      mx = std::max(mx, xr[c]);
    }
    if (mx == -std::numeric_limits<Real>::infinity()) {
      throw NonFiniteError("softmax_rows row has no finite entry");
    }
    Real z = 0;
    for (std::size_t c = 0; c < n; ++c) {
      const Real e = std::isinf(xr[c]) ? Real(0) : std::exp(xr[c] - mx);
      out[r * n + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] /= z;
  }
  Tensor<Real> y(x.shape(), std::move(out));
  if (tape.should_record({&x})) {
    y.set_requires_grad(true);
    tape.record(y, [x, y, n, t]() mutable {
      auto dy = y.grad();
      auto dx = x.grad_buffer();
      for (std::size_t r = 0; r < t; ++r) {
        const Real* p = y.row(r);
        const Real s = dot(p, dy.data() + r * n, n);
        for (std::size_t c = 0; c < n; ++c) dx[r * n + c] += p[c] * (dy[r * n + c] - s);
      }
    });
  }
  return y;
}

// Rows of `table` picked by id.
template <class Real>
Tensor<Real> embedding_lookup(Tape<Real>& tape, const Tensor<Real>& table,
                              std::span<const TokenId> ids) {
  detail::require_matrix(table, "embedding table");
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  std::vector<Real> out(ids.size() * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    detail::require(ids[r] >= 0 && static_cast<std::size_t>(ids[r]) < v,
                    "token id " + std::to_string(ids[r]) +
                        " out of range for vocabulary " + std::to_string(v));
    std::copy_n(table.row(static_cast<std::size_t>(ids[r])), d, out.begin() + r * d);
  }
  Tensor<Real> y({ids.size(), d}, std::move(out));
  if (tape.should_record({&table})) {
    y.set_requires_grad(true);
    std::vector<TokenId> ids_copy(ids.begin(), ids.end());
    tape.record(y, [table, y, d, ids_copy = std::move(ids_copy)]() mutable {
      auto dy = y.grad();
      auto dt = table.grad_buffer();
      for (std::size_t r = 0; r < ids_copy.size(); ++r) {
        axpy(Real(1), dy.data() + r * d,
             dt.data() + static_cast<std::size_t>(ids_copy[r]) * d, d);
      }
    });
  }
  return y;
}

// Lookup over a vocabulary split in two tables: ids below base.rows() come
// from `base`, the rest from `extra`. Lets the two halves carry different
// trainability.
template <class Real>
Tensor<Real> split_embedding_lookup(Tape<Real>& tape, const Tensor<Real>& base,
                                    const Tensor<Real>& extra,
                                    std::span<const TokenId> ids) {
  detail::require_matrix(base, "base embedding table");
  detail::require_matrix(extra, "extra embedding table");
  const std::size_t vb = base.shape()[0], ve = extra.shape()[0],
                    d = base.shape()[1];
  detail::require(extra.shape()[1] == d, "embedding tables differ in width");
  std::vector<Real> out(ids.size() * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const auto id = ids[r];
    detail::require(id >= 0 && static_cast<std::size_t>(id) < vb + ve,
                    "token id " + std::to_string(id) + " out of range for vocabulary " +
                        std::to_string(vb + ve));
    const auto u = static_cast<std::size_t>(id);
    const Real* src = u < vb ? base.row(u) : extra.row(u - vb);
    std::copy_n(src, d, out.begin() + r * d);
  }
  Tensor<Real> y({ids.size(), d}, std::move(out));
  if (tape.should_record({&base, &extra})) {
    y.set_requires_grad(true);
    std::vector<TokenId> ids_copy(ids.begin(), ids.end());
    tape.record(y, [base, extra, y, d, vb, ids_copy = std::move(ids_copy)]() mutable {
      auto dy = y.grad();
      for (std::size_t r = 0; r < ids_copy.size(); ++r) {
        const auto u = static_cast<std::size_t>(ids_copy[r]);
        if (u < vb) {
          if (base.requires_grad()) axpy(Real(1), dy.data() + r * d, base.grad_buffer().data() + u * d, d);
        } else if (extra.requires_grad()) {
          axpy(Real(1), dy.data() + r * d, extra.grad_buffer().data() + (u - vb) * d, d);
        }
      }
    });
  }
  return y;
}

// Mean negative log-likelihood over rows whose label is not `ignore`. Returns
// 0 (with zero gradient) when every label is ignored.
template <class Real>
Tensor<Real> cross_entropy(Tape<Real>& tape, const Tensor<Real>& logits,
                           std::span<const TokenId> labels, TokenId ignore) {
  detail::require_matrix(logits, "cross_entropy logits");
  const std::size_t t = logits.shape()[0], v = logits.shape()[1];
  detail::require(labels.size() == t, "cross_entropy label count mismatch");
  std::size_t count = 0;
  Real total = 0;
  std::vector<Real> probs(t * v, Real(0));
  for (std::size_t r = 0; r < t; ++r) {
    if (labels[r] == ignore) continue;
    detail::require(labels[r] >= 0 && static_cast<std::size_t>(labels[r]) < v,
                    "label " + std::to_string(labels[r]) + " out of range");
    const Real* lr = logits.row(r);
    Real mx = lr[0];
    for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, lr[c]);
    Real z = 0;
    for (std::size_t c = 0; c < v; ++c) {
      probs[r * v + c] = std::exp(lr[c] - mx);
      z += probs[r * v + c];
    }
    for (std::size_t c = 0; c < v; ++c) probs[r * v + c] /= z;
    total += (mx + std::log(z)) - lr[static_cast<std::size_t>(labels[r])];
    ++count;
  }
  Tensor<Real> y = Tensor<Real>::scalar(count ? total / Real(count) : Real(0));
  check_finite(y, "cross_entropy");
  if (count > 0 && tape.should_record({&logits})) {
    y.set_requires_grad(true);
    std::vector<TokenId> labels_copy(labels.begin(), labels.end());
    tape.record(y, [logits, y, t, v, count, ignore, probs = std::move(probs),
                    labels_copy = std::move(labels_copy)]() mutable {
      const Real g = y.grad()[0] / Real(count);
      auto dl = logits.grad_buffer();
      for (std::size_t r = 0; r < t; ++r) {
        if (labels_copy[r] == ignore) continue;
        for (std::size_t c = 0; c < v; ++c) dl[r * v + c] += g * probs[r * v + c];
        dl[r * v + static_cast<std::size_t>(labels_copy[r])] -= g;
      }
    });
  }
  return y;
}

// [a | b] along columns; both [T x *].
template <class Real>
Tensor<Real> concat_cols(Tape<Real>& tape, const Tensor<Real>& a,
                         const Tensor<Real>& b) {
  detail::require_matrix(a, "concat lhs");
  detail::require_matrix(b, "concat rhs");
  const std::size_t t = a.shape()[0], na = a.shape()[1], nb = b.shape()[1];
  detail::require(b.shape()[0] == t, "concat row count mismatch");
  std::vector<Real> out(t * (na + nb));
  for (std::size_t r = 0; r < t; ++r) {
    std::copy_n(a.row(r), na, out.begin() + r * (na + nb));
    std::copy_n(b.row(r), nb, out.begin() + r * (na + nb) + na);
  }
  Tensor<Real> y({t, na + nb}, std::move(out));
  if (tape.should_record({&a, &b})) {
    y.set_requires_grad(true);
    tape.record(y, [a, b, y, t, na, nb]() mutable {
      auto dy = y.grad();
      if (a.requires_grad()) {
        auto da = a.grad_buffer();
        for (std::size_t r = 0; r < t; ++r) axpy(Real(1), dy.data() + r * (na + nb), da.data() + r * na, na);
      }
      if (b.requires_grad()) {
        auto db = b.grad_buffer();
        for (std::size_t r = 0; r < t; ++r) axpy(Real(1), dy.data() + r * (na + nb) + na, db.data() + r * nb, nb);
      }
    });
  }
  return y;
}

template <class Real>
Tensor<Real> gather_rows(Tape<Real>& tape, const Tensor<Real>& x,
                         std::span<const std::size_t> rows) {
  detail::require_matrix(x, "gather_rows input");
  const std::size_t n = x.cols();
  std::vector<Real> out(rows.size() * n);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    detail::require(rows[i] < x.shape()[0], "gather_rows index out of range");
    std::copy_n(x.row(rows[i]), n, out.begin() + i * n);
  }
  Tensor<Real> y({rows.size(), n}, std::move(out));
  if (tape.should_record({&x})) {
    y.set_requires_grad(true);
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    tape.record(y, [x, y, n, idx = std::move(idx)]() mutable {
      auto dy = y.grad();
      auto dx = x.grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i) axpy(Real(1), dy.data() + i * n, dx.data() + idx[i] * n, n);
    });
  }
  return y;
}

// Multi-head scaled dot-product attention over an explicit allowed set.
// q, k, v are [T x d]; head h owns columns [h*d/H, (h+1)*d/H).
template <class Real>
Tensor<Real> attention(Tape<Real>& tape, const Tensor<Real>& q,
                       const Tensor<Real>& k, const Tensor<Real>& v,
                       const AttentionMask& mask, std::size_t n_heads) {
  detail::require_matrix(q, "attention q");
  const std::size_t t = q.shape()[0], d = q.shape()[1];
  detail::require(k.shape() == q.shape() && v.shape() == q.shape(),
                  "attention q/k/v shape mismatch");
  detail::require(mask.size() == t, "attention mask size " +
                                        std::to_string(mask.size()) +
                                        " does not match rows " + std::to_string(t));
  detail::require(n_heads >= 1 && d % n_heads == 0, "d not divisible by heads");
  const std::size_t hd = d / n_heads;
  const Real inv_sqrt = Real(1) / std::sqrt(Real(hd));

  std::vector<std::vector<std::size_t>> keys(t);
  std::vector<std::size_t> offset(t + 1, 0);
  for (std::size_t i = 0; i < t; ++i) {
    keys[i] = mask.keys(i);
    detail::require(!keys[i].empty(), "attention row with no allowed keys");
    offset[i + 1] = offset[i] + keys[i].size();
  }
  // probs[h * total + offset[i] + j] is the weight of key keys[i][j].
  const std::size_t total = offset[t];
  std::vector<Real> probs(n_heads * total);
  Tensor<Real> y = Tensor<Real>::zeros({t, d});
  auto yd = y.mutable_data();
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t c0 = h * hd;
    for (std::size_t i = 0; i < t; ++i) {
      Real* p = probs.data() + h * total + offset[i];
      const auto& ks = keys[i];
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t j = 0; j < ks.size(); ++j) {
        p[j] = dot(q.row(i) + c0, k.row(ks[j]) + c0, hd) * inv_sqrt;
        mx = std::max(mx, p[j]);
      }
      Real z = 0;
      for (std::size_t j = 0; j < ks.size(); ++j) {
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      for (std::size_t j = 0; j < ks.size(); ++j) {
        p[j] /= z;
        axpy(p[j], v.row(ks[j]) + c0, yd.data() + i * d + c0, hd);
      }
    }
  }
  check_finite(y, "attention");
  if (tape.should_record({&q, &k, &v})) {
    y.set_requires_grad(true);
    tape.record(y, [q, k, v, y, t, d, hd, n_heads, inv_sqrt, total,
                    keys = std::move(keys), offset = std::move(offset),
                    probs = std::move(probs)]() mutable {
      auto dy = y.grad();
      auto dq = q.grad_buffer();
      auto dk = k.grad_buffer();
      auto dv = v.grad_buffer();
      std::vector<Real> ds;
      for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t c0 = h * hd;
        for (std::size_t i = 0; i < t; ++i) {
          const Real* p = probs.data() + h * total + offset[i];
          const auto& ks = keys[i];
          const Real* dyi = dy.data() + i * d + c0;
          ds.assign(ks.size(), Real(0));
          Real acc = 0;
          for (std::size_t j = 0; j < ks.size(); ++j) {
            axpy(p[j], dyi, dv.data() + ks[j] * d + c0, hd);
            ds[j] = dot(dyi, v.row(ks[j]) + c0, hd);
            acc += p[j] * ds[j];
          }
          for (std::size_t j = 0; j < ks.size(); ++j) {
            const Real g = p[j] * (ds[j] - acc) * inv_sqrt;
            axpy(g, k.row(ks[j]) + c0, dq.data() + i * d + c0, hd);
            axpy(g, q.row(i) + c0, dk.data() + ks[j] * d + c0, hd);
          }
        }
      }
    });
  }
  return y;
}

template <class Real>
std::size_t argmax(const Real* values, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

}  // namespace mtp::ops
