#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "mtp/numerics/rng.hpp"
#include "mtp/numerics/tensor.hpp"

namespace mtp {

struct GradCheckOptions {
  double eps = 1e-5;
  // Tensors larger than this are probed on a random subsample of
  // `sample_coords` coordinates instead of exhaustively.
  std::size_t exhaustive_limit = 256;
  std::size_t sample_coords = 64;
  // Denominator floor so coordinates with vanishing gradients compare on an
  // absolute scale.
  double abs_floor = 1e-8;
  std::uint64_t seed = 7;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

// Compares `analytic[p][i]` against central differences of `value` at the
// selected coordinates of each tensor in `params`.
template <class Real>
GradCheckResult finite_diff_compare(const std::function<Real()>& value,
                                    std::vector<Tensor<Real>> params,
                                    const std::vector<std::vector<Real>>& analytic,
                                    const GradCheckOptions& opt = {}) {
  if (opt.eps <= 0) throw std::invalid_argument("finite_diff eps must be positive");
  if (analytic.size() != params.size()) {
    throw std::invalid_argument("one analytic gradient per parameter expected");
  }
  Rng rng(opt.seed, "gradcheck");
  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& t = params[p];
    std::vector<std::size_t> coords(t.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (t.size() > opt.exhaustive_limit) {
      std::shuffle(coords.begin(), coords.end(), rng.engine());
      coords.resize(std::min(coords.size(), opt.sample_coords));
    }
    auto data = t.mutable_data();
    for (std::size_t i : coords) {
      const Real saved = data[i];
      data[i] = saved + static_cast<Real>(opt.eps);
      const double up = static_cast<double>(value());
      data[i] = saved - static_cast<Real>(opt.eps);
      const double down = static_cast<double>(value());
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * opt.eps);
      const double a = static_cast<double>(analytic[p][i]);
      const double err = relative_error(a, numeric, opt.abs_floor);
      ++result.coords_checked;
      if (err >= result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = p;
        result.worst_index = i;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

// Builds the loss once on a recording tape to obtain analytic gradients, then
// checks them against central differences with recording disabled.
template <class Real>
GradCheckResult finite_diff_check(
    const std::function<Tensor<Real>(Tape<Real>&)>& loss_fn,
    std::vector<Tensor<Real>> params, const GradCheckOptions& opt = {}) {
  for (auto& t : params) t.clear_grad();
  Tape<Real> tape;
  Tensor<Real> loss = loss_fn(tape);
  tape.backward(loss);
  std::vector<std::vector<Real>> analytic;
  for (auto& t : params) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.size(), Real(0));
    }
  }
  std::function<Real()> value = [&loss_fn]() {
    Tape<Real> off(false);
    return loss_fn(off).item();
  };
  return finite_diff_compare<Real>(value, std::move(params), analytic, opt);
}

}  // namespace mtp
