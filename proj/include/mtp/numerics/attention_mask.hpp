#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mtp/numerics/tensor.hpp"

namespace mtp {

// Square binary "may attend" relation between rows of one forward pass.
// Excluded keys are dropped from the softmax entirely, so they receive an
// exact zero weight.
class AttentionMask {
 public:
  AttentionMask() = default;
  explicit AttentionMask(std::size_t n) : n_(n), bits_(n * n, 0) {}

  static AttentionMask causal(std::size_t n) {
    AttentionMask m(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j <= i; ++j) m.allow(i, j);
    }
    return m;
  }

  std::size_t size() const { return n_; }

  void allow(std::size_t query, std::size_t key, bool on = true) {
    bits_[query * n_ + key] = on ? 1 : 0;
  }
  bool allowed(std::size_t query, std::size_t key) const {
    return bits_[query * n_ + key] != 0;
  }

  std::vector<std::size_t> keys(std::size_t query) const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < n_; ++j) {
      if (allowed(query, j)) out.push_back(j);
    }
    return out;
  }

  // Rows may only look backwards and must see themselves.
  void validate() const {
    for (std::size_t i = 0; i < n_; ++i) {
      if (!allowed(i, i)) {
        throw ShapeError("attention row " + std::to_string(i) +
                         " does not attend to itself");
      }
      for (std::size_t j = i + 1; j < n_; ++j) {
        if (allowed(i, j)) {
          throw ShapeError("attention row " + std::to_string(i) +
                           " attends to future row " + std::to_string(j));
        }
      }
    }
  }

  bool operator==(const AttentionMask&) const = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::uint8_t> bits_;
};

}  // namespace mtp
