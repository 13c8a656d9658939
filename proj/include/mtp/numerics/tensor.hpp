#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mtp {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <class Real>
struct TensorStorage {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // empty until first accumulation
  bool requires_grad = false;
};

// Dense row-major array with an optional gradient accumulator. Copies are
// shallow handles onto the same storage; use clone() for a deep copy.
template <class Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;

  Tensor(Shape shape, std::vector<Real> data, bool requires_grad = false)
      : s_(std::make_shared<TensorStorage<Real>>()) {
    if (shape_size(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_string(shape));
    }
    s_->shape = std::move(shape);
    s_->value = std::move(data);
    s_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<Real> data(shape_size(shape), Real(0));
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor filled(Shape shape, Real v, bool requires_grad = false) {
    std::vector<Real> data(shape_size(shape), v);
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor scalar(Real v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t size() const { return s_->value.size(); }
  std::size_t rows() const { return s_->shape.size() == 1 ? 1 : s_->shape[0]; }
  std::size_t cols() const { return s_->shape.back(); }

  std::span<const Real> data() const { return s_->value; }
  std::span<Real> mutable_data() { return s_->value; }
  const Real* row(std::size_t r) const { return s_->value.data() + r * cols(); }
  Real* mutable_row(std::size_t r) { return s_->value.data() + r * cols(); }

  Real operator[](std::size_t i) const { return s_->value[i]; }
  Real at(std::size_t r, std::size_t c) const {
    return s_->value[r * cols() + c];
  }
  Real item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor");
    return s_->value[0];
  }

  bool requires_grad() const { return s_ && s_->requires_grad; }
  void set_requires_grad(bool on) {
    s_->requires_grad = on;
    if (!on) s_->grad.clear();
  }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<const Real> grad() const { return s_->grad; }
  // Accumulator view, allocated (zeroed) on first use.
  std::span<Real> grad_buffer() const {
    if (s_->grad.empty()) s_->grad.assign(s_->value.size(), Real(0));
    return s_->grad;
  }
  void zero_grad() const { std::fill(s_->grad.begin(), s_->grad.end(), Real(0)); }
  void clear_grad() { s_->grad.clear(); }

  Tensor clone() const {
    Tensor out(s_->shape, s_->value, s_->requires_grad);
    return out;
  }

  Tensor detach() const { return Tensor(s_->shape, s_->value, false); }

  template <class Other>
  Tensor<Other> cast() const {
    std::vector<Other> data(s_->value.begin(), s_->value.end());
    return Tensor<Other>(s_->shape, std::move(data), s_->requires_grad);
  }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

 private:
  std::shared_ptr<TensorStorage<Real>> s_;
};

template <class Real>
void check_finite(const Tensor<Real>& t, const char* op) {
  for (Real v : t.data()) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string("non-finite value produced by ") + op);
    }
  }
}

// Records backward closures in execution order. A disabled tape records
// nothing, which is how inference runs.
template <class Real>
class Tape {
 public:
  explicit Tape(bool enabled = true) : enabled_(enabled) {}

  bool enabled() const { return enabled_; }

  bool should_record(std::initializer_list<const Tensor<Real>*> inputs) const {
    if (!enabled_) return false;
    for (const auto* t : inputs) {
      if (t->requires_grad()) return true;
    }
    return false;
  }

  void record(Tensor<Real> output, std::function<void()> backward_fn) {
    outputs_.push_back(std::move(output));
    steps_.push_back(std::move(backward_fn));
  }

  std::size_t size() const { return steps_.size(); }

  void clear() {
    outputs_.clear();
    steps_.clear();
  }

  // Propagates d(loss)/d(.) into every tracked tensor. Intermediate grads are
  // reset first so repeated calls accumulate only into leaves.
  void backward(Tensor<Real> loss) {
    if (loss.size() != 1) {
      throw ShapeError("backward() needs a scalar loss, got " +
                       shape_string(loss.shape()));
    }
    for (auto& t : outputs_) t.zero_grad();
    if (!loss.requires_grad()) return;
    loss.grad_buffer()[0] += Real(1);
    for (std::size_t i = steps_.size(); i-- > 0;) {
      // Outputs that never fed the loss have no gradient to propagate.
      if (outputs_[i].has_grad()) steps_[i]();
    }
  }

 private:
  bool enabled_;
  std::vector<Tensor<Real>> outputs_;
  std::vector<std::function<void()>> steps_;
};

}  // namespace mtp
