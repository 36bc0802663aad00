#pragma once

#include <cstddef>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "deltavit/common.hpp"

namespace deltavit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor: dense n-d array with an optional gradient buffer. Copying a Tensor
// copies the handle, not the storage; all tape sites that hold the same
// handle therefore accumulate into one gradient. Values are treated as
// immutable once produced by an operation; only `grad` mutates during
// backward. Optimizer updates between steps edit leaf values in place.
// ---------------------------------------------------------------------------
template <typename S>
class Tensor {
 public:
  Tensor() : d_(std::make_shared<Data>()) { d_->shape = {0}; }

  static Tensor zeros(Shape shape) {
    Tensor t;
    const std::size_t n = shape_numel(shape);
    t.d_->shape = std::move(shape);
    t.d_->values.assign(n, S(0));
    return t;
  }

  static Tensor full(Shape shape, S v) {
    Tensor t = zeros(std::move(shape));
    for (auto& x : t.d_->values) x = v;
    return t;
  }

  static Tensor from_values(Shape shape, std::vector<S> values) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " expects " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    Tensor t;
    t.d_->shape = std::move(shape);
    t.d_->values = std::move(values);
    return t;
  }

  static Tensor scalar(S v) { return from_values({1}, {v}); }

  const Shape& shape() const { return d_->shape; }
  std::size_t ndim() const { return d_->shape.size(); }
  std::size_t dim(std::size_t i) const { return d_->shape[i]; }
  std::size_t numel() const { return d_->values.size(); }

  std::vector<S>& values() { return d_->values; }
  const std::vector<S>& values() const { return d_->values; }
  S* data() { return d_->values.data(); }
  const S* data() const { return d_->values.data(); }

  S& operator[](std::size_t i) { return d_->values[i]; }
  const S& operator[](std::size_t i) const { return d_->values[i]; }

  // 2-d accessors; row stride is dim(1).
  S& at(std::size_t i, std::size_t j) { return d_->values[i * d_->shape[1] + j]; }
  const S& at(std::size_t i, std::size_t j) const {
    return d_->values[i * d_->shape[1] + j];
  }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool v) { d_->requires_grad = v; }

  bool has_grad() const { return !d_->grad.empty(); }

  std::vector<S>& grad() {
    if (!has_grad()) throw ContractError("tensor: grad not populated");
    return d_->grad;
  }
  const std::vector<S>& grad() const {
    if (!has_grad()) throw ContractError("tensor: grad not populated");
    return d_->grad;
  }

  /// Allocates a zero gradient buffer if absent.
  std::vector<S>& ensure_grad() {
    if (!has_grad()) d_->grad.assign(d_->values.size(), S(0));
    return d_->grad;
  }

  void zero_grad() {
    for (auto& g : d_->grad) g = S(0);
  }

  void clear_grad() { d_->grad.clear(); }

  /// Deep copy of the values (fresh storage, no grad, requires_grad copied).
  Tensor clone() const {
    Tensor t = from_values(d_->shape, d_->values);
    t.d_->requires_grad = d_->requires_grad;
    return t;
  }

  bool same_storage(const Tensor& other) const { return d_ == other.d_; }

 private:
  struct Data {
    Shape shape;
    std::vector<S> values;
    std::vector<S> grad;  // empty means "not populated"
    bool requires_grad = false;
  };
  std::shared_ptr<Data> d_;
};

}  // namespace deltavit
