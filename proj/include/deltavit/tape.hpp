#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "deltavit/common.hpp"
#include "deltavit/tensor.hpp"

namespace deltavit {

// ---------------------------------------------------------------------------
// Tape: ordered record of executed operations (define-by-run). Operations
// append themselves during the forward pass, so the record order is a
// topological order of the computation; backward replays it once in reverse.
// A tape is built fresh for every forward pass.
// ---------------------------------------------------------------------------
template <typename S>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(BackwardFn fn) { records_.push_back(std::move(fn)); }

  std::size_t size() const { return records_.size(); }
  void clear() { records_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and replays every recorded operation in
  /// reverse, accumulating gradients by summation into every tensor that
  /// requires them.
  void backward(Tensor<S> loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward: loss must be a scalar, got shape " +
                          shape_str(loss.shape()));
    }
    loss.ensure_grad();
    loss.grad()[0] = S(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
  }

 private:
  std::vector<BackwardFn> records_;
};

template <typename S>
void backward(Tensor<S> loss, Tape<S>& tape) {
  tape.backward(std::move(loss));
}

}  // namespace deltavit
