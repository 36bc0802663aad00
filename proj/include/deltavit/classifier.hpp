#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "deltavit/common.hpp"
#include "deltavit/ops.hpp"
#include "deltavit/tensor.hpp"

// Cosine-similarity classifier with temperature scaling. Class weights are
// stored unnormalized; cosine logits normalize them at use time. After base
// training, weights are replaced by class prototypes (normalized feature
// means), and incremental sessions append one prototype per new class.

namespace deltavit {

template <typename S>
struct ClassifierState {
  Tensor<S> weights;  // [C x d], row j is the weight vector of class_ids[j]
  S temperature = S(16);
  std::vector<std::uint32_t> class_ids;

  std::size_t num_classes() const { return class_ids.size(); }
  std::size_t feature_dim() const { return weights.dim(1); }

  /// Row index of a global class id; throws if the class is unknown.
  std::size_t row_of(std::uint32_t class_id) const {
    for (std::size_t i = 0; i < class_ids.size(); ++i)
      if (class_ids[i] == class_id) return i;
    throw ContractError("classifier: unknown class id " +
                        std::to_string(class_id));
  }
};

/// Fresh classifier with seeded Gaussian columns (std 0.02), one per class.
template <typename S>
ClassifierState<S> make_classifier(std::vector<std::uint32_t> class_ids,
                                   std::size_t feature_dim, S temperature,
                                   std::uint64_t seed) {
  for (std::size_t i = 0; i < class_ids.size(); ++i)
    for (std::size_t j = i + 1; j < class_ids.size(); ++j)
      if (class_ids[i] == class_ids[j])
        throw ContractError("classifier: duplicate class id " +
                            std::to_string(class_ids[i]));
  if (!(temperature > S(0)))
    throw ContractError("classifier: temperature must be positive");
  ClassifierState<S> state;
  state.class_ids = std::move(class_ids);
  state.temperature = temperature;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 0.02);
  state.weights = Tensor<S>::zeros({state.class_ids.size(), feature_dim});
  for (std::size_t i = 0; i < state.weights.numel(); ++i)
    state.weights[i] = S(gauss(rng));
  return state;
}

namespace detail {

template <typename S>
void warn_on_zero_rows(const Tensor<S>& weights, S eps) {
  for (std::size_t i = 0; i < weights.dim(0); ++i) {
    S sq = S(0);
    for (std::size_t j = 0; j < weights.dim(1); ++j)
      sq += weights.at(i, j) * weights.at(i, j);
    if (std::sqrt(sq) <= eps) {
      warn("cosine_logits: zero-norm weight row " + std::to_string(i) +
           ", normalization is eps-guarded");
    }
  }
}

}  // namespace detail

/// Temperature-scaled cosine logits for a batch of unit feature rows:
/// l[i][j] = tau * z_i . w_j / ||w_j||.
template <typename S>
Tensor<S> cosine_logits_batch(const Tensor<S>& features,
                              const ClassifierState<S>& state,
                              Tape<S>* tape = nullptr) {
  detail::require_2d(features, "cosine_logits");
  if (features.dim(1) != state.feature_dim()) {
    throw ShapeError("cosine_logits: feature dim " + shape_str(features.shape()) +
                     " vs weights " + shape_str(state.weights.shape()));
  }
  const S eps = S(1e-12);
  detail::warn_on_zero_rows(state.weights, eps);
  Tensor<S> unit_weights = l2_normalize(state.weights, eps, tape);
  Tensor<S> sims = matmul(features, transpose(unit_weights, tape), tape);
  return scale(sims, state.temperature, tape);
}

/// Logits for a single unit feature vector. The feature must already be
/// L2-normalized (the encoder output contract).
template <typename S>
Tensor<S> cosine_logits(const Tensor<S>& z, const ClassifierState<S>& state,
                        Tape<S>* tape = nullptr) {
  if (z.ndim() != 1) {
    throw ShapeError("cosine_logits: expected a vector, got " +
                     shape_str(z.shape()));
  }
  S sq = S(0);
  for (std::size_t i = 0; i < z.numel(); ++i) sq += z[i] * z[i];
  if (std::abs(std::sqrt(sq) - S(1)) > S(1e-6)) {
    throw ContractError("cosine_logits: feature must be unit norm, got ||z|| = " +
                        std::to_string(static_cast<double>(std::sqrt(sq))));
  }
  Tensor<S> batch = reshape(z, {1, z.numel()}, tape);
  return take_row(cosine_logits_batch(batch, state, tape), 0, tape);
}

/// Normalized mean of a class's feature vectors: the closed-form minimizer of
/// (1/2) sum_i ||mu - z_i||^2, scaled to unit norm.
template <typename S>
Tensor<S> fit_prototype(const std::vector<Tensor<S>>& features) {
  if (features.empty()) throw DomainError("fit_prototype: empty feature set");
  const std::size_t d = features.front().numel();
  for (const auto& f : features) {
    if (f.ndim() != 1 || f.numel() != d) {
      throw ShapeError("fit_prototype: feature shape mismatch " +
                       shape_str(features.front().shape()) + " vs " +
                       shape_str(f.shape()));
    }
  }
  Tensor<S> mean = Tensor<S>::zeros({d});
  for (const auto& f : features)
    for (std::size_t j = 0; j < d; ++j) mean[j] += f[j];
  for (std::size_t j = 0; j < d; ++j) mean[j] /= S(features.size());
  S sq = S(0);
  for (std::size_t j = 0; j < d; ++j) sq += mean[j] * mean[j];
  const S norm = std::sqrt(sq);
  if (norm <= S(1e-12))
    warn("fit_prototype: zero-mean feature set, normalization is eps-guarded");
  const S denom = std::max(norm, S(1e-12));
  for (std::size_t j = 0; j < d; ++j) mean[j] /= denom;
  return mean;
}

template <typename S>
using ClassFeatureMap = std::map<std::uint32_t, std::vector<Tensor<S>>>;

/// Replaces every base-class weight with its class prototype. The feature map
/// must cover exactly the classes already in the state; temperature and class
/// order are unchanged.
template <typename S>
ClassifierState<S> replace_base_classifier(
    const ClassifierState<S>& state, const ClassFeatureMap<S>& per_class) {
  for (std::uint32_t id : state.class_ids) {
    if (per_class.find(id) == per_class.end()) {
      throw ContractError("replace_base_classifier: missing features for class " +
                          std::to_string(id));
    }
  }
  if (per_class.size() != state.class_ids.size()) {
    for (const auto& [id, feats] : per_class) {
      bool known = false;
      for (std::uint32_t existing : state.class_ids) known |= (existing == id);
      if (!known) {
        throw ContractError("replace_base_classifier: class " +
                            std::to_string(id) + " is not in the classifier");
      }
    }
  }
  ClassifierState<S> next;
  next.temperature = state.temperature;
  next.class_ids = state.class_ids;
  next.weights = Tensor<S>::zeros(state.weights.shape());
  const std::size_t d = state.feature_dim();
  for (std::size_t row = 0; row < state.num_classes(); ++row) {
    Tensor<S> proto = fit_prototype(per_class.at(state.class_ids[row]));
    for (std::size_t j = 0; j < d; ++j) next.weights.at(row, j) = proto[j];
  }
  return next;
}

/// Appends one prototype per new class, in ascending class id order. Existing
/// rows are copied bit-exactly; new ids must be disjoint from existing ones.
template <typename S>
ClassifierState<S> append_classes(const ClassifierState<S>& state,
                                  const ClassFeatureMap<S>& new_per_class) {
  for (const auto& [id, feats] : new_per_class) {
    for (std::uint32_t existing : state.class_ids) {
      if (existing == id) {
        throw ContractError("append_classes: class " + std::to_string(id) +
                            " already present");
      }
    }
  }
  const std::size_t d = state.feature_dim();
  const std::size_t old_count = state.num_classes();
  ClassifierState<S> next;
  next.temperature = state.temperature;
  next.class_ids = state.class_ids;
  next.weights = Tensor<S>::zeros({old_count + new_per_class.size(), d});
  std::copy(state.weights.data(), state.weights.data() + old_count * d,
            next.weights.data());
  std::size_t row = old_count;
  for (const auto& [id, feats] : new_per_class) {
    Tensor<S> proto = fit_prototype(feats);
    for (std::size_t j = 0; j < d; ++j) next.weights.at(row, j) = proto[j];
    next.class_ids.push_back(id);
    ++row;
  }
  return next;
}

}  // namespace deltavit
