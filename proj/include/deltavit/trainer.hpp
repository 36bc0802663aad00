#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "deltavit/classifier.hpp"
#include "deltavit/common.hpp"
#include "deltavit/encoder.hpp"
#include "deltavit/ops.hpp"
#include "deltavit/protocol.hpp"
#include "deltavit/tape.hpp"
#include "deltavit/tensor.hpp"

// Base-session training and incremental extension. Only the additive updates,
// the adapted blocks' target biases, and the classifier train in the base
// session; the pretrained backbone stays frozen throughout, and every weight
// in the system is frozen during incremental sessions, which extend the
// classifier with class-mean prototypes instead of running gradient steps.

namespace deltavit {

enum class Phase { base, incremental };
enum class Precision { float64, float32 };

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double temperature = 16.0;  // cosine logit scale, fixed (not learned)

  void validate() const {
    if (batch_size == 0) throw ConfigError("trainer.batch_size: must be positive");
    if (!(learning_rate >= 0.0))
      throw ConfigError("trainer.learning_rate: must be non-negative");
    if (momentum < 0.0 || momentum >= 1.0)
      throw ConfigError("trainer.momentum: must lie in [0, 1)");
    if (!(temperature > 0.0))
      throw ConfigError("trainer.temperature: must be positive");
  }
};

struct StepRecord {
  std::size_t session = 0;
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss = 0.0;
};

// ---------------------------------------------------------------------------
// Freeze control
// ---------------------------------------------------------------------------

/// Marks exactly the parameter set that may train in the given phase. Base:
/// additive updates, adapted target biases, classifier. Incremental: nothing.
template <typename S>
void apply_freeze(EncoderModel<S>& model, ClassifierState<S>* classifier,
                  Phase phase) {
  visit_parameters(model, [](const std::string&, Tensor<S>& t) {
    t.set_requires_grad(false);
  });
  if (classifier != nullptr) classifier->weights.set_requires_grad(false);
  if (phase == Phase::base) {
    if (model.config.adapted_blocks > 0) {
      for_each_delta(model, [](Tensor<S>& t) { t.set_requires_grad(true); });
      for_each_adapted_bias(model, [](Tensor<S>& t) { t.set_requires_grad(true); });
    }
    if (classifier != nullptr) classifier->weights.set_requires_grad(true);
  }
}

/// Handles of every tensor currently marked trainable, in visit order with
/// the classifier last. The order fixes the optimizer's state layout.
template <typename S>
std::vector<Tensor<S>> trainable_parameters(EncoderModel<S>& model,
                                            ClassifierState<S>* classifier) {
  std::vector<Tensor<S>> params;
  visit_parameters(model, [&params](const std::string&, Tensor<S>& t) {
    if (t.requires_grad()) params.push_back(t);
  });
  if (classifier != nullptr && classifier->weights.requires_grad()) {
    params.push_back(classifier->weights);
  }
  return params;
}

// ---------------------------------------------------------------------------
// SGD with momentum
// ---------------------------------------------------------------------------

/// Classic momentum: v <- momentum * v + g, p <- p - lr * v. A parameter
/// whose gradient buffer is absent contributes g = 0 but still decays v.
template <typename S>
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Tensor<S>> params, double learning_rate,
               double momentum)
      : params_(std::move(params)),
        lr_(static_cast<S>(learning_rate)),
        momentum_(static_cast<S>(momentum)) {
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.emplace_back(p.numel(), S(0));
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<S>& p = params_[i];
      std::vector<S>& v = velocity_[i];
      if (v.size() != p.numel()) {
        throw ContractError("sgd: parameter " + std::to_string(i) +
                            " changed size under the optimizer");
      }
      const S* g = p.has_grad() ? p.grad().data() : nullptr;
      S* pv = p.data();
      for (std::size_t j = 0; j < v.size(); ++j) {
        v[j] = momentum_ * v[j] + (g != nullptr ? g[j] : S(0));
        pv[j] -= lr_ * v[j];
      }
    }
  }

  const std::vector<Tensor<S>>& params() const { return params_; }

 private:
  std::vector<Tensor<S>> params_;
  std::vector<std::vector<S>> velocity_;
  S lr_;
  S momentum_;
};

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

/// Embeds every sample with the frozen forward pass (no tape) and groups the
/// unit-norm features by label.
template <typename S>
ClassFeatureMap<S> features_by_class(const EncoderModel<S>& model,
                                     const std::vector<LabeledSample<S>>& samples) {
  ClassFeatureMap<S> map;
  for (const auto& sample : samples) {
    map[sample.label].push_back(encoder_forward(sample.image, model));
  }
  return map;
}

// ---------------------------------------------------------------------------
// Base-session training
// ---------------------------------------------------------------------------

template <typename S>
struct BaseTrainResult {
  std::vector<StepRecord> steps;
  double final_train_accuracy = 0.0;
};

/// Mini-batch SGD over the base session: every epoch reshuffles the sample
/// order with a seed derived from the epoch index, batches keep the trailing
/// partial batch, and each step runs a fresh tape through the encoder, the
/// cosine classifier, and cross-entropy.
template <typename S>
BaseTrainResult<S> train_base_session(EncoderModel<S>& model,
                                      ClassifierState<S>& classifier,
                                      const std::vector<LabeledSample<S>>& train,
                                      const TrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (train.empty()) throw DomainError("train: empty base train set");
  apply_freeze(model, &classifier, Phase::base);
  SgdOptimizer<S> opt(trainable_parameters(model, &classifier),
                      cfg.learning_rate, cfg.momentum);

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  BaseTrainResult<S> result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(seed, 0x40000 + epoch));
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t step = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      Tape<S> tape;
      std::vector<Tensor<S>> feats;
      std::vector<std::size_t> rows;
      feats.reserve(stop - start);
      rows.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i) {
        const auto& sample = train[order[i]];
        feats.push_back(encoder_forward(sample.image, model, &tape));
        rows.push_back(classifier.row_of(sample.label));
      }
      Tensor<S> batch = stack_rows(feats, &tape);
      Tensor<S> logits = cosine_logits_batch(batch, classifier, &tape);
      Tensor<S> loss = cross_entropy(logits, rows, &tape);
      opt.zero_grad();
      backward(loss, tape);
      opt.step();
      result.steps.push_back({0, epoch, step++, static_cast<double>(loss[0])});
    }
  }

  std::size_t correct = 0;
  for (const auto& sample : train) {
    Tensor<S> z = encoder_forward(sample.image, model);
    if (detail::predict(z, classifier) == sample.label) ++correct;
  }
  result.final_train_accuracy =
      static_cast<double>(correct) / static_cast<double>(train.size());
  return result;
}

// ---------------------------------------------------------------------------
// Full protocol run
// ---------------------------------------------------------------------------

template <typename S>
struct ExperimentResult {
  SessionReport report;
  double base_train_accuracy = 0.0;
  std::vector<StepRecord> steps;
  ParamCounts parameters;
  double base_train_seconds = 0.0;
  std::vector<double> session_seconds;  // extension + evaluation, per session
};

/// End-to-end run on a prepared plan: train the base session, replace the
/// learned classifier rows with class-mean prototypes, then freeze everything
/// and extend one session at a time, evaluating cumulatively after each.
template <typename S>
ExperimentResult<S> run_full_experiment(EncoderModel<S>& model,
                                        ClassifierState<S>& classifier,
                                        const SessionPlan<S>& plan,
                                        const TrainConfig& cfg,
                                        std::uint64_t seed,
                                        unsigned workers = 1) {
  using clock = std::chrono::steady_clock;
  auto elapsed = [](clock::time_point t0) {
    return std::chrono::duration<double>(clock::now() - t0).count();
  };

  ExperimentResult<S> result;
  result.parameters = trainable_parameter_count(
      model.config, plan.sessions.front().class_ids.size());

  auto t0 = clock::now();
  BaseTrainResult<S> base =
      train_base_session(model, classifier, plan.sessions.front().train, cfg,
                         derive_seed(seed, seeds::kTrainer));
  result.base_train_seconds = elapsed(t0);
  result.base_train_accuracy = base.final_train_accuracy;
  result.steps = std::move(base.steps);

  apply_freeze(model, &classifier, Phase::incremental);
  std::vector<double> acc;
  acc.reserve(plan.sessions.size());

  t0 = clock::now();
  classifier = replace_base_classifier(
      classifier, features_by_class(model, plan.sessions.front().train));
  acc.push_back(evaluate(model, classifier, cumulative_test_set(plan, 0), workers));
  result.session_seconds.push_back(elapsed(t0));

  for (std::size_t t = 1; t < plan.sessions.size(); ++t) {
    t0 = clock::now();
    classifier =
        append_classes(classifier, features_by_class(model, plan.sessions[t].train));
    acc.push_back(evaluate(model, classifier, cumulative_test_set(plan, t), workers));
    result.session_seconds.push_back(elapsed(t0));
  }
  result.report = summarize(acc);
  return result;
}

}  // namespace deltavit
