#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "deltavit/classifier.hpp"
#include "deltavit/common.hpp"
#include "deltavit/encoder.hpp"
#include "deltavit/tensor.hpp"

// Session schedule for few-shot class-incremental learning: one base session
// with ample data, then T incremental sessions in N-way K-shot form with
// pairwise disjoint label spaces. Evaluation after session t is cumulative
// over all classes seen so far.

namespace deltavit {

enum class Split { train, test };

template <typename S>
struct LabeledSample {
  Tensor<S> image;
  std::uint32_t label = 0;
  Split split = Split::train;
};

template <typename S>
struct Session {
  std::size_t index = 0;
  std::vector<std::uint32_t> class_ids;  // ascending
  std::vector<LabeledSample<S>> train;
  std::vector<LabeledSample<S>> test;
};

template <typename S>
struct SessionPlan {
  std::size_t ways = 0;
  std::size_t shots = 0;
  std::vector<Session<S>> sessions;  // sessions[0] is the base session

  std::size_t incremental_count() const { return sessions.size() - 1; }
};

struct SessionReport {
  std::vector<double> per_session_accuracy;
  double s_base = 0.0;
  double s_last = 0.0;
  double s_avg = 0.0;
  double pd = 0.0;
};

// ---------------------------------------------------------------------------
// Plan construction
// ---------------------------------------------------------------------------

/// Deterministically assigns classes to a base session plus `incremental`
/// N-way K-shot sessions. Classes are sorted by id, shuffled with the plan
/// seed, then split; each incremental class keeps its first K train samples
/// after a seeded per-class shuffle (leftover train samples are discarded,
/// test samples are all kept).
template <typename S>
SessionPlan<S> build_session_plan(const std::vector<LabeledSample<S>>& dataset,
                                  std::size_t base_class_count,
                                  std::size_t ways, std::size_t shots,
                                  std::size_t incremental, std::uint64_t seed) {
  if (base_class_count == 0) {
    throw CapacityError("plan: base session needs at least one class");
  }
  if (incremental > 0 && (ways == 0 || shots == 0)) {
    throw CapacityError("plan: ways and shots must be positive");
  }
  std::map<std::uint32_t, std::vector<std::size_t>> train_by_class;
  std::map<std::uint32_t, std::vector<std::size_t>> test_by_class;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    auto& bucket = dataset[i].split == Split::train ? train_by_class : test_by_class;
    bucket[dataset[i].label].push_back(i);
  }
  std::vector<std::uint32_t> classes;
  for (const auto& [id, idxs] : train_by_class) classes.push_back(id);
  const std::size_t needed = base_class_count + ways * incremental;
  if (classes.size() < needed) {
    throw CapacityError("plan: need " + std::to_string(needed) +
                        " classes, dataset provides " +
                        std::to_string(classes.size()) + " (short by " +
                        std::to_string(needed - classes.size()) + ")");
  }

  std::mt19937_64 class_rng(derive_seed(seed, 0x11));
  std::shuffle(classes.begin(), classes.end(), class_rng);

  SessionPlan<S> plan;
  plan.ways = ways;
  plan.shots = shots;
  plan.sessions.resize(1 + incremental);

  auto fill_test = [&](Session<S>& session) {
    for (std::uint32_t id : session.class_ids) {
      auto it = test_by_class.find(id);
      if (it == test_by_class.end()) continue;
      for (std::size_t idx : it->second) session.test.push_back(dataset[idx]);
    }
  };

  Session<S>& base = plan.sessions[0];
  base.index = 0;
  base.class_ids.assign(classes.begin(), classes.begin() + base_class_count);
  std::sort(base.class_ids.begin(), base.class_ids.end());
  for (std::uint32_t id : base.class_ids) {
    const auto& idxs = train_by_class.at(id);
    if (idxs.empty()) {
      throw CapacityError("plan: base class " + std::to_string(id) +
                          " has no train samples");
    }
    for (std::size_t idx : idxs) base.train.push_back(dataset[idx]);
  }
  fill_test(base);

  for (std::size_t t = 1; t <= incremental; ++t) {
    Session<S>& session = plan.sessions[t];
    session.index = t;
    const std::size_t off = base_class_count + (t - 1) * ways;
    session.class_ids.assign(classes.begin() + off, classes.begin() + off + ways);
    std::sort(session.class_ids.begin(), session.class_ids.end());
    for (std::uint32_t id : session.class_ids) {
      std::vector<std::size_t> idxs = train_by_class.at(id);
      if (idxs.size() < shots) {
        throw CapacityError("plan: class " + std::to_string(id) + " has " +
                            std::to_string(idxs.size()) + " train samples, needs " +
                            std::to_string(shots) + " (short by " +
                            std::to_string(shots - idxs.size()) + ")");
      }
      std::mt19937_64 shot_rng(derive_seed(seed, 0x20000 + id));
      std::shuffle(idxs.begin(), idxs.end(), shot_rng);
      for (std::size_t k = 0; k < shots; ++k) session.train.push_back(dataset[idxs[k]]);
    }
    fill_test(session);
  }
  return plan;
}

/// Test samples whose labels lie in the union of session label spaces 0..t.
template <typename S>
std::vector<LabeledSample<S>> cumulative_test_set(const SessionPlan<S>& plan,
                                                  std::size_t t) {
  if (t >= plan.sessions.size()) {
    throw ContractError("cumulative_test_set: session " + std::to_string(t) +
                        " out of range (plan has " +
                        std::to_string(plan.sessions.size()) + " sessions)");
  }
  std::vector<LabeledSample<S>> out;
  for (std::size_t j = 0; j <= t; ++j) {
    const auto& s = plan.sessions[j];
    out.insert(out.end(), s.test.begin(), s.test.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

namespace detail {

/// Argmax over cosine logits; ties resolve to the lowest class id.
template <typename S>
std::uint32_t predict(const Tensor<S>& z, const ClassifierState<S>& state) {
  Tensor<S> logits = cosine_logits(z, state);
  std::size_t best = 0;
  for (std::size_t j = 1; j < state.num_classes(); ++j) {
    if (logits[j] > logits[best] ||
        (logits[j] == logits[best] && state.class_ids[j] < state.class_ids[best])) {
      best = j;
    }
  }
  return state.class_ids[best];
}

}  // namespace detail

/// Fraction of test samples whose predicted class matches the label. The
/// reduction counts integers, so the result is independent of worker count.
template <typename S>
double evaluate(const EncoderModel<S>& model, const ClassifierState<S>& state,
                const std::vector<LabeledSample<S>>& testset,
                unsigned workers = 1) {
  if (testset.empty()) throw DomainError("evaluate: empty test set");
  for (const auto& sample : testset) {
    bool known = false;
    for (std::uint32_t id : state.class_ids) known |= (id == sample.label);
    if (!known) {
      throw ContractError("evaluate: label " + std::to_string(sample.label) +
                          " not present in the classifier");
    }
  }
  const std::size_t n = testset.size();
  auto count_range = [&](std::size_t lo, std::size_t hi) {
    std::size_t correct = 0;
    for (std::size_t i = lo; i < hi; ++i) {
      Tensor<S> z = encoder_forward(testset[i].image, model);
      if (detail::predict(z, state) == testset[i].label) ++correct;
    }
    return correct;
  };
  std::size_t correct = 0;
  if (workers <= 1) {
    correct = count_range(0, n);
  } else {
    const std::size_t parts = std::min<std::size_t>(workers, n);
    std::vector<std::size_t> counts(parts, 0);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < parts; ++w) {
      const std::size_t lo = n * w / parts, hi = n * (w + 1) / parts;
      pool.emplace_back([&, w, lo, hi] { counts[w] = count_range(lo, hi); });
    }
    for (auto& th : pool) th.join();
    for (std::size_t c : counts) correct += c;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Headline metrics from per-session accuracies: base and last accuracy,
/// session average, and the performance drop (base minus last).
inline SessionReport summarize(const std::vector<double>& per_session_accuracy) {
  if (per_session_accuracy.empty())
    throw DomainError("summarize: empty accuracy list");
  SessionReport report;
  report.per_session_accuracy = per_session_accuracy;
  report.s_base = per_session_accuracy.front();
  report.s_last = per_session_accuracy.back();
  double total = 0.0;
  for (double a : per_session_accuracy) total += a;
  report.s_avg = total / static_cast<double>(per_session_accuracy.size());
  report.pd = report.s_base - report.s_last;
  return report;
}

/// Audit/replay export: per-session class ids and sample counts.
template <typename S>
nlohmann::json plan_to_json(const SessionPlan<S>& plan) {
  nlohmann::json doc;
  doc["ways"] = plan.ways;
  doc["shots"] = plan.shots;
  doc["sessions"] = nlohmann::json::array();
  for (const auto& s : plan.sessions) {
    nlohmann::json row;
    row["index"] = s.index;
    row["class_ids"] = s.class_ids;
    row["train_count"] = s.train.size();
    row["test_count"] = s.test.size();
    doc["sessions"].push_back(row);
  }
  return doc;
}

}  // namespace deltavit
