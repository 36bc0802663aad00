#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <vector>

#include "deltavit/deltavit.hpp"
#include "test_util.hpp"

using namespace deltavit;
using testutil::bits_equal;
using testutil::random_unit_vector;

namespace {

constexpr double kTau = 16.0;

ClassifierState<double> basis_classifier(std::size_t classes, std::size_t d) {
  ClassifierState<double> state =
      make_classifier<double>([&] {
        std::vector<std::uint32_t> ids(classes);
        for (std::size_t i = 0; i < classes; ++i) ids[i] = static_cast<std::uint32_t>(i);
        return ids;
      }(), d, kTau, 1);
  for (std::size_t i = 0; i < state.weights.numel(); ++i) state.weights[i] = 0.0;
  for (std::size_t i = 0; i < classes; ++i) state.weights.at(i, i) = 1.0;
  return state;
}

double squared_error_sum(const Tensor<double>& v,
                         const std::vector<Tensor<double>>& features) {
  double total = 0.0;
  for (const auto& z : features) {
    for (std::size_t j = 0; j < v.numel(); ++j) {
      const double diff = v[j] - z[j];
      total += 0.5 * diff * diff;
    }
  }
  return total;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::path(::testing::TempDir()) / name;
}

}  // namespace

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

TEST(MakeClassifier, DuplicateClassIdThrows) {
  EXPECT_THROW(make_classifier<double>({1, 2, 1}, 4, kTau, 0), ContractError);
}

TEST(MakeClassifier, NonPositiveTemperatureThrows) {
  EXPECT_THROW(make_classifier<double>({0, 1}, 4, 0.0, 0), ContractError);
  EXPECT_THROW(make_classifier<double>({0, 1}, 4, -1.0, 0), ContractError);
}

TEST(MakeClassifier, SeededInitIsDeterministic) {
  auto a = make_classifier<double>({0, 1, 2}, 8, kTau, 42);
  auto b = make_classifier<double>({0, 1, 2}, 8, kTau, 42);
  auto c = make_classifier<double>({0, 1, 2}, 8, kTau, 43);
  EXPECT_TRUE(bits_equal(a.weights, b.weights));
  bool differs = false;
  for (std::size_t i = 0; i < a.weights.numel(); ++i)
    differs |= a.weights[i] != c.weights[i];
  EXPECT_TRUE(differs);
}

// ---------------------------------------------------------------------------
// Cosine logits
// ---------------------------------------------------------------------------

TEST(CosineLogits, SelfSimilarityHitsTemperature) {
  auto state = basis_classifier(3, 4);
  Tensor<double> z = Tensor<double>::from_values({4}, {0, 1, 0, 0});
  Tensor<double> logits = cosine_logits(z, state);
  EXPECT_NEAR(logits[1], kTau, 1e-9);
  EXPECT_NEAR(logits[0], 0.0, 1e-9);
  EXPECT_NEAR(logits[2], 0.0, 1e-9);
}

TEST(CosineLogits, DiagonalWeightClosedForm) {
  auto state = basis_classifier(1, 2);
  state.weights.at(0, 0) = 1.0;
  state.weights.at(0, 1) = 1.0;  // unnormalized on purpose
  Tensor<double> z = Tensor<double>::from_values({2}, {1, 0});
  Tensor<double> logits = cosine_logits(z, state);
  EXPECT_NEAR(logits[0], 11.313708498984761, 1e-12);  // 16 / sqrt(2)
}

TEST(CosineLogits, BoundedByTemperature) {
  auto state = make_classifier<double>({0, 1, 2, 3}, 16, kTau, 5);
  std::mt19937_64 rng(6);
  for (int i = 0; i < 20; ++i) {
    Tensor<double> logits = cosine_logits(random_unit_vector(16, rng), state);
    for (std::size_t j = 0; j < logits.numel(); ++j)
      EXPECT_LE(std::abs(logits[j]), kTau + 1e-9);
  }
}

TEST(CosineLogits, InvariantToWeightScale) {
  auto state = make_classifier<double>({0, 1, 2}, 8, kTau, 7);
  std::mt19937_64 rng(8);
  Tensor<double> z = random_unit_vector(8, rng);
  Tensor<double> before = cosine_logits(z, state);
  for (std::size_t j = 0; j < 8; ++j) state.weights.at(1, j) *= 3.5;
  Tensor<double> after = cosine_logits(z, state);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(after[j], before[j], 1e-9);
}

TEST(CosineLogits, NonUnitFeatureThrows) {
  auto state = basis_classifier(2, 4);
  Tensor<double> z = Tensor<double>::from_values({4}, {1, 1, 0, 0});
  EXPECT_THROW(cosine_logits(z, state), ContractError);
}

TEST(CosineLogits, ZeroWeightRowIsEpsGuarded) {
  auto state = basis_classifier(2, 4);
  for (std::size_t j = 0; j < 4; ++j) state.weights.at(1, j) = 0.0;
  Tensor<double> z = Tensor<double>::from_values({4}, {1, 0, 0, 0});
  Tensor<double> logits = cosine_logits(z, state);
  EXPECT_TRUE(std::isfinite(logits[1]));
  EXPECT_EQ(logits[1], 0.0);
}

TEST(CosineLogits, BatchRowsMatchSingleCalls) {
  auto state = make_classifier<double>({0, 1, 2, 3, 4}, 8, kTau, 9);
  std::mt19937_64 rng(10);
  std::vector<Tensor<double>> zs;
  for (int i = 0; i < 4; ++i) zs.push_back(random_unit_vector(8, rng));
  Tensor<double> batch = stack_rows(zs);
  Tensor<double> logits = cosine_logits_batch(batch, state);
  for (std::size_t i = 0; i < zs.size(); ++i) {
    Tensor<double> single = cosine_logits(zs[i], state);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(logits.at(i, j), single[j]);
  }
}

// ---------------------------------------------------------------------------
// Prototype fitting
// ---------------------------------------------------------------------------

TEST(FitPrototype, SinglePointIsNormalizedCopy) {
  Tensor<double> v = Tensor<double>::from_values({3}, {3, 0, 4});
  Tensor<double> proto = fit_prototype<double>({v});
  EXPECT_NEAR(proto[0], 0.6, 1e-12);
  EXPECT_NEAR(proto[1], 0.0, 1e-12);
  EXPECT_NEAR(proto[2], 0.8, 1e-12);
}

TEST(FitPrototype, RepeatedCopiesMatchSinglePoint) {
  std::mt19937_64 rng(11);
  Tensor<double> v = random_unit_vector(6, rng);
  Tensor<double> one = fit_prototype<double>({v});
  Tensor<double> many = fit_prototype<double>({v, v, v, v, v});
  for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(many[j], one[j], 1e-12);
}

TEST(FitPrototype, TwoBasisVectorsGiveDiagonal) {
  Tensor<double> e0 = Tensor<double>::from_values({2}, {1, 0});
  Tensor<double> e1 = Tensor<double>::from_values({2}, {0, 1});
  Tensor<double> proto = fit_prototype<double>({e0, e1});
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  EXPECT_NEAR(proto[0], inv_sqrt2, 1e-12);
  EXPECT_NEAR(proto[1], inv_sqrt2, 1e-12);
}

TEST(FitPrototype, EmptyFeatureSetThrows) {
  EXPECT_THROW(fit_prototype<double>({}), DomainError);
}

TEST(FitPrototype, ShapeMismatchThrows) {
  Tensor<double> a = Tensor<double>::zeros({3});
  Tensor<double> b = Tensor<double>::zeros({4});
  EXPECT_THROW(fit_prototype<double>({a, b}), ShapeError);
}

TEST(FitPrototype, MeanMinimizesHalfSumSquaredError) {
  std::mt19937_64 rng(12);
  const std::size_t d = 8;
  std::vector<Tensor<double>> features;
  for (int i = 0; i < 7; ++i) features.push_back(random_unit_vector(d, rng));

  Tensor<double> mean = Tensor<double>::zeros({d});
  for (const auto& z : features)
    for (std::size_t j = 0; j < d; ++j) mean[j] += z[j] / double(features.size());

  // The plain mean must beat every small perturbation of itself; the fitted
  // prototype must then be exactly that mean rescaled to unit norm.
  const double at_mean = squared_error_sum(mean, features);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor<double> eps = Tensor<double>::zeros({d});
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      eps[j] = gauss(rng);
      sq += eps[j] * eps[j];
    }
    Tensor<double> moved = mean.clone();
    for (std::size_t j = 0; j < d; ++j) moved[j] += eps[j] * (1e-3 / std::sqrt(sq));
    EXPECT_LE(at_mean, squared_error_sum(moved, features));
  }

  double norm = 0.0;
  for (std::size_t j = 0; j < d; ++j) norm += mean[j] * mean[j];
  norm = std::sqrt(norm);
  Tensor<double> proto = fit_prototype(features);
  for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(proto[j], mean[j] / norm, 1e-12);
}

// ---------------------------------------------------------------------------
// Base replacement
// ---------------------------------------------------------------------------

TEST(ReplaceBase, RowsBecomePrototypes) {
  auto state = make_classifier<double>({2, 5, 9}, 6, kTau, 13);
  std::mt19937_64 rng(14);
  ClassFeatureMap<double> per_class;
  for (std::uint32_t id : {2u, 5u, 9u})
    for (int i = 0; i < 4; ++i) per_class[id].push_back(random_unit_vector(6, rng));

  auto next = replace_base_classifier(state, per_class);
  EXPECT_EQ(next.class_ids, state.class_ids);
  EXPECT_EQ(next.temperature, state.temperature);
  for (std::size_t row = 0; row < 3; ++row) {
    Tensor<double> proto = fit_prototype(per_class.at(state.class_ids[row]));
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(next.weights.at(row, j), proto[j]);
  }
  // The input state is left untouched (value semantics).
  auto fresh = make_classifier<double>({2, 5, 9}, 6, kTau, 13);
  EXPECT_TRUE(bits_equal(state.weights, fresh.weights));
}

TEST(ReplaceBase, MatchesMeanNormalizeOracle) {
  auto state = make_classifier<double>({0, 1, 2}, 8, kTau, 15);
  std::mt19937_64 rng(16);
  ClassFeatureMap<double> per_class;
  for (std::uint32_t id : {0u, 1u, 2u})
    for (int i = 0; i < 5; ++i) per_class[id].push_back(random_unit_vector(8, rng));

  auto next = replace_base_classifier(state, per_class);
  for (std::size_t row = 0; row < 3; ++row) {
    const auto& feats = per_class.at(state.class_ids[row]);
    // Normalizing the feature sum gives the same direction as the mean.
    std::vector<double> sum(8, 0.0);
    for (const auto& z : feats)
      for (std::size_t j = 0; j < 8; ++j) sum[j] += z[j];
    double norm = 0.0;
    for (double s : sum) norm += s * s;
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < 8; ++j)
      EXPECT_NEAR(next.weights.at(row, j), sum[j] / norm, 1e-9);
  }
}

TEST(ReplaceBase, MissingClassThrowsNamingClass) {
  auto state = make_classifier<double>({3, 7}, 4, kTau, 17);
  std::mt19937_64 rng(18);
  ClassFeatureMap<double> per_class;
  per_class[3].push_back(random_unit_vector(4, rng));
  try {
    replace_base_classifier(state, per_class);
    FAIL() << "expected ContractError";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("7"), std::string::npos);
  }
}

TEST(ReplaceBase, UnknownExtraClassThrows) {
  auto state = make_classifier<double>({3, 7}, 4, kTau, 19);
  std::mt19937_64 rng(20);
  ClassFeatureMap<double> per_class;
  for (std::uint32_t id : {3u, 7u, 11u})
    per_class[id].push_back(random_unit_vector(4, rng));
  EXPECT_THROW(replace_base_classifier(state, per_class), ContractError);
}

TEST(ReplaceBase, IdempotentOnSameFeatures) {
  auto state = make_classifier<double>({0, 1}, 4, kTau, 21);
  std::mt19937_64 rng(22);
  ClassFeatureMap<double> per_class;
  for (std::uint32_t id : {0u, 1u})
    for (int i = 0; i < 3; ++i) per_class[id].push_back(random_unit_vector(4, rng));
  auto once = replace_base_classifier(state, per_class);
  auto twice = replace_base_classifier(once, per_class);
  EXPECT_TRUE(bits_equal(once.weights, twice.weights));
}

// ---------------------------------------------------------------------------
// Incremental extension
// ---------------------------------------------------------------------------

TEST(AppendClasses, EmptyMapIsNoOp) {
  auto state = make_classifier<double>({0, 1, 2}, 4, kTau, 23);
  auto next = append_classes(state, ClassFeatureMap<double>{});
  EXPECT_EQ(next.class_ids, state.class_ids);
  EXPECT_TRUE(bits_equal(next.weights, state.weights));
}

TEST(AppendClasses, PreservesExistingRowsBitExact) {
  auto state = make_classifier<double>({0, 1, 2}, 8, kTau, 24);
  std::mt19937_64 rng(25);
  ClassFeatureMap<double> per_class;
  for (std::uint32_t id : {10u, 11u})
    for (int i = 0; i < 2; ++i) per_class[id].push_back(random_unit_vector(8, rng));

  auto next = append_classes(state, per_class);
  ASSERT_EQ(next.num_classes(), 5u);
  for (std::size_t row = 0; row < 3; ++row)
    for (std::size_t j = 0; j < 8; ++j)
      EXPECT_EQ(next.weights.at(row, j), state.weights.at(row, j));

  // Logits on the old classes are bit-identical before and after extension.
  Tensor<double> z = random_unit_vector(8, rng);
  Tensor<double> before = cosine_logits(z, state);
  Tensor<double> after = cosine_logits(z, next);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(after[j], before[j]);
}

TEST(AppendClasses, AppendsInAscendingIdOrder) {
  auto state = make_classifier<double>({4, 2}, 4, kTau, 26);
  std::mt19937_64 rng(27);
  ClassFeatureMap<double> per_class;
  for (std::uint32_t id : {9u, 6u, 8u})
    per_class[id].push_back(random_unit_vector(4, rng));
  auto next = append_classes(state, per_class);
  const std::vector<std::uint32_t> want = {4, 2, 6, 8, 9};
  EXPECT_EQ(next.class_ids, want);
}

TEST(AppendClasses, OverlappingIdThrows) {
  auto state = make_classifier<double>({0, 1}, 4, kTau, 28);
  std::mt19937_64 rng(29);
  ClassFeatureMap<double> per_class;
  per_class[1].push_back(random_unit_vector(4, rng));
  EXPECT_THROW(append_classes(state, per_class), ContractError);
}

TEST(AppendClasses, FiveWayRowsMatchPrototypes) {
  auto state = make_classifier<double>({0}, 6, kTau, 30);
  std::mt19937_64 rng(31);
  ClassFeatureMap<double> per_class;
  for (std::uint32_t id = 1; id <= 5; ++id)
    for (int i = 0; i < 3; ++i) per_class[id].push_back(random_unit_vector(6, rng));
  auto next = append_classes(state, per_class);
  ASSERT_EQ(next.num_classes(), 6u);
  for (std::uint32_t id = 1; id <= 5; ++id) {
    Tensor<double> proto = fit_prototype(per_class.at(id));
    const std::size_t row = next.row_of(id);
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(next.weights.at(row, j), proto[j]);
  }
}

// ---------------------------------------------------------------------------
// Nearest-prototype behavior on well-separated clusters
// ---------------------------------------------------------------------------

TEST(NearestPrototype, PerfectAccuracyOnSeparatedClusters) {
  const std::size_t d = 8;
  std::mt19937_64 rng(32);
  std::uniform_real_distribution<double> jitter(-0.005, 0.005);

  // Three orthogonal cluster directions; samples are tiny perturbations.
  ClassFeatureMap<double> per_class;
  std::vector<std::pair<std::uint32_t, Tensor<double>>> samples;
  for (std::uint32_t c = 0; c < 3; ++c) {
    for (int i = 0; i < 20; ++i) {
      Tensor<double> v = Tensor<double>::zeros({d});
      v[c] = 1.0;
      for (std::size_t j = 0; j < d; ++j) v[j] += jitter(rng);
      double norm = 0.0;
      for (std::size_t j = 0; j < d; ++j) norm += v[j] * v[j];
      norm = std::sqrt(norm);
      for (std::size_t j = 0; j < d; ++j) v[j] /= norm;
      per_class[c].push_back(v);
      samples.emplace_back(c, v);
    }
  }

  // Premise checks: cluster means nearly orthogonal, members tight.
  std::vector<Tensor<double>> protos;
  for (std::uint32_t c = 0; c < 3; ++c) protos.push_back(fit_prototype(per_class[c]));
  const double cos20 = std::cos(20.0 * std::acos(-1.0) / 180.0);
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t b = a + 1; b < 3; ++b) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += protos[a][j] * protos[b][j];
      ASSERT_LT(dot, 0.5);
    }
  }
  for (const auto& [label, z] : samples) {
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) dot += protos[label][j] * z[j];
    ASSERT_GT(dot, cos20);
  }

  auto state = replace_base_classifier(make_classifier<double>({0, 1, 2}, d, kTau, 33),
                                       per_class);
  std::size_t correct = 0;
  for (const auto& [label, z] : samples) {
    Tensor<double> logits = cosine_logits(z, state);
    std::size_t best = 0;
    for (std::size_t j = 1; j < 3; ++j)
      if (logits[j] > logits[best]) best = j;
    correct += (state.class_ids[best] == label);
  }
  EXPECT_EQ(correct, samples.size());
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

TEST(ClassifierCheckpoint, RoundTripIsBitExact) {
  auto state = make_classifier<double>({5, 1, 12}, 8, 12.5, 34);
  const auto path = temp_file("classifier_roundtrip.bin");
  save_classifier(state, path.string());
  auto loaded = load_classifier<double>(path.string());
  EXPECT_EQ(loaded.temperature, state.temperature);
  EXPECT_EQ(loaded.class_ids, state.class_ids);
  EXPECT_TRUE(bits_equal(loaded.weights, state.weights));
  std::filesystem::remove(path);
}

TEST(ClassifierCheckpoint, ScalarKindMismatchThrows) {
  auto state = make_classifier<double>({0, 1}, 4, kTau, 35);
  const auto path = temp_file("classifier_kind.bin");
  save_classifier(state, path.string());
  EXPECT_THROW(load_classifier<float>(path.string()), IoError);
  std::filesystem::remove(path);
}

TEST(ClassifierCheckpoint, WrongMagicThrows) {
  auto model = make_encoder<double>(EncoderConfig{}, 36);
  const auto path = temp_file("encoder_as_classifier.bin");
  save_encoder(model, path.string());
  EXPECT_THROW(load_classifier<double>(path.string()), IoError);
  std::filesystem::remove(path);
}
