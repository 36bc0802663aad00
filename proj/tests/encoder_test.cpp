#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <string>

#include "deltavit/deltavit.hpp"
#include "test_util.hpp"

using namespace deltavit;
using testutil::bits_equal;
using testutil::random_tensor;

namespace {

EncoderConfig tiny_config() {
  EncoderConfig cfg;
  cfg.image_size = 8;
  cfg.channels = 1;
  cfg.patch_size = 4;
  cfg.embed_dim = 8;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.mlp_hidden = 16;
  cfg.adapted_blocks = 2;
  return cfg;
}

Tensor<double> random_image(const EncoderConfig& cfg, std::mt19937_64& rng) {
  return random_tensor({cfg.channels, cfg.image_size, cfg.image_size}, rng, -1.0, 1.0);
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::path(::testing::TempDir()) / name;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config validation
// ---------------------------------------------------------------------------

TEST(EncoderConfig, RejectsIndivisiblePatch) {
  EncoderConfig cfg = tiny_config();
  cfg.image_size = 10;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(EncoderConfig, RejectsIndivisibleHeads) {
  EncoderConfig cfg = tiny_config();
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(EncoderConfig, RejectsAdaptedBlocksBeyondDepth) {
  EncoderConfig cfg = tiny_config();
  cfg.adapted_blocks = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(EncoderConfig, GeometryHelpers) {
  EncoderConfig cfg;  // 16x16, patch 4
  EXPECT_EQ(cfg.patch_count(), 16u);
  EXPECT_EQ(cfg.tokens(), 17u);
  EXPECT_EQ(cfg.patch_dim(), 16u);
  EXPECT_EQ(cfg.head_dim(), 8u);
}

TEST(EncoderConfig, AdaptedBlocksAreTheFinalOnes) {
  EncoderConfig cfg = tiny_config();
  cfg.depth = 4;
  cfg.adapted_blocks = 1;
  EXPECT_FALSE(block_is_adapted(cfg, 0));
  EXPECT_FALSE(block_is_adapted(cfg, 2));
  EXPECT_TRUE(block_is_adapted(cfg, 3));
  cfg.adapted_blocks = 0;
  for (std::size_t b = 0; b < 4; ++b) EXPECT_FALSE(block_is_adapted(cfg, b));
}

// ---------------------------------------------------------------------------
// Patch embedding
// ---------------------------------------------------------------------------

TEST(Patchify, OutputShape) {
  EncoderConfig cfg = tiny_config();  // 8x8 image, patch 4 -> P=4
  auto model = make_encoder<double>(cfg, 1);
  std::mt19937_64 rng(2);
  Tensor<double> seq = patchify_embed(random_image(cfg, rng), model);
  EXPECT_EQ(seq.shape(), (Shape{5, cfg.embed_dim}));
}

TEST(Patchify, SinglePatchDegenerateCase) {
  EncoderConfig cfg = tiny_config();
  cfg.image_size = 4;
  cfg.patch_size = 4;
  auto model = make_encoder<double>(cfg, 1);
  std::mt19937_64 rng(3);
  Tensor<double> seq = patchify_embed(random_image(cfg, rng), model);
  EXPECT_EQ(seq.dim(0), 2u);
}

TEST(Patchify, ZeroImageYieldsPositionalEncodings) {
  EncoderConfig cfg = tiny_config();
  auto model = make_encoder<double>(cfg, 4);
  Tensor<double> image =
      Tensor<double>::zeros({cfg.channels, cfg.image_size, cfg.image_size});
  Tensor<double> seq = patchify_embed(image, model);
  const auto& bb = model.backbone;
  for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
    EXPECT_EQ(seq.at(0, j), bb.cls_token[j] + bb.pos_embed.at(0, j));
  }
  for (std::size_t t = 1; t < cfg.tokens(); ++t) {
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
      EXPECT_EQ(seq.at(t, j), bb.pos_embed.at(t, j)) << t << "," << j;
    }
  }
}

TEST(Patchify, RasterPatchOrder) {
  EncoderConfig cfg = tiny_config();
  cfg.image_size = 4;
  cfg.patch_size = 2;
  cfg.embed_dim = 4;  // equals patch_dim -> identity projection possible
  cfg.heads = 2;
  cfg.mlp_hidden = 8;
  auto model = make_encoder<double>(cfg, 5);
  auto& bb = model.backbone;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) bb.patch_weight.at(i, j) = i == j ? 1.0 : 0.0;
  for (std::size_t i = 0; i < bb.pos_embed.numel(); ++i) bb.pos_embed[i] = 0.0;
  for (std::size_t i = 0; i < 4; ++i) bb.cls_token[i] = 0.0;

  Tensor<double> image = Tensor<double>::zeros({1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) image[i] = static_cast<double>(i);
  Tensor<double> seq = patchify_embed(image, model);
  // Patches walk the grid row-major; pixels within a patch are row-major too.
  const double expected[4][4] = {
      {0, 1, 4, 5}, {2, 3, 6, 7}, {8, 9, 12, 13}, {10, 11, 14, 15}};
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(seq.at(1 + p, k), expected[p][k]);
}

TEST(Patchify, WrongImageShapeThrows) {
  EncoderConfig cfg = tiny_config();
  auto model = make_encoder<double>(cfg, 1);
  Tensor<double> bad = Tensor<double>::zeros({1, 4, 4});
  EXPECT_THROW(patchify_embed(bad, model), ShapeError);
}

// ---------------------------------------------------------------------------
// QKV projections and additive updates
// ---------------------------------------------------------------------------

TEST(AttentionQkv, HandDeltaOracle) {
  EncoderConfig cfg;
  cfg.image_size = 2;
  cfg.patch_size = 2;
  cfg.embed_dim = 2;
  cfg.depth = 1;
  cfg.heads = 1;
  cfg.mlp_hidden = 4;
  cfg.adapted_blocks = 1;
  auto model = make_encoder<double>(cfg, 6);
  auto& blk = model.backbone.blocks[0];
  blk.wq = Tensor<double>::from_values({2, 2}, {1, 0, 0, 1});
  blk.bq = Tensor<double>::zeros({2});
  model.updates.dq[0] = Tensor<double>::from_values({2, 2}, {0, 1, 0, 0});

  Tensor<double> h = Tensor<double>::from_values({1, 2}, {1, 0});
  QkvProjection<double> qkv = attention_qkv(h, 0, model);
  EXPECT_EQ(qkv.q.at(0, 0), 1.0);
  EXPECT_EQ(qkv.q.at(0, 1), 1.0);
}

TEST(AttentionQkv, ZeroAdaptedBlocksIgnoresDeltaValues) {
  EncoderConfig cfg = tiny_config();
  cfg.adapted_blocks = 0;
  auto model = make_encoder<double>(cfg, 7);
  std::mt19937_64 rng(8);
  Tensor<double> h = random_tensor({3, cfg.embed_dim}, rng);
  QkvProjection<double> before = attention_qkv(h, cfg.depth - 1, model);
  for (auto& t : model.updates.dq) t = random_tensor({8, 8}, rng);
  QkvProjection<double> after = attention_qkv(h, cfg.depth - 1, model);
  EXPECT_TRUE(bits_equal(before.q, after.q));
  EXPECT_TRUE(bits_equal(before.k, after.k));
  EXPECT_TRUE(bits_equal(before.v, after.v));
}

TEST(AttentionQkv, ZeroDeltaMatchesDeltaFreeReference) {
  EncoderConfig cfg = tiny_config();
  auto adapted = make_encoder<double>(cfg, 9);
  EncoderConfig plain_cfg = cfg;
  plain_cfg.adapted_blocks = 0;
  auto plain = make_encoder<double>(plain_cfg, 9);
  std::mt19937_64 rng(10);
  Tensor<double> h = random_tensor({5, cfg.embed_dim}, rng);
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    QkvProjection<double> a = attention_qkv(h, b, adapted);
    QkvProjection<double> p = attention_qkv(h, b, plain);
    EXPECT_TRUE(bits_equal(a.q, p.q));
    EXPECT_TRUE(bits_equal(a.k, p.k));
    EXPECT_TRUE(bits_equal(a.v, p.v));
  }
}

TEST(AttentionQkv, BlockOutOfRangeThrows) {
  auto model = make_encoder<double>(tiny_config(), 1);
  Tensor<double> h = Tensor<double>::zeros({2, 8});
  EXPECT_THROW(attention_qkv(h, 2, model), IndexError);
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

TEST(Forward, OutputIsUnitNorm) {
  EncoderConfig cfg = tiny_config();
  auto model = make_encoder<double>(cfg, 11);
  std::mt19937_64 rng(12);
  for (int i = 0; i < 10; ++i) {
    Tensor<double> z = encoder_forward(random_image(cfg, rng), model);
    ASSERT_EQ(z.shape(), (Shape{cfg.embed_dim}));
    double sq = 0.0;
    for (std::size_t j = 0; j < z.numel(); ++j) sq += z[j] * z[j];
    EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-9);
  }
}

TEST(Forward, DeterministicBitIdentical) {
  EncoderConfig cfg = tiny_config();
  auto model = make_encoder<double>(cfg, 13);
  std::mt19937_64 rng(14);
  Tensor<double> image = random_image(cfg, rng);
  EXPECT_TRUE(bits_equal(encoder_forward(image, model), encoder_forward(image, model)));
}

TEST(Forward, ZeroDeltaMatchesDeltaFreeModelBitExactly) {
  EncoderConfig cfg = tiny_config();
  auto adapted = make_encoder<double>(cfg, 15);
  EncoderConfig plain_cfg = cfg;
  plain_cfg.adapted_blocks = 0;
  auto plain = make_encoder<double>(plain_cfg, 15);
  std::mt19937_64 rng(16);
  for (int i = 0; i < 10; ++i) {
    Tensor<double> image = random_image(cfg, rng);
    EXPECT_TRUE(bits_equal(encoder_forward(image, adapted),
                           encoder_forward(image, plain)));
  }
}

TEST(Forward, NonzeroDeltaChangesOutput) {
  EncoderConfig cfg = tiny_config();
  auto model = make_encoder<double>(cfg, 17);
  std::mt19937_64 rng(18);
  Tensor<double> image = random_image(cfg, rng);
  Tensor<double> before = encoder_forward(image, model);
  model.updates.dq[0] = random_tensor({8, 8}, rng, -0.05, 0.05);
  Tensor<double> after = encoder_forward(image, model);
  double diff = 0.0;
  for (std::size_t j = 0; j < before.numel(); ++j)
    diff = std::max(diff, std::abs(before[j] - after[j]));
  EXPECT_GT(diff, 1e-12);
}

TEST(Forward, MlpTargetDeltasBiteOnlyInMlpMode) {
  EncoderConfig cfg = tiny_config();
  cfg.update_target = UpdateTarget::mlp;
  auto model = make_encoder<double>(cfg, 19);
  std::mt19937_64 rng(20);
  Tensor<double> image = random_image(cfg, rng);
  Tensor<double> before = encoder_forward(image, model);
  model.updates.d1[0] = random_tensor({8, 16}, rng, -0.05, 0.05);
  Tensor<double> after = encoder_forward(image, model);
  double diff = 0.0;
  for (std::size_t j = 0; j < before.numel(); ++j)
    diff = std::max(diff, std::abs(before[j] - after[j]));
  EXPECT_GT(diff, 1e-12);
}

// ---------------------------------------------------------------------------
// Shared-gradient aggregation
// ---------------------------------------------------------------------------

TEST(SharedGradient, EqualsSumOfPerBlockGradients) {
  EncoderConfig cfg = tiny_config();  // depth 2, both adapted
  auto shared = make_encoder<double>(cfg, 21);
  EncoderConfig unshared_cfg = cfg;
  unshared_cfg.share_updates = false;
  auto unshared = make_encoder<double>(unshared_cfg, 21);
  ASSERT_EQ(unshared.updates.dq.size(), 2u);

  std::mt19937_64 rng(22);
  Tensor<double> dval = random_tensor({8, 8}, rng, -0.05, 0.05);
  shared.updates.dq[0] = dval.clone();
  for (auto& t : unshared.updates.dq) t = dval.clone();

  Tensor<double> image = random_image(cfg, rng);
  auto run = [&](EncoderModel<double>& model) {
    for_each_delta(model, [](Tensor<double>& t) {
      t.set_requires_grad(true);
      t.clear_grad();
    });
    Tape<double> tape;
    Tensor<double> loss = sum(encoder_forward(image, model, &tape), &tape);
    backward(loss, tape);
  };
  run(shared);
  run(unshared);

  const auto& gs = shared.updates.dq[0].grad();
  for (std::size_t i = 0; i < gs.size(); ++i) {
    const double per_block =
        unshared.updates.dq[0].grad()[i] + unshared.updates.dq[1].grad()[i];
    EXPECT_NEAR(gs[i], per_block, 1e-10) << i;
  }
}

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

TEST(ParamCounts, SharedAttentionIsThreeDSquared) {
  EncoderConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.embed_dim = 8;
  cfg.depth = 12;
  cfg.heads = 2;
  cfg.mlp_hidden = 32;
  cfg.adapted_blocks = 12;
  ParamCounts counts = trainable_parameter_count(cfg);
  EXPECT_EQ(counts.delta_params, 192u);
  EXPECT_EQ(counts.bias_params, 12u * 3u * 8u);
}

TEST(ParamCounts, SharedMlpIsEightDSquared) {
  EncoderConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.embed_dim = 8;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.mlp_hidden = 32;
  cfg.adapted_blocks = 2;
  cfg.update_target = UpdateTarget::mlp;
  ParamCounts counts = trainable_parameter_count(cfg);
  EXPECT_EQ(counts.delta_params, 512u);
  EXPECT_EQ(counts.bias_params, 2u * (32u + 8u));
}

TEST(ParamCounts, ZeroAdaptedBlocksZeroDeltas) {
  EncoderConfig cfg = tiny_config();
  cfg.adapted_blocks = 0;
  ParamCounts counts = trainable_parameter_count(cfg, 10);
  EXPECT_EQ(counts.delta_params, 0u);
  EXPECT_EQ(counts.bias_params, 0u);
  EXPECT_EQ(counts.classifier_params, 10u * cfg.embed_dim);
}

TEST(ParamCounts, UnsharedScalesWithAdaptedBlocks) {
  EncoderConfig cfg = tiny_config();
  cfg.share_updates = false;
  ParamCounts counts = trainable_parameter_count(cfg);
  EXPECT_EQ(counts.delta_params, 2u * 3u * 64u);
}

TEST(ParamCounts, ModelStorageMatchesAccounting) {
  EncoderConfig cfg = tiny_config();
  auto model = make_encoder<double>(cfg, 23);
  std::size_t delta_total = 0;
  for_each_delta(model, [&](Tensor<double>& t) { delta_total += t.numel(); });
  EXPECT_EQ(delta_total, trainable_parameter_count(cfg).delta_params);
  std::size_t bias_total = 0;
  for_each_adapted_bias(model, [&](Tensor<double>& t) { bias_total += t.numel(); });
  EXPECT_EQ(bias_total, trainable_parameter_count(cfg).bias_params);
}

// ---------------------------------------------------------------------------
// Parameter enumeration and digests
// ---------------------------------------------------------------------------

TEST(VisitParameters, NamesAreUniqueAndCountMatches) {
  EncoderConfig cfg = tiny_config();
  auto model = make_encoder<double>(cfg, 24);
  std::set<std::string> names;
  std::size_t count = 0;
  visit_parameters(model, [&](const std::string& name, Tensor<double>&) {
    names.insert(name);
    ++count;
  });
  EXPECT_EQ(count, 4u + 16u * cfg.depth + 3u);  // shared attention deltas
  EXPECT_EQ(names.size(), count);
}

TEST(Digest, ChangesWhenAnyParameterChanges) {
  auto model = make_encoder<double>(tiny_config(), 25);
  const std::uint64_t before = encoder_digest(model);
  model.backbone.blocks[1].w2[3] += 1e-9;
  EXPECT_NE(encoder_digest(model), before);
}

TEST(Digest, BackboneDigestIgnoresTrainableParts) {
  auto model = make_encoder<double>(tiny_config(), 26);
  const std::uint64_t full = encoder_digest(model);
  const std::uint64_t backbone = backbone_digest(model);

  model.updates.dq[0][5] = 0.25;           // trainable delta
  model.backbone.blocks[1].bq[2] = 0.5;    // adapted target bias
  EXPECT_EQ(backbone_digest(model), backbone);
  EXPECT_NE(encoder_digest(model), full);

  model.backbone.blocks[0].wo[0] += 1.0;  // frozen backbone weight
  EXPECT_NE(backbone_digest(model), backbone);
}

TEST(Digest, UnadaptedBiasCountsAsBackbone) {
  EncoderConfig cfg = tiny_config();
  cfg.adapted_blocks = 1;  // block 0 stays unadapted
  auto model = make_encoder<double>(cfg, 27);
  const std::uint64_t backbone = backbone_digest(model);
  model.backbone.blocks[0].bq[0] = 0.125;
  EXPECT_NE(backbone_digest(model), backbone);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

TEST(Checkpoint, EncoderRoundTripIsBitExact) {
  EncoderConfig cfg = tiny_config();
  cfg.update_target = UpdateTarget::mlp;
  cfg.share_updates = false;
  cfg.layer_norm_eps = 1e-5;
  auto model = make_encoder<double>(cfg, 28);
  std::mt19937_64 rng(29);
  model.updates.d1[0] = random_tensor({8, 16}, rng, -0.1, 0.1);

  const auto path = temp_file("encoder_roundtrip.bin");
  save_encoder(model, path.string());
  auto loaded = load_encoder<double>(path.string());

  EXPECT_EQ(loaded.config.update_target, UpdateTarget::mlp);
  EXPECT_FALSE(loaded.config.share_updates);
  EXPECT_EQ(loaded.config.layer_norm_eps, 1e-5);
  EXPECT_EQ(encoder_digest(loaded), encoder_digest(model));

  Tensor<double> image = random_image(cfg, rng);
  EXPECT_TRUE(bits_equal(encoder_forward(image, loaded), encoder_forward(image, model)));
  std::filesystem::remove(path);
}

TEST(Checkpoint, ScalarKindMismatchThrows) {
  auto model = make_encoder<double>(tiny_config(), 30);
  const auto path = temp_file("encoder_kind.bin");
  save_encoder(model, path.string());
  EXPECT_THROW(load_encoder<float>(path.string()), IoError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, BadMagicThrows) {
  const auto path = temp_file("not_a_checkpoint.bin");
  {
    std::ofstream out(path, std::ios::binary);
    out << "this is not a checkpoint at all";
  }
  EXPECT_THROW(load_encoder<double>(path.string()), IoError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, TruncatedFileThrows) {
  auto model = make_encoder<double>(tiny_config(), 31);
  const auto path = temp_file("encoder_trunc.bin");
  save_encoder(model, path.string());
  const auto full = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, full / 2);
  EXPECT_THROW(load_encoder<double>(path.string()), IoError);
  std::filesystem::remove(path);
}
