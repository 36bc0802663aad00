#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "deltavit/common.hpp"
#include "deltavit/ops.hpp"
#include "deltavit/tape.hpp"
#include "deltavit/tensor.hpp"

// ViT-style feature extractor: a frozen randomly initialized backbone plus
// zero-initialized additive updates injected into the QKV projections (or,
// alternatively, the MLP weights) of the final n blocks. The update matrices
// can be shared across all adapted blocks, in which case gradients from every
// adapted block accumulate into the single shared instance.

namespace deltavit {

enum class UpdateTarget { attention_qkv, mlp };

struct EncoderConfig {
  std::size_t image_size = 16;
  std::size_t channels = 1;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 32;
  std::size_t depth = 6;
  std::size_t heads = 4;
  std::size_t mlp_hidden = 128;
  std::size_t adapted_blocks = 6;  // counted from the final block
  UpdateTarget update_target = UpdateTarget::attention_qkv;
  bool share_updates = true;
  double layer_norm_eps = 1e-6;

  std::size_t patch_grid() const { return image_size / patch_size; }
  std::size_t patch_count() const { return patch_grid() * patch_grid(); }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t tokens() const { return 1 + patch_count(); }
  std::size_t head_dim() const { return embed_dim / heads; }

  void validate() const {
    if (image_size == 0 || patch_size == 0 || channels == 0)
      throw ConfigError("encoder: image_size, patch_size, channels must be positive");
    if (image_size % patch_size != 0)
      throw ConfigError("encoder: image_size must be divisible by patch_size");
    if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0)
      throw ConfigError("encoder: embed_dim must be a positive multiple of heads");
    if (depth == 0) throw ConfigError("encoder: depth must be positive");
    if (mlp_hidden == 0) throw ConfigError("encoder: mlp_hidden must be positive");
    if (adapted_blocks > depth)
      throw ConfigError("encoder: adapted_blocks must be in [0, depth]");
    if (!(layer_norm_eps > 0))
      throw ConfigError("encoder: layer_norm_eps must be positive");
  }
};

inline bool block_is_adapted(const EncoderConfig& cfg, std::size_t block) {
  return block >= cfg.depth - cfg.adapted_blocks;
}

template <typename S>
struct BlockParams {
  Tensor<S> ln1_gain, ln1_shift;
  Tensor<S> wq, wk, wv;  // [d x d], applied as y = x * W
  Tensor<S> bq, bk, bv;  // [d]
  Tensor<S> wo, bo;      // attention output projection
  Tensor<S> ln2_gain, ln2_shift;
  Tensor<S> w1, b1;  // [d x mlp_hidden], [mlp_hidden]
  Tensor<S> w2, b2;  // [mlp_hidden x d], [d]
};

template <typename S>
struct BackboneParams {
  Tensor<S> patch_weight;  // [patch_dim x d]
  Tensor<S> patch_bias;    // [d]
  Tensor<S> cls_token;     // [d]
  Tensor<S> pos_embed;     // [(1+P) x d]
  std::vector<BlockParams<S>> blocks;
};

// Zero-initialized additive update matrices. With share_updates, each vector
// holds exactly one instance regardless of adapted_blocks; otherwise one per
// adapted block, indexed from the first adapted block.
template <typename S>
struct AdditiveUpdates {
  std::vector<Tensor<S>> dq, dk, dv;  // attention_qkv target, each [d x d]
  std::vector<Tensor<S>> d1, d2;      // mlp target, [d x m] and [m x d]
};

template <typename S>
struct EncoderModel {
  EncoderConfig config;
  BackboneParams<S> backbone;
  AdditiveUpdates<S> updates;

  std::size_t delta_index(std::size_t block) const {
    return config.share_updates ? 0
                                : block - (config.depth - config.adapted_blocks);
  }
};

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

/// Builds a frozen backbone from a seeded Gaussian scheme (std 0.02 weights,
/// zero biases, unit layer-norm gains) plus zero additive updates. The draw
/// order is fixed: patch weights, [CLS], positions, then per block the
/// attention and MLP weight matrices.
template <typename S>
EncoderModel<S> make_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 0.02);
  auto randn = [&](Shape shape) {
    Tensor<S> t = Tensor<S>::zeros(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = S(gauss(rng));
    return t;
  };

  const std::size_t d = cfg.embed_dim, m = cfg.mlp_hidden;
  EncoderModel<S> model;
  model.config = cfg;
  auto& bb = model.backbone;
  bb.patch_weight = randn({cfg.patch_dim(), d});
  bb.patch_bias = Tensor<S>::zeros({d});
  bb.cls_token = randn({d});
  bb.pos_embed = randn({cfg.tokens(), d});
  bb.blocks.resize(cfg.depth);
  for (auto& blk : bb.blocks) {
    blk.ln1_gain = Tensor<S>::full({d}, S(1));
    blk.ln1_shift = Tensor<S>::zeros({d});
    blk.wq = randn({d, d});
    blk.wk = randn({d, d});
    blk.wv = randn({d, d});
    blk.bq = Tensor<S>::zeros({d});
    blk.bk = Tensor<S>::zeros({d});
    blk.bv = Tensor<S>::zeros({d});
    blk.wo = randn({d, d});
    blk.bo = Tensor<S>::zeros({d});
    blk.ln2_gain = Tensor<S>::full({d}, S(1));
    blk.ln2_shift = Tensor<S>::zeros({d});
    blk.w1 = randn({d, m});
    blk.b1 = Tensor<S>::zeros({m});
    blk.w2 = randn({m, d});
    blk.b2 = Tensor<S>::zeros({d});
  }

  // With shared updates exactly one instance of each delta matrix exists,
  // even when no block is adapted; unshared mode stores one per adapted block.
  const std::size_t slots = cfg.share_updates ? 1 : cfg.adapted_blocks;
  auto& up = model.updates;
  if (cfg.update_target == UpdateTarget::attention_qkv) {
    for (std::size_t i = 0; i < slots; ++i) {
      up.dq.push_back(Tensor<S>::zeros({d, d}));
      up.dk.push_back(Tensor<S>::zeros({d, d}));
      up.dv.push_back(Tensor<S>::zeros({d, d}));
    }
  } else {
    for (std::size_t i = 0; i < slots; ++i) {
      up.d1.push_back(Tensor<S>::zeros({d, m}));
      up.d2.push_back(Tensor<S>::zeros({m, d}));
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Splits an image into patches, embeds them, prepends the [CLS] token and
/// adds positional encodings. Output is [(1+P) x d] with the [CLS] row first.
template <typename S>
Tensor<S> patchify_embed(const Tensor<S>& image, const EncoderModel<S>& model,
                         Tape<S>* tape = nullptr) {
  const auto& cfg = model.config;
  const Shape expected{cfg.channels, cfg.image_size, cfg.image_size};
  if (image.shape() != expected) {
    throw ShapeError("patchify_embed: image shape " + shape_str(image.shape()) +
                     " does not match configured " + shape_str(expected));
  }
  const std::size_t g = cfg.patch_grid(), ps = cfg.patch_size;
  const std::size_t pdim = cfg.patch_dim(), pcount = cfg.patch_count();
  Tensor<S> patches = Tensor<S>::zeros({pcount, pdim});
  for (std::size_t py = 0; py < g; ++py) {
    for (std::size_t px = 0; px < g; ++px) {
      const std::size_t p = py * g + px;
      std::size_t k = 0;
      for (std::size_t c = 0; c < cfg.channels; ++c) {
        for (std::size_t dy = 0; dy < ps; ++dy) {
          for (std::size_t dx = 0; dx < ps; ++dx) {
            const std::size_t row = py * ps + dy, col = px * ps + dx;
            patches.at(p, k++) =
                image[(c * cfg.image_size + row) * cfg.image_size + col];
          }
        }
      }
    }
  }
  Tensor<S> tokens = add_rowvec(matmul(patches, model.backbone.patch_weight, tape),
                                model.backbone.patch_bias, tape);
  Tensor<S> cls_row = reshape(model.backbone.cls_token, {1, cfg.embed_dim}, tape);
  Tensor<S> seq = concat_rows(cls_row, tokens, tape);
  return add(seq, model.backbone.pos_embed, tape);
}

template <typename S>
struct QkvProjection {
  Tensor<S> q, k, v;
};

/// QKV projections for one block. Adapted blocks add the trainable update to
/// the frozen weight matrix while keeping the block's own bias; other blocks
/// use the frozen weights directly.
template <typename S>
QkvProjection<S> attention_qkv(const Tensor<S>& h, std::size_t block,
                               const EncoderModel<S>& model,
                               Tape<S>* tape = nullptr) {
  const auto& cfg = model.config;
  if (block >= cfg.depth) {
    throw IndexError("attention_qkv: block " + std::to_string(block) +
                     " out of range for depth " + std::to_string(cfg.depth));
  }
  const auto& blk = model.backbone.blocks[block];
  const bool adapted = block_is_adapted(cfg, block) &&
                       cfg.update_target == UpdateTarget::attention_qkv;
  Tensor<S> wq = blk.wq, wk = blk.wk, wv = blk.wv;
  if (adapted) {
    const std::size_t s = model.delta_index(block);
    wq = add(blk.wq, model.updates.dq[s], tape);
    wk = add(blk.wk, model.updates.dk[s], tape);
    wv = add(blk.wv, model.updates.dv[s], tape);
  }
  QkvProjection<S> out;
  out.q = add_rowvec(matmul(h, wq, tape), blk.bq, tape);
  out.k = add_rowvec(matmul(h, wk, tape), blk.bk, tape);
  out.v = add_rowvec(matmul(h, wv, tape), blk.bv, tape);
  return out;
}

namespace detail {

template <typename S>
Tensor<S> multi_head_attention(const Tensor<S>& x, std::size_t block,
                               const EncoderModel<S>& model, Tape<S>* tape) {
  const auto& cfg = model.config;
  const auto& blk = model.backbone.blocks[block];
  QkvProjection<S> qkv = attention_qkv(x, block, model, tape);
  const std::size_t dh = cfg.head_dim();
  const S att_scale = S(1) / S(std::sqrt(static_cast<double>(dh)));
  std::vector<Tensor<S>> head_outputs;
  head_outputs.reserve(cfg.heads);
  for (std::size_t hidx = 0; hidx < cfg.heads; ++hidx) {
    Tensor<S> qh = slice_cols(qkv.q, hidx * dh, dh, tape);
    Tensor<S> kh = slice_cols(qkv.k, hidx * dh, dh, tape);
    Tensor<S> vh = slice_cols(qkv.v, hidx * dh, dh, tape);
    Tensor<S> scores =
        scale(matmul(qh, transpose(kh, tape), tape), att_scale, tape);
    Tensor<S> attn = softmax(scores, tape);
    head_outputs.push_back(matmul(attn, vh, tape));
  }
  Tensor<S> merged = concat_cols(head_outputs, tape);
  return add_rowvec(matmul(merged, blk.wo, tape), blk.bo, tape);
}

template <typename S>
Tensor<S> mlp_forward(const Tensor<S>& x, std::size_t block,
                      const EncoderModel<S>& model, Tape<S>* tape) {
  const auto& cfg = model.config;
  const auto& blk = model.backbone.blocks[block];
  const bool adapted =
      block_is_adapted(cfg, block) && cfg.update_target == UpdateTarget::mlp;
  Tensor<S> w1 = blk.w1, w2 = blk.w2;
  if (adapted) {
    const std::size_t s = model.delta_index(block);
    w1 = add(blk.w1, model.updates.d1[s], tape);
    w2 = add(blk.w2, model.updates.d2[s], tape);
  }
  Tensor<S> hidden = gelu(add_rowvec(matmul(x, w1, tape), blk.b1, tape), tape);
  return add_rowvec(matmul(hidden, w2, tape), blk.b2, tape);
}

}  // namespace detail

/// Full encoder pass: pre-norm transformer blocks over the token sequence,
/// then the L2-normalized [CLS] row as the image representation.
template <typename S>
Tensor<S> encoder_forward(const Tensor<S>& image, const EncoderModel<S>& model,
                          Tape<S>* tape = nullptr) {
  const auto& cfg = model.config;
  const S eps = S(cfg.layer_norm_eps);
  Tensor<S> x = patchify_embed(image, model, tape);
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    const auto& blk = model.backbone.blocks[b];
    Tensor<S> normed = layer_norm(x, blk.ln1_gain, blk.ln1_shift, eps, tape);
    x = add(x, detail::multi_head_attention(normed, b, model, tape), tape);
    Tensor<S> normed2 = layer_norm(x, blk.ln2_gain, blk.ln2_shift, eps, tape);
    x = add(x, detail::mlp_forward(normed2, b, model, tape), tape);
  }
  Tensor<S> cls = take_row(x, 0, tape);
  return l2_normalize(cls, S(1e-12), tape);
}

// ---------------------------------------------------------------------------
// Parameter accounting and enumeration
// ---------------------------------------------------------------------------

struct ParamCounts {
  std::size_t delta_params = 0;
  std::size_t bias_params = 0;
  std::size_t classifier_params = 0;
};

/// Trainable-parameter breakdown for the base session. Shared attention
/// updates cost 3*d^2 regardless of how many blocks they touch; shared MLP
/// updates cost 2*d*mlp_hidden (8*d^2 at the conventional hidden = 4d).
inline ParamCounts trainable_parameter_count(const EncoderConfig& cfg,
                                             std::size_t num_classes = 0) {
  cfg.validate();
  ParamCounts counts;
  const std::size_t d = cfg.embed_dim, m = cfg.mlp_hidden;
  if (cfg.adapted_blocks > 0) {
    const std::size_t sets = cfg.share_updates ? 1 : cfg.adapted_blocks;
    if (cfg.update_target == UpdateTarget::attention_qkv) {
      counts.delta_params = sets * 3 * d * d;
      counts.bias_params = cfg.adapted_blocks * 3 * d;
    } else {
      counts.delta_params = sets * 2 * d * m;
      counts.bias_params = cfg.adapted_blocks * (m + d);
    }
  }
  counts.classifier_params = num_classes * d;
  return counts;
}

namespace detail {

template <typename M, typename Fn>
void visit_parameters_impl(M& model, Fn&& fn) {
  auto& bb = model.backbone;
  fn("patch_weight", bb.patch_weight);
  fn("patch_bias", bb.patch_bias);
  fn("cls_token", bb.cls_token);
  fn("pos_embed", bb.pos_embed);
  for (std::size_t b = 0; b < bb.blocks.size(); ++b) {
    auto& blk = bb.blocks[b];
    const std::string p = "block" + std::to_string(b) + ".";
    fn(p + "ln1_gain", blk.ln1_gain);
    fn(p + "ln1_shift", blk.ln1_shift);
    fn(p + "wq", blk.wq);
    fn(p + "wk", blk.wk);
    fn(p + "wv", blk.wv);
    fn(p + "bq", blk.bq);
    fn(p + "bk", blk.bk);
    fn(p + "bv", blk.bv);
    fn(p + "wo", blk.wo);
    fn(p + "bo", blk.bo);
    fn(p + "ln2_gain", blk.ln2_gain);
    fn(p + "ln2_shift", blk.ln2_shift);
    fn(p + "w1", blk.w1);
    fn(p + "b1", blk.b1);
    fn(p + "w2", blk.w2);
    fn(p + "b2", blk.b2);
  }
  auto& up = model.updates;
  for (std::size_t i = 0; i < up.dq.size(); ++i) {
    const std::string p = "delta" + std::to_string(i) + ".";
    fn(p + "dq", up.dq[i]);
    fn(p + "dk", up.dk[i]);
    fn(p + "dv", up.dv[i]);
  }
  for (std::size_t i = 0; i < up.d1.size(); ++i) {
    const std::string p = "delta" + std::to_string(i) + ".";
    fn(p + "d1", up.d1[i]);
    fn(p + "d2", up.d2[i]);
  }
}

}  // namespace detail

/// Visits every encoder parameter in a fixed documented order (patch, [CLS],
/// positions, per-block weights, then additive updates).
template <typename S, typename Fn>
void visit_parameters(EncoderModel<S>& model, Fn&& fn) {
  detail::visit_parameters_impl(model, std::forward<Fn>(fn));
}

template <typename S, typename Fn>
void visit_parameters(const EncoderModel<S>& model, Fn&& fn) {
  detail::visit_parameters_impl(model, std::forward<Fn>(fn));
}

/// Visits the additive update matrices.
template <typename S, typename Fn>
void for_each_delta(EncoderModel<S>& model, Fn&& fn) {
  for (auto& t : model.updates.dq) fn(t);
  for (auto& t : model.updates.dk) fn(t);
  for (auto& t : model.updates.dv) fn(t);
  for (auto& t : model.updates.d1) fn(t);
  for (auto& t : model.updates.d2) fn(t);
}

/// Visits the biases that train alongside the updates: the target biases of
/// every adapted block (QKV biases for attention updates, MLP biases for MLP
/// updates). Biases are per-block; only the delta matrices are ever shared.
template <typename S, typename Fn>
void for_each_adapted_bias(EncoderModel<S>& model, Fn&& fn) {
  const auto& cfg = model.config;
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    if (!block_is_adapted(cfg, b)) continue;
    auto& blk = model.backbone.blocks[b];
    if (cfg.update_target == UpdateTarget::attention_qkv) {
      fn(blk.bq);
      fn(blk.bk);
      fn(blk.bv);
    } else {
      fn(blk.b1);
      fn(blk.b2);
    }
  }
}

namespace detail {

template <typename S>
void digest_tensor(Fnv1a64& h, const Tensor<S>& t) {
  const std::uint64_t nd = t.ndim();
  h.update(&nd, sizeof(nd));
  for (std::size_t i = 0; i < t.ndim(); ++i) {
    const std::uint64_t d = t.dim(i);
    h.update(&d, sizeof(d));
  }
  h.update(t.data(), t.numel() * sizeof(S));
}

}  // namespace detail

/// Digest over every encoder parameter (backbone, biases, additive updates).
template <typename S>
std::uint64_t encoder_digest(const EncoderModel<S>& model) {
  Fnv1a64 h;
  visit_parameters(model, [&h](const std::string&, const Tensor<S>& t) {
    detail::digest_tensor(h, t);
  });
  return h.value();
}

/// Digest over the permanently frozen backbone only: excludes the additive
/// updates and the adapted blocks' trainable target biases.
template <typename S>
std::uint64_t backbone_digest(const EncoderModel<S>& model) {
  const auto& cfg = model.config;
  Fnv1a64 h;
  auto put = [&h](const Tensor<S>& t) { detail::digest_tensor(h, t); };
  const auto& bb = model.backbone;
  put(bb.patch_weight);
  put(bb.patch_bias);
  put(bb.cls_token);
  put(bb.pos_embed);
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    const auto& blk = bb.blocks[b];
    const bool adapted = block_is_adapted(cfg, b);
    const bool att = cfg.update_target == UpdateTarget::attention_qkv;
    put(blk.ln1_gain);
    put(blk.ln1_shift);
    put(blk.wq);
    put(blk.wk);
    put(blk.wv);
    if (!(adapted && att)) {
      put(blk.bq);
      put(blk.bk);
      put(blk.bv);
    }
    put(blk.wo);
    put(blk.bo);
    put(blk.ln2_gain);
    put(blk.ln2_shift);
    put(blk.w1);
    put(blk.w2);
    if (!(adapted && !att)) {
      put(blk.b1);
      put(blk.b2);
    }
  }
  return h.value();
}

}  // namespace deltavit
