#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "deltavit/classifier.hpp"
#include "deltavit/common.hpp"
#include "deltavit/encoder.hpp"
#include "deltavit/protocol.hpp"
#include "deltavit/tensor.hpp"

// Binary persistence. Every file starts with an 8-byte magic, a u32 format
// version, and a u32 scalar kind (0 = double, 1 = float); all integers and
// scalar payloads are little-endian. Tensors serialize as ndim, dims, values.

namespace deltavit {

namespace detail {

inline constexpr char kEncoderMagic[8] = {'d', 'v', 'e', 'n', 'c', 'o', 'd', 'r'};
inline constexpr char kClassifierMagic[8] = {'d', 'v', 'c', 'l', 'a', 's', 's', 'f'};
inline constexpr char kDatasetMagic[8] = {'d', 'v', 'd', 'a', 't', 'a', 's', 't'};
inline constexpr std::uint32_t kFormatVersion = 1;

class BinWriter {
 public:
  explicit BinWriter(const std::string& path)
      : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw IoError("cannot open " + path + " for writing");
  }

  void bytes(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw IoError("write failed on " + path_);
  }

  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }

  void scalar(double v) { f64(v); }
  void scalar(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }

  std::uint64_t offset() { return static_cast<std::uint64_t>(out_.tellp()); }

 private:
  template <typename U>
  void put_le(U v) {
    unsigned char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      buf[i] = static_cast<unsigned char>(v >> (8 * i));
    }
    bytes(buf, sizeof(U));
  }

  std::string path_;
  std::ofstream out_;
};

class BinReader {
 public:
  explicit BinReader(const std::string& path)
      : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open " + path + " for reading");
  }

  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (in_.gcount() != static_cast<std::streamsize>(n)) {
      throw IoError("unexpected end of file in " + path_);
    }
  }

  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::uint64_t u64() { return get_le<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }

  void scalar(double& v) { v = f64(); }
  void scalar(float& v) { v = std::bit_cast<float>(get_le<std::uint32_t>()); }

  const std::string& path() const { return path_; }

 private:
  template <typename U>
  U get_le() {
    unsigned char buf[sizeof(U)];
    bytes(buf, sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(buf[i]) << (8 * i);
    }
    return v;
  }

  std::string path_;
  std::ifstream in_;
};

template <typename S>
void write_header(BinWriter& w, const char (&magic)[8]) {
  w.bytes(magic, 8);
  w.u32(kFormatVersion);
  w.u32(scalar_kind_v<S>);
}

template <typename S>
void read_header(BinReader& r, const char (&magic)[8], const char* what) {
  char got[8];
  r.bytes(got, 8);
  if (std::memcmp(got, magic, 8) != 0) {
    throw IoError(r.path() + ": not a " + what + " file (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion) {
    throw IoError(r.path() + ": unsupported format version " +
                  std::to_string(version));
  }
  const std::uint32_t kind = r.u32();
  if (kind != scalar_kind_v<S>) {
    throw IoError(r.path() + ": scalar kind " + std::to_string(kind) +
                  " does not match the requested precision (" +
                  std::to_string(scalar_kind_v<S>) + ")");
  }
}

template <typename S>
void write_tensor(BinWriter& w, const Tensor<S>& t) {
  w.u32(static_cast<std::uint32_t>(t.ndim()));
  for (std::size_t i = 0; i < t.ndim(); ++i) w.u64(t.dim(i));
  for (std::size_t i = 0; i < t.numel(); ++i) w.scalar(t.data()[i]);
}

template <typename S>
Tensor<S> read_tensor(BinReader& r) {
  const std::uint32_t nd = r.u32();
  if (nd == 0 || nd > 8) {
    throw IoError(r.path() + ": implausible tensor rank " + std::to_string(nd));
  }
  Shape shape(nd);
  for (auto& d : shape) d = r.u64();
  Tensor<S> t = Tensor<S>::zeros(shape);
  for (std::size_t i = 0; i < t.numel(); ++i) r.scalar(t.data()[i]);
  return t;
}

/// Reads into an existing tensor, insisting on an identical shape.
template <typename S>
void read_tensor_into(BinReader& r, Tensor<S>& t) {
  Tensor<S> loaded = read_tensor<S>(r);
  if (loaded.shape() != t.shape()) {
    throw IoError(r.path() + ": tensor shape " + shape_str(loaded.shape()) +
                  " does not match the model's " + shape_str(t.shape()));
  }
  std::copy(loaded.data(), loaded.data() + loaded.numel(), t.data());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Encoder checkpoints
// ---------------------------------------------------------------------------

template <typename S>
void save_encoder(const EncoderModel<S>& model, const std::string& path) {
  detail::BinWriter w(path);
  detail::write_header<S>(w, detail::kEncoderMagic);
  const auto& c = model.config;
  w.u64(c.image_size);
  w.u64(c.channels);
  w.u64(c.patch_size);
  w.u64(c.embed_dim);
  w.u64(c.depth);
  w.u64(c.heads);
  w.u64(c.mlp_hidden);
  w.u64(c.adapted_blocks);
  w.u32(c.update_target == UpdateTarget::attention_qkv ? 0u : 1u);
  w.u32(c.share_updates ? 1u : 0u);
  w.f64(c.layer_norm_eps);
  std::uint64_t count = 0;
  visit_parameters(model, [&count](const std::string&, const Tensor<S>&) { ++count; });
  w.u64(count);
  visit_parameters(model, [&w](const std::string&, const Tensor<S>& t) {
    detail::write_tensor(w, t);
  });
}

template <typename S>
EncoderModel<S> load_encoder(const std::string& path) {
  detail::BinReader r(path);
  detail::read_header<S>(r, detail::kEncoderMagic, "encoder checkpoint");
  EncoderConfig c;
  c.image_size = r.u64();
  c.channels = r.u64();
  c.patch_size = r.u64();
  c.embed_dim = r.u64();
  c.depth = r.u64();
  c.heads = r.u64();
  c.mlp_hidden = r.u64();
  c.adapted_blocks = r.u64();
  c.update_target = r.u32() == 0 ? UpdateTarget::attention_qkv : UpdateTarget::mlp;
  c.share_updates = r.u32() != 0;
  c.layer_norm_eps = r.f64();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw IoError(path + ": checkpoint carries an invalid config: " + e.what());
  }
  EncoderModel<S> model = make_encoder<S>(c, 0);
  std::uint64_t count = 0;
  visit_parameters(model, [&count](const std::string&, const Tensor<S>&) { ++count; });
  if (r.u64() != count) {
    throw IoError(path + ": tensor count does not match the config");
  }
  visit_parameters(model, [&r](const std::string&, Tensor<S>& t) {
    detail::read_tensor_into(r, t);
  });
  return model;
}

// ---------------------------------------------------------------------------
// Classifier checkpoints
// ---------------------------------------------------------------------------

template <typename S>
void save_classifier(const ClassifierState<S>& state, const std::string& path) {
  detail::BinWriter w(path);
  detail::write_header<S>(w, detail::kClassifierMagic);
  w.f64(static_cast<double>(state.temperature));
  w.u64(state.num_classes());
  w.u64(state.feature_dim());
  for (std::size_t row = 0; row < state.num_classes(); ++row) {
    w.u32(state.class_ids[row]);
    for (std::size_t j = 0; j < state.feature_dim(); ++j) {
      w.scalar(state.weights.at(row, j));
    }
  }
}

template <typename S>
ClassifierState<S> load_classifier(const std::string& path) {
  detail::BinReader r(path);
  detail::read_header<S>(r, detail::kClassifierMagic, "classifier checkpoint");
  ClassifierState<S> state;
  state.temperature = static_cast<S>(r.f64());
  const std::uint64_t classes = r.u64();
  const std::uint64_t dim = r.u64();
  if (classes == 0 || dim == 0) {
    throw IoError(path + ": empty classifier checkpoint");
  }
  state.weights = Tensor<S>::zeros({classes, dim});
  state.class_ids.reserve(classes);
  for (std::uint64_t row = 0; row < classes; ++row) {
    state.class_ids.push_back(r.u32());
    for (std::uint64_t j = 0; j < dim; ++j) r.scalar(state.weights.at(row, j));
  }
  return state;
}

// ---------------------------------------------------------------------------
// Datasets (binary samples + CSV manifest)
// ---------------------------------------------------------------------------

/// Writes the samples to `bin_path` and a human-auditable manifest with one
/// `index,offset,label,split` row per sample to `manifest_path`.
template <typename S>
void save_dataset(const std::vector<LabeledSample<S>>& dataset,
                  const std::string& bin_path, const std::string& manifest_path) {
  if (dataset.empty()) throw DomainError("save_dataset: empty dataset");
  detail::BinWriter w(bin_path);
  detail::write_header<S>(w, detail::kDatasetMagic);
  w.u64(dataset.size());
  std::ofstream manifest(manifest_path);
  if (!manifest) throw IoError("cannot open " + manifest_path + " for writing");
  manifest << "index,offset,label,split\n";
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& sample = dataset[i];
    manifest << i << ',' << w.offset() << ',' << sample.label << ','
             << (sample.split == Split::train ? "train" : "test") << '\n';
    w.u32(sample.label);
    w.u32(sample.split == Split::train ? 0u : 1u);
    detail::write_tensor(w, sample.image);
  }
  if (!manifest) throw IoError("write failed on " + manifest_path);
}

template <typename S>
std::vector<LabeledSample<S>> load_dataset(const std::string& bin_path) {
  detail::BinReader r(bin_path);
  detail::read_header<S>(r, detail::kDatasetMagic, "dataset");
  const std::uint64_t count = r.u64();
  std::vector<LabeledSample<S>> dataset;
  dataset.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    LabeledSample<S> sample;
    sample.label = r.u32();
    const std::uint32_t split = r.u32();
    if (split > 1) {
      throw IoError(bin_path + ": sample " + std::to_string(i) +
                    " carries an invalid split tag " + std::to_string(split));
    }
    sample.split = split == 0 ? Split::train : Split::test;
    sample.image = detail::read_tensor<S>(r);
    dataset.push_back(std::move(sample));
  }
  return dataset;
}

}  // namespace deltavit
