#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "deltavit/common.hpp"
#include "deltavit/protocol.hpp"
#include "deltavit/tensor.hpp"

// Synthetic image classes built from per-class pixel templates. Each class
// draws a Gaussian template scaled by `separation`; samples are the template
// plus i.i.d. Gaussian pixel noise plus a shared nuisance component: a few
// fixed high-variance pixel directions common to every class (think global
// lighting or background variation). The nuisance directions carry no class
// information, so a model that learns to suppress them from base-session data
// improves features for every class, including ones it has never seen.

namespace deltavit {

struct SyntheticConfig {
  std::size_t classes = 40;
  std::size_t samples_per_class = 30;
  double separation = 1.0;     // template pixel scale
  double noise_std = 0.2;      // per-sample i.i.d. pixel noise
  std::size_t nuisance_dims = 4;   // shared class-independent variance directions
  double nuisance_std = 0.15;      // per-direction pixel scale of that variance
  double train_fraction = 0.8;
  std::size_t image_size = 16;
  std::size_t channels = 1;

  void validate() const {
    if (classes < 2) throw ConfigError("synthetic.classes: need at least 2");
    if (samples_per_class < 2)
      throw ConfigError("synthetic.samples_per_class: need at least 2");
    if (!(separation > 0.0))
      throw ConfigError("synthetic.separation: must be positive");
    if (noise_std < 0.0)
      throw ConfigError("synthetic.noise_std: must be non-negative");
    if (nuisance_std < 0.0)
      throw ConfigError("synthetic.nuisance_std: must be non-negative");
    if (!(train_fraction > 0.0) || !(train_fraction < 1.0))
      throw ConfigError("synthetic.train_fraction: must lie in (0, 1)");
    if (image_size == 0) throw ConfigError("synthetic.image_size: must be positive");
    if (channels == 0) throw ConfigError("synthetic.channels: must be positive");
  }
};

/// Draws the full labeled dataset for one seed. The nuisance basis is drawn
/// once per dataset; per class: a fresh template from a class-specific derived
/// seed, then samples_per_class noisy copies, the first
/// floor(n * train_fraction) marked train and the rest test.
template <typename S>
std::vector<LabeledSample<S>> generate_synthetic_dataset(
    const SyntheticConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t pixels = cfg.channels * cfg.image_size * cfg.image_size;
  const std::size_t train_n = static_cast<std::size_t>(
      static_cast<double>(cfg.samples_per_class) * cfg.train_fraction);
  if (train_n == 0 || train_n == cfg.samples_per_class) {
    throw CapacityError("synthetic: train_fraction " +
                        std::to_string(cfg.train_fraction) + " leaves " +
                        (train_n == 0 ? "no train" : "no test") +
                        " samples per class");
  }
  std::normal_distribution<double> unit(0.0, 1.0);
  // One nuisance basis for the whole dataset: these directions are shared by
  // every class, so they carry variance but no label signal.
  std::vector<std::vector<double>> nuisance(cfg.nuisance_dims,
                                            std::vector<double>(pixels));
  {
    std::mt19937_64 rng(derive_seed(seed, 0x31000));
    for (auto& dir : nuisance)
      for (double& p : dir) p = unit(rng);
  }
  std::vector<LabeledSample<S>> dataset;
  dataset.reserve(cfg.classes * cfg.samples_per_class);
  for (std::uint32_t c = 0; c < cfg.classes; ++c) {
    std::mt19937_64 rng(derive_seed(seed, 0x30000 + c));
    std::vector<double> tmpl(pixels);
    for (double& p : tmpl) p = cfg.separation * unit(rng);
    for (std::size_t i = 0; i < cfg.samples_per_class; ++i) {
      Tensor<S> image =
          Tensor<S>::zeros({cfg.channels, cfg.image_size, cfg.image_size});
      for (std::size_t p = 0; p < pixels; ++p) {
        image[p] = static_cast<S>(tmpl[p] + cfg.noise_std * unit(rng));
      }
      for (const auto& dir : nuisance) {
        const double coeff = cfg.nuisance_std * unit(rng);
        for (std::size_t p = 0; p < pixels; ++p)
          image[p] += static_cast<S>(coeff * dir[p]);
      }
      dataset.push_back({image, c, i < train_n ? Split::train : Split::test});
    }
  }
  return dataset;
}

}  // namespace deltavit
