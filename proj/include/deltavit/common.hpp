#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>

namespace deltavit {

// ---------------------------------------------------------------------------
// Error taxonomy. Each maps to one failure class surfaced by the library;
// the CLI translates them into process exit codes.
// ---------------------------------------------------------------------------

/// Operand shapes are incompatible (messages name both shapes).
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

/// Input outside the mathematical domain of an operation (empty softmax, ...).
class DomainError : public std::invalid_argument {
 public:
  explicit DomainError(const std::string& msg) : std::invalid_argument(msg) {}
};

/// An index (label, row, class) is out of range.
class IndexError : public std::out_of_range {
 public:
  explicit IndexError(const std::string& msg) : std::out_of_range(msg) {}
};

/// A documented call contract was violated.
class ContractError : public std::logic_error {
 public:
  explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

/// A dataset or plan cannot satisfy the requested sizes.
class CapacityError : public std::runtime_error {
 public:
  explicit CapacityError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A configuration document failed validation (messages name the field).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// File I/O failure.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void warn(const std::string& msg) {
  std::fprintf(stderr, "[deltavit] warning: %s\n", msg.c_str());
}

// ---------------------------------------------------------------------------
// Seeding. Every stochastic component receives a sub-seed derived from the
// experiment seed, so streams stay independent of each other and of context.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt) {
  return splitmix64(base ^ splitmix64(salt));
}

// Sub-seed salts, one per stochastic component.
namespace seeds {
inline constexpr std::uint64_t kData = 1;
inline constexpr std::uint64_t kPlan = 2;
inline constexpr std::uint64_t kEncoder = 3;
inline constexpr std::uint64_t kClassifier = 4;
inline constexpr std::uint64_t kTrainer = 5;
}  // namespace seeds

// ---------------------------------------------------------------------------
// FNV-1a digest over raw parameter bytes, used for freeze conservation checks.
// ---------------------------------------------------------------------------

class Fnv1a64 {
 public:
  void update(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ull;
    }
  }

  template <typename S>
  void update_values(std::span<const S> values) {
    update(values.data(), values.size() * sizeof(S));
  }

  std::uint64_t value() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ull;
};

/// Byte tag identifying the element type in binary files.
template <typename S>
inline constexpr std::uint8_t scalar_kind_v = 0xff;
template <>
inline constexpr std::uint8_t scalar_kind_v<double> = 0;
template <>
inline constexpr std::uint8_t scalar_kind_v<float> = 1;

}  // namespace deltavit
