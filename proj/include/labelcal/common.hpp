#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace labelcal {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Array = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Every failure the library reports. The CLI prints `name(code)` and maps
/// each code to a non-zero exit status.
enum class ErrorCode {
  MalformedManifest,
  CountMismatch,
  FeatureDimMismatch,
  OrphanDynamics,
  IoFailure,
  InvariantViolation,
  DimensionMismatch,
  LabelOutOfRange,
  LengthMismatch,
  NonFiniteLoss,
  EmptySplit,
  ShapeMismatch,
  EpochOutOfRange,
  EmptyCleanSet,
  KTooLarge,
  TimestepOutOfRange,
  NoWarmupData,
  MissingDynamics,
  NoTrueLabels,
  InvalidConfig,
};

inline std::string_view name(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedManifest: return "MalformedManifest";
    case ErrorCode::CountMismatch: return "CountMismatch";
    case ErrorCode::FeatureDimMismatch: return "FeatureDimMismatch";
    case ErrorCode::OrphanDynamics: return "OrphanDynamics";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::InvariantViolation: return "InvariantViolation";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::EmptySplit: return "EmptySplit";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EpochOutOfRange: return "EpochOutOfRange";
    case ErrorCode::EmptyCleanSet: return "EmptyCleanSet";
    case ErrorCode::KTooLarge: return "KTooLarge";
    case ErrorCode::TimestepOutOfRange: return "TimestepOutOfRange";
    case ErrorCode::NoWarmupData: return "NoWarmupData";
    case ErrorCode::MissingDynamics: return "MissingDynamics";
    case ErrorCode::NoTrueLabels: return "NoTrueLabels";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(name(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

// ---------------------------------------------------------------------------
// Randomness. Every stochastic routine takes an explicit engine or a seed so a
// run is reproducible from (config, seed) alone.

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// FNV-1a, used wherever a hash must be stable across platforms and runs.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Seed for an independent substream keyed by a tuple of integers.
template <typename... Keys>
std::uint64_t derive_seed(std::uint64_t seed, Keys... keys) {
  std::uint64_t h = splitmix64(seed);
  ((h = splitmix64(h ^ static_cast<std::uint64_t>(keys))), ...);
  return h;
}

inline double standard_normal(Rng& rng) {
  // Box-Muller on the raw engine output so draws do not depend on the
  // standard library's normal_distribution implementation.
  constexpr double two_pi = 6.283185307179586476925286766559;
  const double u1 = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
  const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
}

inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Uniform integer in [lo, hi] without modulo bias.
inline std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  if (span == 0) return static_cast<std::int64_t>(rng());
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % span;
  std::uint64_t draw;
  do {
    draw = rng();
  } while (draw >= limit);
  return lo + static_cast<std::int64_t>(draw % span);
}

template <typename T>
void shuffle(std::vector<T>& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i - 1)));
    std::swap(items[i - 1], items[j]);
  }
}

// ---------------------------------------------------------------------------
// Small numeric helpers shared by the classifier and the denoiser.

/// Index of the largest entry; lowest index wins exact ties.
template <typename Vec>
int argmax(const Vec& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

/// Row-wise softmax with max-subtraction.
inline Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

inline Vector softmax(const Vector& logits) {
  Vector out = (logits.array() - logits.maxCoeff()).exp().matrix();
  return out / out.sum();
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace labelcal
