#pragma once

// Synthetic label corruption and empirical noise measurement.

#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "labelcal/dataset.hpp"

namespace labelcal {

enum class NoiseKind { Symmetric, Asymmetric, InstanceDependent };

inline std::optional<NoiseKind> parse_noise_kind(std::string_view s) {
  if (s == "sn" || s == "symmetric") return NoiseKind::Symmetric;
  if (s == "asn" || s == "asymmetric") return NoiseKind::Asymmetric;
  if (s == "idn" || s == "instance_dependent") return NoiseKind::InstanceDependent;
  return std::nullopt;
}

inline std::string to_string(NoiseKind k) {
  switch (k) {
    case NoiseKind::Symmetric: return "sn";
    case NoiseKind::Asymmetric: return "asn";
    case NoiseKind::InstanceDependent: return "idn";
  }
  return "sn";
}

struct NoiseSpec {
  NoiseKind kind = NoiseKind::Symmetric;
  double ratio = 0.0;
  std::uint64_t seed = 0;
  /// Spread of the per-instance flip-rate distribution (instance-dependent only).
  double idn_rate_stddev = 0.1;
};

struct TransitionMatrix {
  std::vector<std::vector<long>> counts;  // [true][observed]
  Matrix normalized;                      // row-stochastic; all-zero rows are flagged in empty_rows
  std::vector<bool> empty_rows;

  int num_classes() const { return static_cast<int>(counts.size()); }

  /// Fraction of all counted labels lying off the diagonal.
  double off_diagonal_mass() const {
    long total = 0, off = 0;
    for (int a = 0; a < num_classes(); ++a) {
      for (int b = 0; b < num_classes(); ++b) {
        total += counts[a][b];
        if (a != b) off += counts[a][b];
      }
    }
    return total == 0 ? 0.0 : static_cast<double>(off) / static_cast<double>(total);
  }
};

namespace detail {

inline void check_spec(const NoiseSpec& spec, NoiseKind expected, int num_classes) {
  require(spec.kind == expected, ErrorCode::InvalidConfig, "noise spec kind does not match injector");
  require(spec.ratio >= 0.0 && spec.ratio <= 1.0, ErrorCode::InvalidConfig, "noise ratio must lie in [0, 1]");
  require(num_classes >= 2, ErrorCode::InvalidConfig, "num_classes must be >= 2");
}

inline void check_labels(std::span<const int> labels, int num_classes) {
  for (int l : labels) {
    require(l >= 0 && l < num_classes, ErrorCode::LabelOutOfRange, "label " + std::to_string(l) + " outside [0, C)");
  }
}

}  // namespace detail

/// Flips each label with probability `ratio` to one of the other C-1 classes, uniformly.
inline std::vector<int> inject_symmetric(std::span<const int> true_labels, int num_classes, const NoiseSpec& spec) {
  detail::check_spec(spec, NoiseKind::Symmetric, num_classes);
  detail::check_labels(true_labels, num_classes);
  Rng rng(derive_seed(spec.seed, 0x736eULL));
  std::vector<int> out(true_labels.begin(), true_labels.end());
  for (int& label : out) {
    if (uniform01(rng) >= spec.ratio) continue;
    const int shift = static_cast<int>(uniform_int(rng, 1, num_classes - 1));
    label = (label + shift) % num_classes;
  }
  return out;
}

/// Flips each label with probability `ratio` to the next class, (c + 1) mod C.
inline std::vector<int> inject_asymmetric(std::span<const int> true_labels, int num_classes, const NoiseSpec& spec) {
  detail::check_spec(spec, NoiseKind::Asymmetric, num_classes);
  detail::check_labels(true_labels, num_classes);
  Rng rng(derive_seed(spec.seed, 0x61736eULL));
  std::vector<int> out(true_labels.begin(), true_labels.end());
  for (int& label : out) {
    if (uniform01(rng) < spec.ratio) label = (label + 1) % num_classes;
  }
  return out;
}

/// Feature-driven corruption. Each instance gets a flip rate from a normal
/// (mean `ratio`, sd `idn_rate_stddev`) truncated to [0, 1]; the rates are then
/// rescaled so their mean is `ratio`. Each class owns a random projection
/// vector, and a flipped instance moves to the non-true class whose projection
/// of its features is largest.
inline std::vector<int> inject_instance_dependent(const std::vector<std::vector<double>>& features,
                                                  std::span<const int> true_labels, int num_classes,
                                                  const NoiseSpec& spec) {
  detail::check_spec(spec, NoiseKind::InstanceDependent, num_classes);
  require(features.size() == true_labels.size(), ErrorCode::DimensionMismatch,
          "features and labels differ in length");
  detail::check_labels(true_labels, num_classes);
  std::vector<int> out(true_labels.begin(), true_labels.end());
  if (out.empty()) return out;

  const std::size_t dim = features.front().size();
  for (const auto& f : features) {
    require(f.size() == dim, ErrorCode::DimensionMismatch, "ragged feature rows");
  }

  Rng rng(derive_seed(spec.seed, 0x69646eULL));
  std::vector<double> rates(out.size());
  for (double& q : rates) {
    do {
      q = spec.ratio + spec.idn_rate_stddev * standard_normal(rng);
    } while (q < 0.0 || q > 1.0);
  }
  double mean = 0.0;
  for (double q : rates) mean += q;
  mean /= static_cast<double>(rates.size());
  const double scale = mean > 0.0 ? spec.ratio / mean : 0.0;

  Matrix projection(num_classes, static_cast<Eigen::Index>(dim));
  for (Eigen::Index c = 0; c < projection.rows(); ++c) {
    for (Eigen::Index j = 0; j < projection.cols(); ++j) projection(c, j) = standard_normal(rng);
  }

  for (std::size_t i = 0; i < out.size(); ++i) {
    const double flip = std::min(1.0, rates[i] * scale);
    if (uniform01(rng) >= flip) continue;
    const Eigen::Map<const Vector> x(features[i].data(), static_cast<Eigen::Index>(dim));
    const Vector scores = projection * x;
    int best = -1;
    for (int c = 0; c < num_classes; ++c) {
      if (c == out[i]) continue;
      if (best < 0 || scores[c] > scores[best]) best = c;
    }
    out[i] = best;
  }
  return out;
}

inline std::vector<int> inject_noise(const std::vector<std::vector<double>>& features, std::span<const int> labels,
                                     int num_classes, const NoiseSpec& spec) {
  switch (spec.kind) {
    case NoiseKind::Symmetric: return inject_symmetric(labels, num_classes, spec);
    case NoiseKind::Asymmetric: return inject_asymmetric(labels, num_classes, spec);
    case NoiseKind::InstanceDependent: return inject_instance_dependent(features, labels, num_classes, spec);
  }
  return {labels.begin(), labels.end()};
}

inline TransitionMatrix empirical_transition_matrix(std::span<const int> true_labels,
                                                    std::span<const int> observed_labels, int num_classes) {
  require(true_labels.size() == observed_labels.size(), ErrorCode::LengthMismatch,
          "true and observed label sequences differ in length");
  detail::check_labels(true_labels, num_classes);
  detail::check_labels(observed_labels, num_classes);
  TransitionMatrix tm;
  tm.counts.assign(num_classes, std::vector<long>(num_classes, 0));
  for (std::size_t i = 0; i < true_labels.size(); ++i) ++tm.counts[true_labels[i]][observed_labels[i]];
  tm.normalized = Matrix::Zero(num_classes, num_classes);
  tm.empty_rows.assign(num_classes, false);
  for (int a = 0; a < num_classes; ++a) {
    long row = 0;
    for (long v : tm.counts[a]) row += v;
    if (row == 0) {
      tm.empty_rows[a] = true;
      continue;
    }
    for (int b = 0; b < num_classes; ++b) {
      tm.normalized(a, b) = static_cast<double>(tm.counts[a][b]) / static_cast<double>(row);
    }
  }
  return tm;
}

/// Fraction of positions where the two label sequences disagree.
inline double noise_ratio(std::span<const int> true_labels, std::span<const int> observed_labels) {
  require(true_labels.size() == observed_labels.size(), ErrorCode::LengthMismatch,
          "true and observed label sequences differ in length");
  if (true_labels.empty()) return 0.0;
  std::size_t diff = 0;
  for (std::size_t i = 0; i < true_labels.size(); ++i) diff += true_labels[i] != observed_labels[i];
  return static_cast<double>(diff) / static_cast<double>(true_labels.size());
}

/// Frobenius distance between two normalized transition matrices.
inline double frobenius_distance(const TransitionMatrix& a, const TransitionMatrix& b) {
  require(a.num_classes() == b.num_classes(), ErrorCode::ShapeMismatch, "transition matrices differ in size");
  return (a.normalized - b.normalized).norm();
}

/// Row-per-line CSV of the normalized matrix, for external heatmap plotting.
inline std::string to_csv(const TransitionMatrix& tm, const std::vector<std::string>& class_names) {
  std::ostringstream out;
  out.precision(17);
  out << "true\\observed";
  for (const auto& n : class_names) out << ',' << n;
  out << '\n';
  for (int a = 0; a < tm.num_classes(); ++a) {
    out << class_names.at(a);
    for (int b = 0; b < tm.num_classes(); ++b) out << ',' << tm.normalized(a, b);
    out << '\n';
  }
  return out.str();
}

/// Corrupts every record of a dataset. The clean label is the record's true
/// label when present, else its observed label; afterwards true_label holds the
/// clean label and noisy_label the corrupted one.
inline Dataset apply_noise(Dataset ds, const NoiseSpec& spec) {
  std::vector<int> clean;
  std::vector<std::vector<double>> features;
  for (const auto& r : ds.records) {
    const auto base = r.true_label ? r.true_label : r.noisy_label;
    require(base.has_value(), ErrorCode::InvariantViolation,
            "record '" + r.id + "' has neither a true nor an observed label");
    clean.push_back(*base);
    features.push_back(r.features);
  }
  const auto noisy = inject_noise(features, clean, ds.manifest.num_classes, spec);
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    ds.records[i].true_label = clean[i];
    ds.records[i].noisy_label = noisy[i];
  }
  ds.dynamics.reset();
  ds.manifest.dynamics_epochs = 0;
  return ds;
}

}  // namespace labelcal
