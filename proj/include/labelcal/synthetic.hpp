#pragma once

// Gaussian-mixture datasets with clean labels, used by the tests, the
// acceptance suite and the `synth` subcommand.

#include <cstdio>
#include <string>

#include "labelcal/dataset.hpp"

namespace labelcal {

struct SyntheticSpec {
  int num_classes = 4;
  int feature_dim = 16;
  std::size_t train = 2000;
  std::size_t valid = 400;
  std::size_t test = 400;
  double separation = 2.0;  // expected norm of the difference between two class means is ~sqrt(2) * separation
  double spread = 1.0;      // within-class standard deviation per coordinate
  std::uint64_t seed = 0;

  void validate() const {
    require(num_classes >= 2, ErrorCode::InvalidConfig, "num_classes must be >= 2");
    require(feature_dim >= 1, ErrorCode::InvalidConfig, "feature_dim must be >= 1");
    require(train > 0 && valid > 0 && test > 0, ErrorCode::InvalidConfig, "every split needs at least one record");
    require(separation >= 0.0 && spread > 0.0, ErrorCode::InvalidConfig, "separation must be >= 0, spread > 0");
  }
};

namespace detail {

inline std::string padded_id(Split split, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%06zu", to_string(split).c_str(), i);
  return buf;
}

}  // namespace detail

/// Class means are drawn once per seed; labels are balanced by cycling and
/// then shuffled. Every record carries noisy_label == true_label.
inline Dataset make_gaussian_mixture(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, 0x6d6978ULL));
  const int C = spec.num_classes;
  const int d = spec.feature_dim;
  Matrix means(C, d);
  const double scale = spec.separation / std::sqrt(static_cast<double>(d));
  for (int c = 0; c < C; ++c) {
    for (int j = 0; j < d; ++j) means(c, j) = scale * standard_normal(rng);
  }

  Dataset ds;
  ds.manifest.num_classes = C;
  ds.manifest.feature_dim = d;
  for (int c = 0; c < C; ++c) ds.manifest.class_names.push_back("class_" + std::to_string(c));
  const std::pair<Split, std::size_t> sizes[] = {
      {Split::Train, spec.train}, {Split::Valid, spec.valid}, {Split::Test, spec.test}};
  for (const auto& [split, count] : sizes) {
    ds.manifest.splits[to_string(split)] = count;
    std::vector<int> labels(count);
    for (std::size_t i = 0; i < count; ++i) labels[i] = static_cast<int>(i % static_cast<std::size_t>(C));
    shuffle(labels, rng);
    for (std::size_t i = 0; i < count; ++i) {
      SampleRecord r;
      r.id = detail::padded_id(split, i);
      r.split = split;
      r.noisy_label = labels[i];
      r.true_label = labels[i];
      r.features.resize(static_cast<std::size_t>(d));
      for (int j = 0; j < d; ++j) r.features[j] = means(labels[i], j) + spec.spread * standard_normal(rng);
      ds.records.push_back(std::move(r));
    }
  }
  validate(ds);
  return ds;
}

}  // namespace labelcal
