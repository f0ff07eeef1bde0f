#pragma once

// True-label candidate retrieval: k-NN over the clean-marked subset, then a
// certainty threshold (lambda) and a top-2 dominance threshold (gamma) decide
// whether a sample keeps one label, its two dominant labels, or every label
// its neighbours voted for.

#include <string>
#include <utility>
#include <vector>

#include "labelcal/classifier.hpp"
#include "labelcal/dataset.hpp"

namespace labelcal {

enum class FeatureSpace { Dynamics, RawFeatures };
enum class DistanceWeighting { Uniform, InverseDistance };
enum class CandidateKind { Certain, Uncertain };

struct RetrievalConfig {
  int K = 10;
  double lambda = 0.9;
  double gamma = 0.8;
  double sigma = 0.5;  // fraction of train trajectories marked noisy
  FeatureSpace feature_space = FeatureSpace::Dynamics;
  DistanceWeighting distance_weighting = DistanceWeighting::Uniform;
  TrajectoryStatistic statistic = TrajectoryStatistic::Mean;
  bool exclude_self = true;

  void validate() const {
    require(K >= 1, ErrorCode::InvalidConfig, "K must be >= 1");
    // lambda = gamma = 0 is allowed: it collapses every sample to the fixed prior.
    require(lambda >= 0.0 && lambda <= 1.0, ErrorCode::InvalidConfig, "lambda must lie in [0, 1]");
    require(gamma >= 0.0 && gamma <= 1.0, ErrorCode::InvalidConfig, "gamma must lie in [0, 1]");
    require(sigma >= 0.0 && sigma <= 1.0, ErrorCode::InvalidConfig, "sigma must lie in [0, 1]");
  }
};

struct Candidate {
  int label = 0;
  double weight = 0.0;

  bool operator==(const Candidate&) const = default;
};

struct CandidateSet {
  std::string sample_id;
  CandidateKind kind = CandidateKind::Certain;
  std::vector<Candidate> candidates;
  int noisy_label = 0;

  /// Label with the largest weight; the earlier entry wins ties.
  int top_label() const {
    std::size_t best = 0;
    for (std::size_t i = 1; i < candidates.size(); ++i) {
      if (candidates[i].weight > candidates[best].weight) best = i;
    }
    return candidates[best].label;
  }

  bool contains(int label) const {
    for (const auto& c : candidates) {
      if (c.label == label) return true;
    }
    return false;
  }

  bool operator==(const CandidateSet&) const = default;
};

inline void check_invariants(const CandidateSet& s) {
  if (s.kind == CandidateKind::Certain) {
    require(s.candidates.size() == 1 && s.candidates[0].weight == 1.0, ErrorCode::InvariantViolation,
            "certain set '" + s.sample_id + "' must hold exactly one candidate of weight 1");
    return;
  }
  require(s.candidates.size() >= 2, ErrorCode::InvariantViolation,
          "uncertain set '" + s.sample_id + "' needs at least two candidates");
  double total = 0.0;
  std::vector<int> labels;
  for (const auto& c : s.candidates) {
    require(c.weight > 0.0, ErrorCode::InvariantViolation, "non-positive candidate weight in '" + s.sample_id + "'");
    total += c.weight;
    labels.push_back(c.label);
  }
  std::sort(labels.begin(), labels.end());
  require(std::adjacent_find(labels.begin(), labels.end()) == labels.end(), ErrorCode::InvariantViolation,
          "duplicate candidate labels in '" + s.sample_id + "'");
  require(std::abs(total - 1.0) <= 1e-9, ErrorCode::InvariantViolation,
          "candidate weights of '" + s.sample_id + "' do not sum to 1");
}

// ---------------------------------------------------------------------------

/// Label distribution of the K nearest reference points (Euclidean). Equal
/// distances are resolved by smaller reference index. `skip` excludes one
/// reference row (the query itself).
inline Vector knn_label_distribution(const RowVector& query, const Matrix& reference, std::span<const int> labels,
                                     int num_classes, int K, DistanceWeighting weighting,
                                     std::optional<Eigen::Index> skip = std::nullopt) {
  require(reference.rows() > 0, ErrorCode::EmptyCleanSet, "clean reference set is empty");
  require(static_cast<Eigen::Index>(labels.size()) == reference.rows(), ErrorCode::LengthMismatch,
          "reference labels and features differ in length");
  require(query.size() == reference.cols(), ErrorCode::ShapeMismatch, "query width does not match reference");
  const Eigen::Index available = reference.rows() - (skip ? 1 : 0);
  require(K >= 1 && K <= available, ErrorCode::KTooLarge,
          "K=" + std::to_string(K) + " exceeds the " + std::to_string(available) + " available neighbours");

  std::vector<std::pair<double, Eigen::Index>> dist;
  dist.reserve(static_cast<std::size_t>(reference.rows()));
  for (Eigen::Index r = 0; r < reference.rows(); ++r) {
    if (skip && *skip == r) continue;
    dist.emplace_back((reference.row(r) - query).squaredNorm(), r);
  }
  std::partial_sort(dist.begin(), dist.begin() + K, dist.end());

  Vector p = Vector::Zero(num_classes);
  if (weighting == DistanceWeighting::Uniform) {
    for (int k = 0; k < K; ++k) p[labels[dist[k].second]] += 1.0;
    return p / static_cast<double>(K);
  }
  double total = 0.0;
  for (int k = 0; k < K; ++k) {
    const double w = 1.0 / std::max(std::sqrt(dist[k].first), 1e-12);
    p[labels[dist[k].second]] += w;
    total += w;
  }
  return p / total;
}

/// Applies the lambda / gamma filters to one k-NN label distribution.
inline CandidateSet classify_distribution(const Vector& p, double lambda, double gamma) {
  CandidateSet out;
  std::vector<int> order(static_cast<std::size_t>(p.size()));
  for (int c = 0; c < p.size(); ++c) order[c] = c;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return p[a] > p[b]; });

  if (p[order[0]] >= lambda) {
    out.kind = CandidateKind::Certain;
    out.candidates = {{order[0], 1.0}};
    return out;
  }
  out.kind = CandidateKind::Uncertain;
  const double top2 = p[order[0]] + p[order[1]];
  if (top2 >= gamma) {
    out.candidates = {{order[0], p[order[0]] / top2}, {order[1], p[order[1]] / top2}};
    return out;
  }
  double total = 0.0;
  for (int c : order) {
    if (p[c] > 0.0) total += p[c];
  }
  for (int c : order) {
    if (p[c] > 0.0) out.candidates.push_back({c, p[c] / total});
  }
  return out;
}

/// Candidate sets for every row of `features`. Rows with `noisy_mask` false
/// form the k-NN reference, labelled by their noisy labels.
inline std::vector<CandidateSet> retrieve_candidates(const Matrix& features, std::span<const int> noisy_labels,
                                                     const std::vector<bool>& noisy_mask,
                                                     const std::vector<std::string>& ids, int num_classes,
                                                     const RetrievalConfig& cfg) {
  cfg.validate();
  const auto n = static_cast<std::size_t>(features.rows());
  require(noisy_labels.size() == n && noisy_mask.size() == n && ids.size() == n, ErrorCode::LengthMismatch,
          "features, labels, mask and ids must have equal length");

  std::vector<Eigen::Index> clean_rows;
  std::vector<Eigen::Index> clean_pos(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    if (!noisy_mask[i]) {
      clean_pos[i] = static_cast<Eigen::Index>(clean_rows.size());
      clean_rows.push_back(static_cast<Eigen::Index>(i));
    }
  }
  require(!clean_rows.empty(), ErrorCode::EmptyCleanSet, "every sample is marked noisy");
  Matrix reference(static_cast<Eigen::Index>(clean_rows.size()), features.cols());
  std::vector<int> reference_labels;
  for (std::size_t r = 0; r < clean_rows.size(); ++r) {
    reference.row(static_cast<Eigen::Index>(r)) = features.row(clean_rows[r]);
    reference_labels.push_back(noisy_labels[clean_rows[r]]);
  }

  std::vector<CandidateSet> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::optional<Eigen::Index> skip;
    if (cfg.exclude_self && clean_pos[i] >= 0) skip = clean_pos[i];
    const Vector p = knn_label_distribution(features.row(static_cast<Eigen::Index>(i)), reference, reference_labels,
                                            num_classes, cfg.K, cfg.distance_weighting, skip);
    CandidateSet set = classify_distribution(p, cfg.lambda, cfg.gamma);
    set.sample_id = ids[i];
    set.noisy_label = noisy_labels[i];
    out.push_back(std::move(set));
  }
  return out;
}

/// Row-stacked k-NN representation of the given records.
inline Matrix retrieval_features(const Dataset& ds, std::span<const std::size_t> rows, FeatureSpace space) {
  if (space == FeatureSpace::RawFeatures) return detail::feature_matrix(ds, rows);
  const auto dyn = ds.aligned_dynamics();
  const Eigen::Index width = static_cast<Eigen::Index>(ds.manifest.dynamics_epochs) * ds.manifest.num_classes;
  Matrix out(static_cast<Eigen::Index>(rows.size()), width);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Matrix& t = *dyn[rows[r]];
    out.row(static_cast<Eigen::Index>(r)) = Eigen::Map<const RowVector>(t.data(), width);
  }
  return out;
}

struct RetrievalResult {
  std::vector<bool> noisy_mask;          // aligned with the train split
  std::vector<CandidateSet> candidates;  // aligned with the train split
};

/// Marks noisy train trajectories, then retrieves candidates for every train record.
inline RetrievalResult retrieve_candidates(const Dataset& ds, const RetrievalConfig& cfg) {
  cfg.validate();
  const auto train = ds.indices(Split::Train);
  const auto dyn = ds.aligned_dynamics();
  std::vector<const Matrix*> train_dyn;
  std::vector<int> labels;
  std::vector<std::string> ids;
  for (std::size_t i : train) {
    require(ds.records[i].noisy_label.has_value(), ErrorCode::InvariantViolation,
            "record '" + ds.records[i].id + "' has a missing noisy label");
    train_dyn.push_back(dyn[i]);
    labels.push_back(*ds.records[i].noisy_label);
    ids.push_back(ds.records[i].id);
  }
  RetrievalResult out;
  out.noisy_mask = noisy_marker(train_dyn, labels, cfg.sigma, cfg.statistic, ids);
  out.candidates = retrieve_candidates(retrieval_features(ds, train, cfg.feature_space), labels, out.noisy_mask, ids,
                                       ds.manifest.num_classes, cfg);
  return out;
}

// ---------------------------------------------------------------------------

enum class AccuracyMode { Argmax, Contains };

inline double candidate_accuracy(const std::vector<CandidateSet>& sets, std::span<const int> true_labels,
                                 AccuracyMode mode) {
  require(sets.size() == true_labels.size(), ErrorCode::LengthMismatch, "sets and true labels differ in length");
  if (sets.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    hit += mode == AccuracyMode::Argmax ? sets[i].top_label() == true_labels[i] : sets[i].contains(true_labels[i]);
  }
  return static_cast<double>(hit) / static_cast<double>(sets.size());
}

struct CandidateStats {
  std::size_t certain = 0;
  std::size_t uncertain = 0;
};

inline CandidateStats count_kinds(const std::vector<CandidateSet>& sets) {
  CandidateStats s;
  for (const auto& c : sets) (c.kind == CandidateKind::Certain ? s.certain : s.uncertain)++;
  return s;
}

// ---------------------------------------------------------------------------
// JSON Lines serialization

inline json to_json(const CandidateSet& s) {
  json cands = json::array();
  for (const auto& c : s.candidates) cands.push_back(json{{"label", c.label}, {"weight", c.weight}});
  return json{{"id", s.sample_id},
              {"kind", s.kind == CandidateKind::Certain ? "certain" : "uncertain"},
              {"noisy_label", s.noisy_label},
              {"candidates", std::move(cands)}};
}

inline CandidateSet candidate_set_from_json(const json& j) {
  CandidateSet s;
  s.sample_id = j.at("id").get<std::string>();
  const auto kind = j.at("kind").get<std::string>();
  require(kind == "certain" || kind == "uncertain", ErrorCode::InvariantViolation, "unknown candidate kind " + kind);
  s.kind = kind == "certain" ? CandidateKind::Certain : CandidateKind::Uncertain;
  s.noisy_label = j.at("noisy_label").get<int>();
  for (const auto& c : j.at("candidates")) s.candidates.push_back({c.at("label").get<int>(), c.at("weight").get<double>()});
  check_invariants(s);
  return s;
}

inline void save_candidates(const std::vector<CandidateSet>& sets, const std::filesystem::path& file) {
  std::string body;
  for (const auto& s : sets) {
    body += to_json(s).dump();
    body += '\n';
  }
  detail::write_text(file, body);
}

inline std::vector<CandidateSet> load_candidates(const std::filesystem::path& file) {
  std::vector<CandidateSet> out;
  detail::for_each_line(file, [&](const std::string& line, std::size_t) {
    out.push_back(candidate_set_from_json(json::parse(line)));
  });
  return out;
}

}  // namespace labelcal
