#pragma once

// Combines the Stage-I prior p(noisy | x) with the diffusion posterior
// p(y | noisy, W) and scores the refined labels on the clean test split.

#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "labelcal/classifier.hpp"
#include "labelcal/diffusion.hpp"
#include "labelcal/noise.hpp"

namespace labelcal {

enum class ConditionMode { ArgmaxCondition, MarginalCondition };

inline std::optional<ConditionMode> parse_condition_mode(std::string_view s) {
  if (s == "argmax_condition" || s == "argmax") return ConditionMode::ArgmaxCondition;
  if (s == "marginal_condition" || s == "marginal") return ConditionMode::MarginalCondition;
  return std::nullopt;
}

inline std::string to_string(ConditionMode m) {
  return m == ConditionMode::ArgmaxCondition ? "argmax_condition" : "marginal_condition";
}

struct CalibrationConfig {
  ConditionMode mode = ConditionMode::ArgmaxCondition;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string report_path;
  bool report_both_modes = true;  // also score the other conditioning mode

  void validate() const { require(!seeds.empty(), ErrorCode::InvalidConfig, "calibration needs at least one seed"); }
};

/// Conditioning vectors (flattened E x C dynamics, optionally followed by the
/// raw features) for the given records.
inline Matrix conditioning_matrix(const Dataset& ds, std::span<const std::size_t> rows, bool with_features) {
  require(ds.dynamics.has_value(), ErrorCode::MissingDynamics, "dataset carries no training dynamics");
  const Matrix dyn = retrieval_features(ds, rows, FeatureSpace::Dynamics);
  if (!with_features) return dyn;
  const Matrix feat = detail::feature_matrix(ds, rows);
  Matrix out(dyn.rows(), dyn.cols() + feat.cols());
  out << dyn, feat;
  return out;
}

/// Posterior for a batch given an explicit prior (rows of `prior` are
/// probability vectors). Each row draws its noise from an engine keyed by
/// (seed, id); marginal mode reuses that engine state for every class term.
template <Denoiser D>
Matrix calibrate_with_prior(const Matrix& prior, const std::vector<D>& branches, const DiffusionSchedule& schedule,
                            int inference_timesteps, const Matrix& cond, std::span<const std::string> ids,
                            std::uint64_t seed, ConditionMode mode, std::size_t* inference_passes = nullptr) {
  const Eigen::Index b = prior.rows();
  const auto C = static_cast<int>(prior.cols());
  require(cond.rows() == b && static_cast<Eigen::Index>(ids.size()) == b, ErrorCode::ShapeMismatch,
          "prior, conditioning and ids differ in length");
  auto engines = [&] { return detail::row_engines(seed, ids, 0x63616cULL, 0); };

  if (mode == ConditionMode::ArgmaxCondition) {
    std::vector<int> labels(static_cast<std::size_t>(b));
    for (Eigen::Index i = 0; i < b; ++i) labels[i] = argmax(prior.row(i));
    auto rngs = engines();
    if (inference_passes) *inference_passes += static_cast<std::size_t>(b);
    return infer_reverse_batch(branches, to_k_logit_rows(labels, C, schedule.k()), cond, schedule,
                               inference_timesteps, rngs);
  }

  Matrix out = Matrix::Zero(b, C);
  for (int c = 0; c < C; ++c) {
    auto rngs = engines();
    const std::vector<int> labels(static_cast<std::size_t>(b), c);
    const Matrix post = infer_reverse_batch(branches, to_k_logit_rows(labels, C, schedule.k()), cond, schedule,
                                            inference_timesteps, rngs);
    if (inference_passes) *inference_passes += static_cast<std::size_t>(b);
    for (Eigen::Index i = 0; i < b; ++i) out.row(i) += prior(i, c) * post.row(i);
  }
  return out;
}

/// Calibrated posteriors for the given dataset rows.
inline Matrix calibrate_rows(const TrainedEnsemble& ensemble, const DiffusionModel& model, const Dataset& ds,
                             std::span<const std::size_t> rows, std::uint64_t seed, ConditionMode mode,
                             std::size_t* inference_passes = nullptr) {
  const Matrix prior = predict_proba_batch(ensemble, detail::feature_matrix(ds, rows));
  const Matrix cond = conditioning_matrix(ds, rows, model.condition_on_features);
  std::vector<std::string> ids;
  for (std::size_t r : rows) ids.push_back(ds.records[r].id);
  return calibrate_with_prior(prior, model.branches, model.schedule, model.inference_timesteps, cond, ids, seed, mode,
                              inference_passes);
}

/// Calibrated posterior for one sample with its recorded dynamics.
inline Vector calibrate(const TrainedEnsemble& ensemble, const DiffusionModel& model, const SampleRecord& sample,
                        const Matrix* dynamics, std::uint64_t seed, ConditionMode mode) {
  require(dynamics != nullptr, ErrorCode::MissingDynamics, "sample '" + sample.id + "' has no dynamics");
  const Vector prior = predict_proba(ensemble, sample.features);
  const Eigen::Index dyn_width = dynamics->size();
  const Eigen::Index width =
      dyn_width + (model.condition_on_features ? static_cast<Eigen::Index>(sample.features.size()) : 0);
  RowVector cond(width);
  cond.head(dyn_width) = Eigen::Map<const RowVector>(dynamics->data(), dyn_width);
  if (model.condition_on_features) {
    for (std::size_t j = 0; j < sample.features.size(); ++j) cond[dyn_width + static_cast<Eigen::Index>(j)] = sample.features[j];
  }
  const std::string ids[] = {sample.id};
  return calibrate_with_prior(Matrix(prior.transpose()), model.branches, model.schedule, model.inference_timesteps,
                              Matrix(cond), ids, seed, mode)
      .row(0)
      .transpose();
}

// ---------------------------------------------------------------------------
// Evaluation

/// Share of uncertain samples (whose initial candidates contain the true
/// label) whose top candidate was wrong before distillation and right after.
inline double corrected_uncertain_ratio(const std::vector<CandidateSet>& initial,
                                        const std::vector<CandidateSet>& refined, std::span<const int> true_labels) {
  require(initial.size() == refined.size() && initial.size() == true_labels.size(), ErrorCode::LengthMismatch,
          "candidate snapshots and true labels differ in length");
  std::size_t corrected = 0, eligible = 0;
  for (std::size_t i = 0; i < initial.size(); ++i) {
    if (initial[i].kind != CandidateKind::Uncertain) continue;
    require(refined[i].sample_id == initial[i].sample_id, ErrorCode::InvariantViolation,
            "candidate snapshots are not aligned");
    if (!initial[i].contains(true_labels[i])) continue;
    ++eligible;
    corrected += initial[i].top_label() != true_labels[i] && refined[i].top_label() == true_labels[i];
  }
  return eligible == 0 ? 0.0 : static_cast<double>(corrected) / static_cast<double>(eligible);
}

/// Test-split predictions of one seed, aligned with Dataset::indices(Split::Test).
struct SeedPredictions {
  std::uint64_t seed = 0;
  std::vector<int> calibrated;
  std::vector<int> classifier;
  std::vector<int> alternate;  // labels under the other conditioning mode; empty when not computed
  std::optional<double> corrected_uncertain_ratio;
  std::optional<double> candidate_accuracy_argmax;
  std::optional<double> candidate_accuracy_contains;
  std::optional<double> fixed_prior_accuracy;
};

struct SeedRow {
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double classifier_accuracy = 0.0;
  double corrected_vs_classifier = 0.0;
  double corrupted_vs_classifier = 0.0;
  double corrected_vs_noisy = 0.0;
  std::optional<double> alternate_accuracy;
  std::optional<double> corrected_uncertain_ratio;
  std::optional<double> candidate_accuracy_argmax;
  std::optional<double> candidate_accuracy_contains;
  std::optional<double> fixed_prior_accuracy;
};

struct EvalReport {
  ConditionMode mode = ConditionMode::ArgmaxCondition;
  double accuracy_mean = 0.0;
  double accuracy_std = 0.0;
  double classifier_accuracy_mean = 0.0;
  double classifier_accuracy_std = 0.0;
  double corrected_vs_classifier = 0.0;
  double corrected_vs_noisy = 0.0;
  double corrected_uncertain_ratio = 0.0;
  std::optional<double> alternate_accuracy_mean;  // the other conditioning mode, when computed
  std::optional<double> alternate_accuracy_std;
  std::size_t test_size = 0;
  std::vector<std::string> class_names;
  TransitionMatrix transition_before;  // true vs raw noisy test labels
  TransitionMatrix transition_after;   // true vs calibrated labels, pooled over seeds
  std::vector<SeedRow> per_seed;
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(v.size() - 1))};
}

template <typename T>
double mean_of(const std::vector<SeedRow>& rows, T SeedRow::*field) {
  double s = 0.0;
  for (const auto& r : rows) s += r.*field;
  return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
}

}  // namespace detail

inline EvalReport evaluate(const Dataset& ds, const std::vector<SeedPredictions>& runs,
                           ConditionMode mode = ConditionMode::ArgmaxCondition) {
  const auto test = ds.indices(Split::Test);
  require(!test.empty(), ErrorCode::NoTrueLabels, "test split is empty");
  std::vector<int> truth;
  for (std::size_t i : test) {
    require(ds.records[i].true_label.has_value(), ErrorCode::NoTrueLabels,
            "test record '" + ds.records[i].id + "' has no true label");
    truth.push_back(*ds.records[i].true_label);
  }
  require(!runs.empty(), ErrorCode::InvalidConfig, "no seed predictions to evaluate");
  const int C = ds.manifest.num_classes;
  const double n = static_cast<double>(test.size());

  EvalReport report;
  report.mode = mode;
  report.class_names = ds.manifest.class_names;
  report.test_size = test.size();
  std::vector<int> known_truth, known_noisy;
  for (std::size_t r = 0; r < test.size(); ++r) {
    if (const auto& l = ds.records[test[r]].noisy_label) {
      known_truth.push_back(truth[r]);
      known_noisy.push_back(*l);
    }
  }
  report.transition_before = empirical_transition_matrix(known_truth, known_noisy, C);

  std::vector<int> pooled_truth, pooled_after;
  std::vector<double> acc, clf_acc, alt_acc;
  double cur_sum = 0.0;
  std::size_t cur_count = 0;
  for (const auto& run : runs) {
    require(run.calibrated.size() == test.size() && run.classifier.size() == test.size(), ErrorCode::LengthMismatch,
            "predictions must cover the whole test split");
    SeedRow row;
    row.seed = run.seed;
    std::size_t hit = 0, clf_hit = 0, fixed = 0, broken = 0, fixed_noisy = 0;
    for (std::size_t r = 0; r < test.size(); ++r) {
      const bool ok = run.calibrated[r] == truth[r];
      const bool clf_ok = run.classifier[r] == truth[r];
      const auto& noisy = ds.records[test[r]].noisy_label;
      hit += ok;
      clf_hit += clf_ok;
      fixed += ok && !clf_ok;
      broken += !ok && clf_ok;
      fixed_noisy += ok && (!noisy || *noisy != truth[r]);
    }
    row.accuracy = static_cast<double>(hit) / n;
    row.classifier_accuracy = static_cast<double>(clf_hit) / n;
    row.corrected_vs_classifier = static_cast<double>(fixed) / n;
    row.corrupted_vs_classifier = static_cast<double>(broken) / n;
    row.corrected_vs_noisy = static_cast<double>(fixed_noisy) / n;
    if (!run.alternate.empty()) {
      require(run.alternate.size() == test.size(), ErrorCode::LengthMismatch,
              "alternate-mode predictions must cover the whole test split");
      std::size_t alt_hit = 0;
      for (std::size_t r = 0; r < test.size(); ++r) alt_hit += run.alternate[r] == truth[r];
      row.alternate_accuracy = static_cast<double>(alt_hit) / n;
      alt_acc.push_back(*row.alternate_accuracy);
    }
    row.corrected_uncertain_ratio = run.corrected_uncertain_ratio;
    row.candidate_accuracy_argmax = run.candidate_accuracy_argmax;
    row.candidate_accuracy_contains = run.candidate_accuracy_contains;
    row.fixed_prior_accuracy = run.fixed_prior_accuracy;
    if (run.corrected_uncertain_ratio) {
      cur_sum += *run.corrected_uncertain_ratio;
      ++cur_count;
    }
    acc.push_back(row.accuracy);
    clf_acc.push_back(row.classifier_accuracy);
    pooled_truth.insert(pooled_truth.end(), truth.begin(), truth.end());
    pooled_after.insert(pooled_after.end(), run.calibrated.begin(), run.calibrated.end());
    report.per_seed.push_back(row);
  }
  std::tie(report.accuracy_mean, report.accuracy_std) = detail::mean_std(acc);
  std::tie(report.classifier_accuracy_mean, report.classifier_accuracy_std) = detail::mean_std(clf_acc);
  if (alt_acc.size() == runs.size()) {
    const auto [m, sd] = detail::mean_std(alt_acc);
    report.alternate_accuracy_mean = m;
    report.alternate_accuracy_std = sd;
  }
  report.corrected_vs_classifier = detail::mean_of(report.per_seed, &SeedRow::corrected_vs_classifier);
  report.corrected_vs_noisy = detail::mean_of(report.per_seed, &SeedRow::corrected_vs_noisy);
  report.corrected_uncertain_ratio = cur_count ? cur_sum / static_cast<double>(cur_count) : 0.0;
  report.transition_after = empirical_transition_matrix(pooled_truth, pooled_after, C);
  return report;
}

// ---------------------------------------------------------------------------
// Report output

inline json to_json(const TransitionMatrix& tm) {
  return json{{"counts", tm.counts}, {"normalized", detail::matrix_to_json(tm.normalized)}};
}

inline TransitionMatrix transition_from_json(const json& j) {
  TransitionMatrix tm;
  tm.counts = j.at("counts").get<std::vector<std::vector<long>>>();
  tm.normalized = detail::matrix_from_json(j.at("normalized"));
  for (const auto& row : tm.counts) {
    long s = 0;
    for (long v : row) s += v;
    tm.empty_rows.push_back(s == 0);
  }
  return tm;
}

inline json to_json(const EvalReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json seeds = json::array();
  for (const auto& s : r.per_seed) {
    seeds.push_back(json{{"seed", s.seed},
                         {"accuracy", s.accuracy},
                         {"classifier_accuracy", s.classifier_accuracy},
                         {"corrected_vs_classifier", s.corrected_vs_classifier},
                         {"corrupted_vs_classifier", s.corrupted_vs_classifier},
                         {"corrected_vs_noisy", s.corrected_vs_noisy},
                         {"alternate_accuracy", opt(s.alternate_accuracy)},
                         {"corrected_uncertain_ratio", opt(s.corrected_uncertain_ratio)},
                         {"candidate_accuracy_argmax", opt(s.candidate_accuracy_argmax)},
                         {"candidate_accuracy_contains", opt(s.candidate_accuracy_contains)},
                         {"fixed_prior_accuracy", opt(s.fixed_prior_accuracy)}});
  }
  const ConditionMode other =
      r.mode == ConditionMode::ArgmaxCondition ? ConditionMode::MarginalCondition : ConditionMode::ArgmaxCondition;
  return json{{"mode", to_string(r.mode)},
              {"accuracy_mean", r.accuracy_mean},
              {"accuracy_std", r.accuracy_std},
              {"classifier_accuracy_mean", r.classifier_accuracy_mean},
              {"classifier_accuracy_std", r.classifier_accuracy_std},
              {"corrected_vs_classifier", r.corrected_vs_classifier},
              {"corrected_vs_noisy", r.corrected_vs_noisy},
              {"corrected_uncertain_ratio", r.corrected_uncertain_ratio},
              {"alternate_mode", r.alternate_accuracy_mean ? json(to_string(other)) : json(nullptr)},
              {"alternate_accuracy_mean", opt(r.alternate_accuracy_mean)},
              {"alternate_accuracy_std", opt(r.alternate_accuracy_std)},
              {"test_size", r.test_size},
              {"class_names", r.class_names},
              {"transition_before", to_json(r.transition_before)},
              {"transition_after", to_json(r.transition_after)},
              {"per_seed", std::move(seeds)}};
}

inline EvalReport eval_report_from_json(const json& j) {
  auto opt = [](const json& v) { return v.is_null() ? std::optional<double>{} : std::optional<double>{v.get<double>()}; };
  EvalReport r;
  const auto mode = parse_condition_mode(j.at("mode").get<std::string>());
  require(mode.has_value(), ErrorCode::InvariantViolation, "unknown conditioning mode in report");
  r.mode = *mode;
  r.accuracy_mean = j.at("accuracy_mean").get<double>();
  r.accuracy_std = j.at("accuracy_std").get<double>();
  r.classifier_accuracy_mean = j.at("classifier_accuracy_mean").get<double>();
  r.classifier_accuracy_std = j.at("classifier_accuracy_std").get<double>();
  r.corrected_vs_classifier = j.at("corrected_vs_classifier").get<double>();
  r.corrected_vs_noisy = j.at("corrected_vs_noisy").get<double>();
  r.corrected_uncertain_ratio = j.at("corrected_uncertain_ratio").get<double>();
  r.alternate_accuracy_mean = opt(j.at("alternate_accuracy_mean"));
  r.alternate_accuracy_std = opt(j.at("alternate_accuracy_std"));
  r.test_size = j.at("test_size").get<std::size_t>();
  r.class_names = j.at("class_names").get<std::vector<std::string>>();
  r.transition_before = transition_from_json(j.at("transition_before"));
  r.transition_after = transition_from_json(j.at("transition_after"));
  for (const auto& s : j.at("per_seed")) {
    SeedRow row;
    row.seed = s.at("seed").get<std::uint64_t>();
    row.accuracy = s.at("accuracy").get<double>();
    row.classifier_accuracy = s.at("classifier_accuracy").get<double>();
    row.corrected_vs_classifier = s.at("corrected_vs_classifier").get<double>();
    row.corrupted_vs_classifier = s.at("corrupted_vs_classifier").get<double>();
    row.corrected_vs_noisy = s.at("corrected_vs_noisy").get<double>();
    row.alternate_accuracy = opt(s.at("alternate_accuracy"));
    row.corrected_uncertain_ratio = opt(s.at("corrected_uncertain_ratio"));
    row.candidate_accuracy_argmax = opt(s.at("candidate_accuracy_argmax"));
    row.candidate_accuracy_contains = opt(s.at("candidate_accuracy_contains"));
    row.fixed_prior_accuracy = opt(s.at("fixed_prior_accuracy"));
    r.per_seed.push_back(row);
  }
  return r;
}

/// Plain-text summary table.
inline std::string format_report(const EvalReport& r) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  auto pct = [](double v) { return 100.0 * v; };
  auto cell = [&](const std::optional<double>& v) {
    std::ostringstream c;
    c << std::fixed << std::setprecision(2);
    if (v) c << pct(*v); else c << "-";
    return c.str();
  };
  out << "seed        calibrated  classifier  fixed(clf)  fixed(noisy)  uncertain-corrected  cand(argmax)  cand(contains)  fixed-prior\n";
  for (const auto& s : r.per_seed) {
    out << std::left << std::setw(12) << s.seed << std::right << std::setw(10) << pct(s.accuracy) << std::setw(12)
        << pct(s.classifier_accuracy) << std::setw(12) << pct(s.corrected_vs_classifier) << std::setw(14)
        << pct(s.corrected_vs_noisy) << std::setw(21) << cell(s.corrected_uncertain_ratio) << std::setw(14)
        << cell(s.candidate_accuracy_argmax) << std::setw(16) << cell(s.candidate_accuracy_contains) << std::setw(13)
        << cell(s.fixed_prior_accuracy) << '\n';
  }
  out << "\nconditioning mode : " << to_string(r.mode) << '\n';
  out << "calibrated accuracy : " << pct(r.accuracy_mean) << " +- " << pct(r.accuracy_std) << '\n';
  if (r.alternate_accuracy_mean) {
    out << "other-mode accuracy : " << pct(*r.alternate_accuracy_mean) << " +- " << pct(*r.alternate_accuracy_std)
        << '\n';
  }
  out << "classifier accuracy : " << pct(r.classifier_accuracy_mean) << " +- " << pct(r.classifier_accuracy_std)
      << '\n';
  out << "corrected vs classifier : " << pct(r.corrected_vs_classifier) << "%\n";
  out << "corrected vs noisy labels : " << pct(r.corrected_vs_noisy) << "%\n";
  out << "corrected uncertain ratio : " << pct(r.corrected_uncertain_ratio) << "%\n";
  out << "test size : " << r.test_size << '\n';
  return out.str();
}

}  // namespace labelcal
