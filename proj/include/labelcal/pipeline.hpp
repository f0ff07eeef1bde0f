#pragma once

// End-to-end wiring: config documents, per-stage artifact directories, the
// full run and the grid-search driver. The CLI is a thin shell over this.

#include <atomic>
#include <chrono>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "labelcal/calibrate.hpp"
#include "labelcal/candidates.hpp"
#include "labelcal/classifier.hpp"
#include "labelcal/dataset.hpp"
#include "labelcal/diffusion.hpp"
#include "labelcal/noise.hpp"
#include "labelcal/synthetic.hpp"

namespace labelcal {

struct PipelineConfig {
  std::string dataset;                     // dataset directory; empty when `synthetic` is set
  std::optional<SyntheticSpec> synthetic;  // generate the input instead of loading it
  std::optional<NoiseSpec> noise;
  std::uint64_t missing_label_seed = 0;
  TrainConfig classifier;
  RetrievalConfig retrieval;
  DistillConfig diffusion;
  CalibrationConfig calibration;
  std::string output = "run";

  void validate() const {
    require(!dataset.empty() || synthetic.has_value(), ErrorCode::InvalidConfig,
            "config needs either a dataset path or a synthetic spec");
    if (synthetic) synthetic->validate();
    if (noise) {
      require(noise->ratio >= 0.0 && noise->ratio <= 1.0, ErrorCode::InvalidConfig, "noise ratio must lie in [0, 1]");
    }
    classifier.validate();
    retrieval.validate();
    diffusion.validate();
    calibration.validate();
  }
};

// ---------------------------------------------------------------------------
// Config JSON. Field names mirror the structs; unknown keys are rejected so a
// typo cannot silently fall back to a default.

namespace detail {

class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    require(j_.is_object(), ErrorCode::InvalidConfig, where_ + " must be a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      fail(ErrorCode::InvalidConfig, where_ + "." + key + ": " + e.what());
    }
  }

  template <typename Fn>
  void get_with(const char* key, Fn&& parse) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    parse(j_.at(key));
  }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      require(seen_.count(key) > 0, ErrorCode::InvalidConfig, "unknown key " + where_ + "." + key);
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

template <typename Enum, typename Parse>
Enum parse_enum(const json& j, Parse parse, const std::string& what) {
  const auto text = j.get<std::string>();
  const auto v = parse(text);
  require(v.has_value(), ErrorCode::InvalidConfig, "unknown " + what + " '" + text + "'");
  return *v;
}

inline std::optional<FeatureSpace> parse_feature_space(std::string_view s) {
  if (s == "dynamics") return FeatureSpace::Dynamics;
  if (s == "raw_features") return FeatureSpace::RawFeatures;
  return std::nullopt;
}

inline std::optional<DistanceWeighting> parse_weighting(std::string_view s) {
  if (s == "uniform") return DistanceWeighting::Uniform;
  if (s == "inverse_distance") return DistanceWeighting::InverseDistance;
  return std::nullopt;
}

inline std::optional<TrajectoryStatistic> parse_statistic(std::string_view s) {
  if (s == "mean") return TrajectoryStatistic::Mean;
  if (s == "mean_plus_std") return TrajectoryStatistic::MeanPlusStd;
  return std::nullopt;
}

}  // namespace detail

inline json to_json(const SyntheticSpec& s) {
  return json{{"num_classes", s.num_classes}, {"feature_dim", s.feature_dim}, {"train", s.train},
              {"valid", s.valid},             {"test", s.test},               {"separation", s.separation},
              {"spread", s.spread},           {"seed", s.seed}};
}

inline SyntheticSpec synthetic_spec_from_json(const json& j) {
  SyntheticSpec s;
  detail::ObjectReader r(j, "synthetic");
  r.get("num_classes", s.num_classes);
  r.get("feature_dim", s.feature_dim);
  r.get("train", s.train);
  r.get("valid", s.valid);
  r.get("test", s.test);
  r.get("separation", s.separation);
  r.get("spread", s.spread);
  r.get("seed", s.seed);
  r.finish();
  return s;
}

inline json to_json(const NoiseSpec& s) {
  return json{{"kind", to_string(s.kind)}, {"ratio", s.ratio}, {"seed", s.seed}, {"idn_rate_stddev", s.idn_rate_stddev}};
}

inline NoiseSpec noise_spec_from_json(const json& j) {
  NoiseSpec s;
  detail::ObjectReader r(j, "noise");
  r.get_with("kind", [&](const json& v) { s.kind = detail::parse_enum<NoiseKind>(v, parse_noise_kind, "noise kind"); });
  r.get("ratio", s.ratio);
  r.get("seed", s.seed);
  r.get("idn_rate_stddev", s.idn_rate_stddev);
  r.finish();
  return s;
}

inline json to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"branches", c.branches},
              {"coreg_weight", c.coreg_weight},
              {"coreg_epsilon", c.coreg_epsilon},
              {"hidden_units", c.hidden_units},
              {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  detail::ObjectReader r(j, "classifier");
  r.get("epochs", c.epochs);
  r.get("batch_size", c.batch_size);
  r.get("learning_rate", c.learning_rate);
  r.get("branches", c.branches);
  r.get("coreg_weight", c.coreg_weight);
  r.get("coreg_epsilon", c.coreg_epsilon);
  r.get("hidden_units", c.hidden_units);
  r.get("seed", c.seed);
  r.finish();
  return c;
}

inline json to_json(const RetrievalConfig& c) {
  return json{{"K", c.K},
              {"lambda", c.lambda},
              {"gamma", c.gamma},
              {"sigma", c.sigma},
              {"feature_space", c.feature_space == FeatureSpace::Dynamics ? "dynamics" : "raw_features"},
              {"distance_weighting", c.distance_weighting == DistanceWeighting::Uniform ? "uniform" : "inverse_distance"},
              {"statistic", c.statistic == TrajectoryStatistic::Mean ? "mean" : "mean_plus_std"},
              {"exclude_self", c.exclude_self}};
}

inline RetrievalConfig retrieval_config_from_json(const json& j) {
  RetrievalConfig c;
  detail::ObjectReader r(j, "retrieval");
  r.get("K", c.K);
  r.get("lambda", c.lambda);
  r.get("gamma", c.gamma);
  r.get("sigma", c.sigma);
  r.get_with("feature_space", [&](const json& v) {
    c.feature_space = detail::parse_enum<FeatureSpace>(v, detail::parse_feature_space, "feature space");
  });
  r.get_with("distance_weighting", [&](const json& v) {
    c.distance_weighting = detail::parse_enum<DistanceWeighting>(v, detail::parse_weighting, "distance weighting");
  });
  r.get_with("statistic", [&](const json& v) {
    c.statistic = detail::parse_enum<TrajectoryStatistic>(v, detail::parse_statistic, "trajectory statistic");
  });
  r.get("exclude_self", c.exclude_self);
  r.finish();
  return c;
}

inline json to_json(const DistillConfig& c) {
  return json{{"warmup_epochs", c.warmup_epochs},
              {"eval_rounds", c.eval_rounds},
              {"total_epochs", c.total_epochs},
              {"train_timesteps", c.train_timesteps},
              {"inference_timesteps", c.inference_timesteps},
              {"k", c.k},
              {"schedule_offset", c.schedule_offset},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"branches", c.branches},
              {"coreg_weight", c.coreg_weight},
              {"coreg_epsilon", c.coreg_epsilon},
              {"hidden", c.hidden},
              {"time_embed", c.time_embed},
              {"encode_width", c.encode_width},
              {"condition_on_features", c.condition_on_features},
              {"select_by_validation", c.select_by_validation},
              {"seed", c.seed}};
}

inline DistillConfig distill_config_from_json(const json& j) {
  DistillConfig c;
  detail::ObjectReader r(j, "diffusion");
  r.get("warmup_epochs", c.warmup_epochs);
  r.get("eval_rounds", c.eval_rounds);
  r.get("total_epochs", c.total_epochs);
  r.get("train_timesteps", c.train_timesteps);
  r.get("inference_timesteps", c.inference_timesteps);
  r.get("k", c.k);
  r.get("schedule_offset", c.schedule_offset);
  r.get("batch_size", c.batch_size);
  r.get("learning_rate", c.learning_rate);
  r.get("branches", c.branches);
  r.get("coreg_weight", c.coreg_weight);
  r.get("coreg_epsilon", c.coreg_epsilon);
  r.get("hidden", c.hidden);
  r.get("time_embed", c.time_embed);
  r.get("encode_width", c.encode_width);
  r.get("condition_on_features", c.condition_on_features);
  r.get("select_by_validation", c.select_by_validation);
  r.get("seed", c.seed);
  r.finish();
  return c;
}

inline json to_json(const CalibrationConfig& c) {
  return json{{"mode", to_string(c.mode)},
              {"seeds", c.seeds},
              {"report_path", c.report_path},
              {"report_both_modes", c.report_both_modes}};
}

inline CalibrationConfig calibration_config_from_json(const json& j) {
  CalibrationConfig c;
  detail::ObjectReader r(j, "calibration");
  r.get_with("mode", [&](const json& v) {
    c.mode = detail::parse_enum<ConditionMode>(v, parse_condition_mode, "conditioning mode");
  });
  r.get("seeds", c.seeds);
  r.get("report_path", c.report_path);
  r.get("report_both_modes", c.report_both_modes);
  r.finish();
  return c;
}

inline json to_json(const PipelineConfig& c) {
  return json{{"dataset", c.dataset},
              {"synthetic", c.synthetic ? to_json(*c.synthetic) : json(nullptr)},
              {"noise", c.noise ? to_json(*c.noise) : json(nullptr)},
              {"missing_label_seed", c.missing_label_seed},
              {"classifier", to_json(c.classifier)},
              {"retrieval", to_json(c.retrieval)},
              {"diffusion", to_json(c.diffusion)},
              {"calibration", to_json(c.calibration)},
              {"output", c.output}};
}

inline PipelineConfig pipeline_config_from_json(const json& j) {
  PipelineConfig c;
  detail::ObjectReader r(j, "config");
  r.get("dataset", c.dataset);
  r.get_with("synthetic", [&](const json& v) {
    if (!v.is_null()) c.synthetic = synthetic_spec_from_json(v);
  });
  r.get_with("noise", [&](const json& v) {
    if (!v.is_null()) c.noise = noise_spec_from_json(v);
  });
  r.get("missing_label_seed", c.missing_label_seed);
  r.get_with("classifier", [&](const json& v) { c.classifier = train_config_from_json(v); });
  r.get_with("retrieval", [&](const json& v) { c.retrieval = retrieval_config_from_json(v); });
  r.get_with("diffusion", [&](const json& v) { c.diffusion = distill_config_from_json(v); });
  r.get_with("calibration", [&](const json& v) { c.calibration = calibration_config_from_json(v); });
  r.get("output", c.output);
  r.finish();
  c.validate();
  return c;
}

inline json read_json_file(const std::filesystem::path& file) {
  try {
    return json::parse(detail::read_text(file));
  } catch (const json::parse_error& e) {
    fail(ErrorCode::InvalidConfig, file.string() + ": " + e.what());
  }
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& file) {
  return pipeline_config_from_json(read_json_file(file));
}

/// 16 hex digits of FNV-1a over the canonical (sorted-key) JSON dump.
inline std::string config_hash(const json& j) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << fnv1a(j.dump());
  return out.str();
}

// ---------------------------------------------------------------------------
// Stage logging: one JSON object per line on the given stream.

class StageLogger {
 public:
  explicit StageLogger(std::ostream* out = &std::cerr) : out_(out) {}

  void emit(const std::string& stage, const std::string& event, json extra = json::object()) const {
    if (!out_) return;
    extra["stage"] = stage;
    extra["event"] = event;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    *out_ << extra.dump() << '\n';
    out_->flush();
  }

 private:
  std::ostream* out_;
};

/// Runs `body` as a named stage: logs start/done, and re-raises failures with
/// the stage name prefixed so the caller knows where the run stopped.
template <typename Fn>
auto run_stage(const StageLogger& log, const std::string& stage, json context, Fn&& body) {
  log.emit(stage, "start", context);
  const auto t0 = std::chrono::steady_clock::now();
  try {
    if constexpr (std::is_void_v<decltype(body())>) {
      body();
      context["elapsed_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      log.emit(stage, "done", context);
    } else {
      auto out = body();
      context["elapsed_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      log.emit(stage, "done", context);
      return out;
    }
  } catch (const Error& e) {
    context["error"] = std::string(name(e.code()));
    context["message"] = e.what();
    log.emit(stage, "error", context);
    throw Error(e.code(), "stage " + stage + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Stage artifacts

/// Directory `<root>/<stage>-<hash>` plus a run manifest carrying the hash,
/// the seed and the stage config.
struct StageDir {
  std::filesystem::path path;
  std::string hash;
};

inline StageDir open_stage_dir(const std::filesystem::path& root, const std::string& stage, const std::string& upstream,
                               const json& stage_config, std::optional<std::uint64_t> seed) {
  json key{{"stage", stage}, {"upstream", upstream}, {"config", stage_config}};
  if (seed) key["seed"] = *seed;
  StageDir dir;
  dir.hash = config_hash(key);
  dir.path = root / (stage + "-" + dir.hash);
  std::error_code ec;
  std::filesystem::create_directories(dir.path, ec);
  require(!ec, ErrorCode::IoFailure, "cannot create " + dir.path.string() + ": " + ec.message());
  json manifest{{"stage", stage}, {"config_hash", dir.hash}, {"upstream", upstream}, {"config", stage_config}};
  manifest["seed"] = seed ? json(*seed) : json(nullptr);
  detail::write_text(dir.path / "run.json", manifest.dump(2) + "\n");
  return dir;
}

/// model.json (branches, schedule constants, selected epoch and refined
/// candidate weights), refined_candidates.jsonl and history.jsonl.
inline void save_distill_result(const DistillResult& d, const std::filesystem::path& dir) {
  json model = to_json(d.model);
  model["selected_epoch"] = d.selected_epoch;
  json refined = json::array();
  for (const auto& s : d.refined) {
    if (s.kind == CandidateKind::Uncertain) refined.push_back(to_json(s));
  }
  model["refined_candidates"] = std::move(refined);
  detail::write_text(dir / "model.json", model.dump() + "\n");
  save_candidates(d.refined, dir / "refined_candidates.jsonl");
  std::string history;
  for (const auto& h : d.history) {
    history += json{{"epoch", h.epoch},
                    {"warmup", h.warmup},
                    {"loss", h.loss},
                    {"trained_items", h.trained_items},
                    {"matched_updates", h.matched_updates},
                    {"valid_accuracy", h.valid_accuracy}}
                   .dump();
    history += '\n';
  }
  detail::write_text(dir / "history.jsonl", history);
}

/// One calibrated prediction, as stored in a predictions file.
struct Prediction {
  std::string id;
  std::uint64_t seed = 0;
  int classifier_label = 0;
  int calibrated_label = 0;
  std::optional<int> alternate_label;
  std::vector<double> posterior;
};

inline void save_predictions(const std::vector<Prediction>& preds, const std::filesystem::path& file) {
  std::string body;
  for (const auto& p : preds) {
    json j{{"id", p.id},
           {"seed", p.seed},
           {"classifier_label", p.classifier_label},
           {"calibrated_label", p.calibrated_label},
           {"posterior", p.posterior}};
    j["alternate_label"] = p.alternate_label ? json(*p.alternate_label) : json(nullptr);
    body += j.dump();
    body += '\n';
  }
  detail::write_text(file, body);
}

inline std::vector<Prediction> load_predictions(const std::filesystem::path& file) {
  std::vector<Prediction> out;
  detail::for_each_line(file, [&](const std::string& line, std::size_t lineno) {
    try {
      const json j = json::parse(line);
      Prediction p;
      p.id = j.at("id").get<std::string>();
      p.seed = j.at("seed").get<std::uint64_t>();
      p.classifier_label = j.at("classifier_label").get<int>();
      p.calibrated_label = j.at("calibrated_label").get<int>();
      if (j.contains("alternate_label") && !j.at("alternate_label").is_null()) {
        p.alternate_label = j.at("alternate_label").get<int>();
      }
      p.posterior = j.at("posterior").get<std::vector<double>>();
      out.push_back(std::move(p));
    } catch (const json::exception& e) {
      fail(ErrorCode::IoFailure, file.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  });
  return out;
}

/// Groups predictions by seed (ascending) and aligns them with the test split.
inline std::vector<SeedPredictions> seed_predictions(const Dataset& ds, const std::vector<Prediction>& preds) {
  const auto test = ds.indices(Split::Test);
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t r = 0; r < test.size(); ++r) pos[ds.records[test[r]].id] = r;
  std::map<std::uint64_t, SeedPredictions> by_seed;
  std::map<std::uint64_t, std::vector<bool>> filled;
  std::map<std::uint64_t, bool> has_alt;
  for (const auto& p : preds) {
    auto it = pos.find(p.id);
    require(it != pos.end(), ErrorCode::InvariantViolation, "prediction for unknown test id '" + p.id + "'");
    auto& sp = by_seed[p.seed];
    if (sp.calibrated.empty()) {
      sp.seed = p.seed;
      sp.calibrated.assign(test.size(), -1);
      sp.classifier.assign(test.size(), -1);
      filled[p.seed].assign(test.size(), false);
      has_alt[p.seed] = p.alternate_label.has_value();
      if (has_alt[p.seed]) sp.alternate.assign(test.size(), -1);
    }
    require(!filled[p.seed][it->second], ErrorCode::InvariantViolation,
            "duplicate prediction for '" + p.id + "' under seed " + std::to_string(p.seed));
    require(p.alternate_label.has_value() == has_alt[p.seed], ErrorCode::InvariantViolation,
            "alternate labels must be present for all or none of a seed's predictions");
    filled[p.seed][it->second] = true;
    sp.calibrated[it->second] = p.calibrated_label;
    sp.classifier[it->second] = p.classifier_label;
    if (p.alternate_label) sp.alternate[it->second] = *p.alternate_label;
  }
  std::vector<SeedPredictions> out;
  for (auto& [seed, sp] : by_seed) {
    for (bool f : filled[seed]) {
      require(f, ErrorCode::LengthMismatch, "seed " + std::to_string(seed) + " does not cover the whole test split");
    }
    out.push_back(std::move(sp));
  }
  return out;
}

/// report.json, report.txt and the two transition CSVs.
inline void write_report(const EvalReport& report, const std::filesystem::path& dir) {
  const auto& class_names = report.class_names;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorCode::IoFailure, "cannot create " + dir.string() + ": " + ec.message());
  detail::write_text(dir / "report.json", to_json(report).dump(2) + "\n");
  detail::write_text(dir / "report.txt", format_report(report));
  detail::write_text(dir / "transition_before.csv", to_csv(report.transition_before, class_names));
  detail::write_text(dir / "transition_after.csv", to_csv(report.transition_after, class_names));
}

// ---------------------------------------------------------------------------
// Stage building blocks shared by run_pipeline and the CLI.

inline Dataset ingest(const PipelineConfig& cfg) {
  Dataset ds = cfg.synthetic ? make_gaussian_mixture(*cfg.synthetic) : load_dataset(cfg.dataset);
  ds.records = resolve_missing_labels(std::move(ds.records), ds.manifest.num_classes, cfg.missing_label_seed);
  validate(ds);
  return ds;
}

inline std::vector<int> true_labels_of(const Dataset& ds, std::span<const std::size_t> rows) {
  std::vector<int> out;
  for (std::size_t i : rows) {
    if (!ds.records[i].true_label) return {};
    out.push_back(*ds.records[i].true_label);
  }
  return out;
}

inline DistillData make_distill_data(const Dataset& ds, const std::vector<CandidateSet>& candidates,
                                     bool with_features) {
  const auto train = ds.indices(Split::Train);
  DistillData data;
  data.candidates = candidates;
  data.cond = conditioning_matrix(ds, train, with_features);
  data.num_classes = ds.manifest.num_classes;
  return data;
}

/// Validation inputs for diffusion-stage model selection: classifier argmax as
/// the conditioning label, scored against the noisy valid labels.
inline std::optional<ValidationData> make_validation_data(const Dataset& ds, const TrainedEnsemble& ens,
                                                          bool with_features) {
  const auto valid = ds.indices(Split::Valid);
  if (valid.empty()) return std::nullopt;
  ValidationData v;
  v.cond = conditioning_matrix(ds, valid, with_features);
  const Matrix prior = predict_proba_batch(ens, detail::feature_matrix(ds, valid));
  for (std::size_t r = 0; r < valid.size(); ++r) {
    const auto& rec = ds.records[valid[r]];
    if (!rec.noisy_label) return std::nullopt;
    v.conditioning_labels.push_back(argmax(prior.row(static_cast<Eigen::Index>(r))));
    v.noisy_labels.push_back(*rec.noisy_label);
    v.ids.push_back(rec.id);
  }
  return v;
}

/// Calibrated predictions for the test split under one seed.
inline std::vector<Prediction> predict_test(const TrainedEnsemble& ens, const DiffusionModel& model,
                                            const Dataset& ds, std::uint64_t seed, ConditionMode mode,
                                            bool both_modes) {
  const auto test = ds.indices(Split::Test);
  require(!test.empty(), ErrorCode::EmptySplit, "test split is empty");
  const Matrix prior = predict_proba_batch(ens, detail::feature_matrix(ds, test));
  const Matrix post = calibrate_rows(ens, model, ds, test, seed, mode);
  std::optional<Matrix> alt;
  if (both_modes) {
    const ConditionMode other =
        mode == ConditionMode::ArgmaxCondition ? ConditionMode::MarginalCondition : ConditionMode::ArgmaxCondition;
    alt = calibrate_rows(ens, model, ds, test, seed, other);
  }
  std::vector<Prediction> out;
  for (std::size_t r = 0; r < test.size(); ++r) {
    const auto row = static_cast<Eigen::Index>(r);
    Prediction p;
    p.id = ds.records[test[r]].id;
    p.seed = seed;
    p.classifier_label = argmax(prior.row(row));
    p.calibrated_label = argmax(post.row(row));
    if (alt) p.alternate_label = argmax(alt->row(row));
    p.posterior.assign(post.row(row).data(), post.row(row).data() + post.cols());
    out.push_back(std::move(p));
  }
  return out;
}

/// Candidate-quality statistics for one seed. Empty when train true labels are absent.
struct CandidateQuality {
  std::optional<double> argmax_accuracy;
  std::optional<double> contains_accuracy;
  std::optional<double> fixed_prior_accuracy;  // lambda = gamma = 0, same noisy mask
  std::optional<double> corrected_uncertain_ratio;
};

inline CandidateQuality candidate_quality(const Dataset& ds, const RetrievalConfig& cfg,
                                          const RetrievalResult& retrieval, const DistillResult& distilled) {
  CandidateQuality q;
  const auto train = ds.indices(Split::Train);
  const auto truth = true_labels_of(ds, train);
  if (truth.empty()) return q;
  q.argmax_accuracy = candidate_accuracy(retrieval.candidates, truth, AccuracyMode::Argmax);
  q.contains_accuracy = candidate_accuracy(retrieval.candidates, truth, AccuracyMode::Contains);
  RetrievalConfig fixed = cfg;
  fixed.lambda = 0.0;
  fixed.gamma = 0.0;
  std::vector<int> labels;
  std::vector<std::string> ids;
  for (std::size_t i : train) {
    labels.push_back(*ds.records[i].noisy_label);
    ids.push_back(ds.records[i].id);
  }
  const auto fixed_sets = retrieve_candidates(retrieval_features(ds, train, cfg.feature_space), labels,
                                              retrieval.noisy_mask, ids, ds.manifest.num_classes, fixed);
  q.fixed_prior_accuracy = candidate_accuracy(fixed_sets, truth, AccuracyMode::Argmax);
  q.corrected_uncertain_ratio = corrected_uncertain_ratio(distilled.initial, distilled.refined, truth);
  return q;
}

// ---------------------------------------------------------------------------
// Full pipeline

struct PipelineResult {
  EvalReport report;
  std::filesystem::path report_dir;
  std::vector<double> diffusion_valid_accuracy;  // per seed, at the selected epoch (-1 when unavailable)
};

/// ingest -> noise -> (per seed) train-classifier -> retrieve-candidates ->
/// train-diffusion -> calibrate, then evaluate over all seeds. Every stage
/// persists its artifacts under `output/<stage>-<hash>`; per-seed stages live
/// under `output/seed-<s>/`.
inline PipelineResult run_pipeline(const PipelineConfig& cfg, const StageLogger& log = StageLogger{}) {
  cfg.validate();
  namespace fs = std::filesystem;
  const fs::path root = cfg.output;

  json ingest_cfg{{"dataset", cfg.dataset}, {"missing_label_seed", cfg.missing_label_seed}};
  ingest_cfg["synthetic"] = cfg.synthetic ? to_json(*cfg.synthetic) : json(nullptr);
  const StageDir ingest_dir = open_stage_dir(root, "ingest", "", ingest_cfg, std::nullopt);
  Dataset ds = run_stage(log, "ingest", {{"dir", ingest_dir.path.string()}}, [&] {
    Dataset d = ingest(cfg);
    save_dataset(d, ingest_dir.path / "dataset");
    return d;
  });
  std::string upstream = ingest_dir.hash;

  if (cfg.noise) {
    const StageDir noise_dir = open_stage_dir(root, "noise", upstream, to_json(*cfg.noise), std::nullopt);
    ds = run_stage(log, "noise", {{"dir", noise_dir.path.string()}}, [&] {
      Dataset d = apply_noise(ds, *cfg.noise);
      save_dataset(d, noise_dir.path / "dataset");
      return d;
    });
    upstream = noise_dir.hash;
  }

  std::vector<Prediction> all_predictions;
  std::vector<CandidateQuality> qualities;
  PipelineResult result;
  for (std::uint64_t seed : cfg.calibration.seeds) {
    const fs::path seed_root = root / ("seed-" + std::to_string(seed));
    const json seed_ctx{{"seed", seed}};

    TrainConfig clf_cfg = cfg.classifier;
    clf_cfg.seed = seed;
    const StageDir clf_dir = open_stage_dir(seed_root, "train-classifier", upstream, to_json(clf_cfg), seed);
    TrainedEnsemble ens;
    const Dataset dyn_ds = run_stage(log, "train-classifier", seed_ctx, [&] {
      ens = train_with_dynamics(ds, clf_cfg);
      Dataset d = with_dynamics(ds, ens);
      save_dataset(d, clf_dir.path / "dataset");
      detail::write_text(clf_dir.path / "model.json", to_json(ens).dump() + "\n");
      return d;
    });

    const StageDir ret_dir = open_stage_dir(seed_root, "retrieve-candidates", clf_dir.hash, to_json(cfg.retrieval), seed);
    const RetrievalResult retrieval = run_stage(log, "retrieve-candidates", seed_ctx, [&] {
      RetrievalResult r = retrieve_candidates(dyn_ds, cfg.retrieval);
      save_candidates(r.candidates, ret_dir.path / "candidates.jsonl");
      const auto counts = count_kinds(r.candidates);
      detail::write_text(ret_dir.path / "summary.json",
                         json{{"certain", counts.certain}, {"uncertain", counts.uncertain}}.dump(2) + "\n");
      return r;
    });

    DistillConfig dcfg = cfg.diffusion;
    dcfg.seed = seed;
    const StageDir diff_dir = open_stage_dir(seed_root, "train-diffusion", ret_dir.hash, to_json(dcfg), seed);
    const DistillResult distilled = run_stage(log, "train-diffusion", seed_ctx, [&] {
      const DistillData data = make_distill_data(dyn_ds, retrieval.candidates, dcfg.condition_on_features);
      const auto valid = make_validation_data(dyn_ds, ens, dcfg.condition_on_features);
      DistillResult d = distill_train(data, dcfg, valid ? &*valid : nullptr);
      save_distill_result(d, diff_dir.path);
      return d;
    });
    double selected_valid = -1.0;
    for (const auto& h : distilled.history) {
      if (h.epoch == distilled.selected_epoch) selected_valid = h.valid_accuracy;
    }
    result.diffusion_valid_accuracy.push_back(selected_valid);

    const json cal_cfg{{"mode", to_string(cfg.calibration.mode)}, {"both_modes", cfg.calibration.report_both_modes}};
    const StageDir cal_dir = open_stage_dir(seed_root, "calibrate", diff_dir.hash, cal_cfg, seed);
    auto preds = run_stage(log, "calibrate", seed_ctx, [&] {
      auto p = predict_test(ens, distilled.model, dyn_ds, seed, cfg.calibration.mode,
                            cfg.calibration.report_both_modes);
      save_predictions(p, cal_dir.path / "predictions.jsonl");
      return p;
    });
    all_predictions.insert(all_predictions.end(), preds.begin(), preds.end());
    qualities.push_back(candidate_quality(dyn_ds, cfg.retrieval, retrieval, distilled));
  }

  const StageDir eval_dir = open_stage_dir(root, "evaluate", config_hash(to_json(cfg)), to_json(cfg.calibration),
                                           std::nullopt);
  result.report = run_stage(log, "evaluate", {{"dir", eval_dir.path.string()}}, [&] {
    auto runs = seed_predictions(ds, all_predictions);
    // seed_predictions sorts by seed; attach candidate statistics in the same order.
    for (auto& run : runs) {
      const auto it = std::find(cfg.calibration.seeds.begin(), cfg.calibration.seeds.end(), run.seed);
      const auto& q = qualities[static_cast<std::size_t>(it - cfg.calibration.seeds.begin())];
      run.candidate_accuracy_argmax = q.argmax_accuracy;
      run.candidate_accuracy_contains = q.contains_accuracy;
      run.fixed_prior_accuracy = q.fixed_prior_accuracy;
      run.corrected_uncertain_ratio = q.corrected_uncertain_ratio;
    }
    EvalReport rep = evaluate(ds, runs, cfg.calibration.mode);
    write_report(rep, eval_dir.path);
    save_predictions(all_predictions, eval_dir.path / "predictions.jsonl");
    if (!cfg.calibration.report_path.empty()) {
      detail::write_text(cfg.calibration.report_path, to_json(rep).dump(2) + "\n");
    }
    return rep;
  });
  result.report_dir = eval_dir.path;
  detail::write_text(root / "latest.json",
                     json{{"config_hash", config_hash(to_json(cfg))}, {"report_dir", eval_dir.path.filename().string()}}
                             .dump(2) +
                         "\n");
  return result;
}

// ---------------------------------------------------------------------------
// Grid search

/// Value lists per knob. Defaults are the documented search ranges; a grid
/// file may override any subset.
struct GridSpec {
  std::vector<double> lambda{0.7, 0.8, 0.9, 1.0};
  std::vector<double> gamma{0.4, 0.6, 0.8};
  std::vector<int> warmup_epochs{1, 2, 3, 4, 5, 6};
  std::vector<int> eval_rounds{2, 4, 6, 8};
  std::vector<int> K{10, 20, 30};
  std::vector<int> train_timesteps{400, 500, 600, 700, 800};
  std::vector<int> inference_timesteps{10, 20, 50, 100};
  std::vector<double> learning_rate{1e-3, 6e-4, 3e-4, 1e-4};

  std::size_t size() const {
    return lambda.size() * gamma.size() * warmup_epochs.size() * eval_rounds.size() * K.size() *
           train_timesteps.size() * inference_timesteps.size() * learning_rate.size();
  }
};

inline GridSpec grid_spec_from_json(const json& j) {
  GridSpec g;
  detail::ObjectReader r(j, "grid");
  r.get("lambda", g.lambda);
  r.get("gamma", g.gamma);
  r.get("warmup_epochs", g.warmup_epochs);
  r.get("eval_rounds", g.eval_rounds);
  r.get("K", g.K);
  r.get("train_timesteps", g.train_timesteps);
  r.get("inference_timesteps", g.inference_timesteps);
  r.get("learning_rate", g.learning_rate);
  r.finish();
  require(g.size() > 0, ErrorCode::InvalidConfig, "every grid axis needs at least one value");
  return g;
}

/// Config for the i-th grid point (last axis varies fastest).
inline PipelineConfig grid_point(const PipelineConfig& base, const GridSpec& g, std::size_t index) {
  PipelineConfig c = base;
  auto take = [&](const auto& axis) {
    const auto& v = axis[index % axis.size()];
    index /= axis.size();
    return v;
  };
  c.diffusion.learning_rate = take(g.learning_rate);
  c.diffusion.inference_timesteps = take(g.inference_timesteps);
  c.diffusion.train_timesteps = take(g.train_timesteps);
  c.retrieval.K = take(g.K);
  c.diffusion.eval_rounds = take(g.eval_rounds);
  c.diffusion.warmup_epochs = take(g.warmup_epochs);
  c.retrieval.gamma = take(g.gamma);
  c.retrieval.lambda = take(g.lambda);
  return c;
}

struct GridEntry {
  std::size_t index = 0;
  std::string config_hash;
  json knobs;
  double valid_accuracy = -1.0;  // mean over seeds of the diffusion-stage selection score
  double test_accuracy_mean = 0.0;
  double test_accuracy_std = 0.0;
  std::string error;  // non-empty when the point failed (e.g. an invalid combination)
};

/// Runs every grid point (skipping combinations that violate a sub-config
/// invariant) on `jobs` worker threads. Results are ordered by grid index and
/// the best point is the first maximum of the validation score.
inline std::vector<GridEntry> run_grid(const PipelineConfig& base, const GridSpec& grid, unsigned jobs,
                                       const StageLogger& log = StageLogger{}) {
  namespace fs = std::filesystem;
  const std::size_t n = grid.size();
  std::vector<GridEntry> entries(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      PipelineConfig c = grid_point(base, grid, i);
      GridEntry& e = entries[i];
      e.index = i;
      e.knobs = json{{"lambda", c.retrieval.lambda},
                     {"gamma", c.retrieval.gamma},
                     {"warmup_epochs", c.diffusion.warmup_epochs},
                     {"eval_rounds", c.diffusion.eval_rounds},
                     {"K", c.retrieval.K},
                     {"train_timesteps", c.diffusion.train_timesteps},
                     {"inference_timesteps", c.diffusion.inference_timesteps},
                     {"learning_rate", c.diffusion.learning_rate}};
      c.output = "";  // excluded from the hash
      e.config_hash = config_hash(to_json(c));
      c.output = (fs::path(base.output) / ("point-" + e.config_hash)).string();
      c.calibration.report_path.clear();
      try {
        const auto res = run_pipeline(c, log);
        e.test_accuracy_mean = res.report.accuracy_mean;
        e.test_accuracy_std = res.report.accuracy_std;
        double s = 0.0;
        for (double v : res.diffusion_valid_accuracy) s += v;
        e.valid_accuracy = res.diffusion_valid_accuracy.empty()
                               ? -1.0
                               : s / static_cast<double>(res.diffusion_valid_accuracy.size());
      } catch (const Error& err) {
        e.error = err.what();
      }
    }
  };
  const unsigned workers = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(n)));
  std::vector<std::thread> pool;
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::string body;
  for (const auto& e : entries) {
    json j{{"index", e.index},
           {"config_hash", e.config_hash},
           {"knobs", e.knobs},
           {"valid_accuracy", e.valid_accuracy},
           {"test_accuracy_mean", e.test_accuracy_mean},
           {"test_accuracy_std", e.test_accuracy_std}};
    if (!e.error.empty()) j["error"] = e.error;
    body += j.dump();
    body += '\n';
  }
  std::error_code ec;
  fs::create_directories(base.output, ec);
  detail::write_text(fs::path(base.output) / "grid.jsonl", body);
  return entries;
}

inline std::optional<std::size_t> best_grid_entry(const std::vector<GridEntry>& entries) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!entries[i].error.empty()) continue;
    if (!best || entries[i].valid_accuracy > entries[*best].valid_accuracy) best = i;
  }
  return best;
}

}  // namespace labelcal
