// Command-line front end. Every subcommand reads and writes the on-disk
// artifact formats, so stages can be run one at a time or chained by `run`.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "labelcal/pipeline.hpp"

namespace fs = std::filesystem;
using namespace labelcal;

namespace {

constexpr int kUsageExit = 2;
constexpr int kUnexpectedExit = 1;

/// Library errors exit with 10 + the error code's position in ErrorCode.
int exit_code(ErrorCode code) { return 10 + static_cast<int>(code); }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorCode::IoFailure, "cannot create " + dir.string() + ": " + ec.message());
}

/// A config file may hold either the bare section or a whole pipeline config.
json config_section(const std::string& file, const char* section) {
  if (file.empty()) return json::object();
  json j = read_json_file(file);
  if (j.is_object() && j.contains(section)) return j.at(section);
  return j;
}

void print_json(const json& j) { std::cout << j.dump(2) << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"labelcal: calibrate classifiers trained on noisy labels"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "labelcal 0.1.0");
  StageLogger log(&std::cerr);

  // synth ---------------------------------------------------------------
  SyntheticSpec synth_spec;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "write a Gaussian-mixture dataset with clean labels");
  synth->add_option("--out", synth_out, "output dataset directory")->required();
  synth->add_option("--seed", synth_spec.seed, "generator seed");
  synth->add_option("--classes", synth_spec.num_classes, "number of classes");
  synth->add_option("--dim", synth_spec.feature_dim, "feature dimension");
  synth->add_option("--train", synth_spec.train, "train records");
  synth->add_option("--valid", synth_spec.valid, "valid records");
  synth->add_option("--test", synth_spec.test, "test records");
  synth->add_option("--separation", synth_spec.separation, "scale of the class means");
  synth->add_option("--spread", synth_spec.spread, "within-class standard deviation");

  // ingest --------------------------------------------------------------
  std::string ingest_in, ingest_out;
  std::uint64_t ingest_seed = 0;
  auto* ingest_cmd = app.add_subcommand("ingest", "validate a dataset and resolve missing train/valid labels");
  ingest_cmd->add_option("--in", ingest_in, "input dataset directory")->required();
  ingest_cmd->add_option("--out", ingest_out, "output dataset directory")->required();
  ingest_cmd->add_option("--seed", ingest_seed, "seed for resolving missing labels");

  // noise ---------------------------------------------------------------
  std::string noise_kind = "sn", noise_in, noise_out;
  NoiseSpec noise_spec;
  auto* noise = app.add_subcommand("noise", "inject synthetic label noise");
  noise->add_option("--kind", noise_kind, "sn, asn or idn")->check(CLI::IsMember({"sn", "asn", "idn"}));
  noise->add_option("--ratio", noise_spec.ratio, "target noise ratio")->required()->check(CLI::Range(0.0, 1.0));
  noise->add_option("--seed", noise_spec.seed, "noise seed");
  noise->add_option("--idn-stddev", noise_spec.idn_rate_stddev, "spread of per-sample flip rates (idn)");
  noise->add_option("--in", noise_in, "input dataset directory")->required();
  noise->add_option("--out", noise_out, "output dataset directory")->required();

  // train-classifier ------------------------------------------------------
  std::string clf_config, clf_in, clf_out;
  std::optional<std::uint64_t> clf_seed;
  auto* train_clf = app.add_subcommand("train-classifier", "train the noisy-label classifier and record dynamics");
  train_clf->add_option("--config", clf_config, "TrainConfig JSON (or a pipeline config)");
  train_clf->add_option("--in", clf_in, "input dataset directory")->required();
  train_clf->add_option("--out", clf_out, "output directory (dataset with dynamics + model.json)")->required();
  train_clf->add_option("--seed", clf_seed, "overrides the config seed");

  // retrieve-candidates ---------------------------------------------------
  std::string ret_config, ret_in, ret_out, ret_space, ret_weighting, ret_stat;
  std::optional<double> ret_lambda, ret_gamma, ret_sigma;
  std::optional<int> ret_k;
  auto* retrieve = app.add_subcommand("retrieve-candidates", "mark noisy samples and build candidate label sets");
  retrieve->add_option("--config", ret_config, "RetrievalConfig JSON (or a pipeline config)");
  retrieve->add_option("--in", ret_in, "dataset directory with dynamics")->required();
  retrieve->add_option("--out", ret_out, "output directory")->required();
  retrieve->add_option("--lambda", ret_lambda, "certainty threshold (default 0.9)");
  retrieve->add_option("--gamma", ret_gamma, "top-two mass threshold (default 0.8)");
  retrieve->add_option("--K", ret_k, "neighbours (default 10)");
  retrieve->add_option("--sigma", ret_sigma, "fraction marked noisy (default 0.5)");
  retrieve->add_option("--feature-space", ret_space, "dynamics or raw_features")
      ->check(CLI::IsMember({"dynamics", "raw_features"}));
  retrieve->add_option("--weighting", ret_weighting, "uniform or inverse_distance")
      ->check(CLI::IsMember({"uniform", "inverse_distance"}));
  retrieve->add_option("--statistic", ret_stat, "mean or mean_plus_std")->check(CLI::IsMember({"mean", "mean_plus_std"}));

  // train-diffusion -------------------------------------------------------
  std::string diff_config, diff_candidates, diff_dynamics, diff_out, diff_classifier;
  std::optional<std::uint64_t> diff_seed;
  auto* train_diff = app.add_subcommand("train-diffusion", "distill candidates while training the label denoiser");
  train_diff->add_option("--config", diff_config, "DistillConfig JSON (or a pipeline config)");
  train_diff->add_option("--candidates", diff_candidates, "candidates.jsonl")->required();
  train_diff->add_option("--dynamics", diff_dynamics, "dataset directory with dynamics")->required();
  train_diff->add_option("--out", diff_out, "output directory")->required();
  train_diff->add_option("--classifier", diff_classifier, "classifier model.json, enables validation selection");
  train_diff->add_option("--seed", diff_seed, "overrides the config seed");

  // calibrate -------------------------------------------------------------
  std::string cal_classifier, cal_diffusion, cal_in, cal_out, cal_mode = "argmax_condition";
  std::vector<std::uint64_t> cal_seeds{0};
  bool cal_both = false;
  auto* calibrate_cmd = app.add_subcommand("calibrate", "refine classifier predictions with the diffusion posterior");
  calibrate_cmd->add_option("--classifier", cal_classifier, "classifier model.json")->required();
  calibrate_cmd->add_option("--diffusion", cal_diffusion, "diffusion model.json")->required();
  calibrate_cmd->add_option("--in", cal_in, "dataset directory with dynamics")->required();
  calibrate_cmd->add_option("--out", cal_out, "output directory")->required();
  calibrate_cmd->add_option("--mode", cal_mode, "argmax_condition or marginal_condition")
      ->check(CLI::IsMember({"argmax_condition", "marginal_condition", "argmax", "marginal"}));
  calibrate_cmd->add_option("--seed", cal_seeds, "one or more seeds");
  calibrate_cmd->add_flag("--both-modes", cal_both, "also record labels under the other mode");

  // evaluate --------------------------------------------------------------
  std::string eval_in, eval_out, eval_mode = "argmax_condition";
  std::vector<std::string> eval_predictions;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "score calibrated predictions on the clean test split");
  evaluate_cmd->add_option("--in", eval_in, "dataset directory")->required();
  evaluate_cmd->add_option("--predictions", eval_predictions, "predictions.jsonl file(s)")->required();
  evaluate_cmd->add_option("--out", eval_out, "report directory")->required();
  evaluate_cmd->add_option("--mode", eval_mode, "mode the predictions were made with")
      ->check(CLI::IsMember({"argmax_condition", "marginal_condition", "argmax", "marginal"}));

  // report ----------------------------------------------------------------
  std::string report_run;
  auto* report = app.add_subcommand("report", "regenerate tables from an existing run or report directory");
  report->add_option("--run", report_run, "run directory or report directory")->required();

  // run -------------------------------------------------------------------
  std::string run_config, run_out;
  std::vector<std::uint64_t> run_seeds;
  auto* run = app.add_subcommand("run", "run every stage from a pipeline config");
  run->add_option("--config", run_config, "pipeline config JSON")->required();
  run->add_option("--out", run_out, "overrides the config output directory");
  run->add_option("--seed", run_seeds, "overrides the config seeds");

  // grid ------------------------------------------------------------------
  std::string grid_config, grid_file, grid_out;
  unsigned grid_jobs = 1;
  auto* grid = app.add_subcommand("grid", "grid search over retrieval and diffusion knobs");
  grid->add_option("--config", grid_config, "base pipeline config JSON")->required();
  grid->add_option("--grid", grid_file, "axis overrides JSON (default: full documented ranges)");
  grid->add_option("--out", grid_out, "overrides the config output directory");
  grid->add_option("--jobs", grid_jobs, "worker threads")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageExit;
  }

  try {
    if (*synth) {
      const Dataset ds = make_gaussian_mixture(synth_spec);
      save_dataset(ds, synth_out);
      print_json({{"records", ds.records.size()}, {"out", synth_out}});
    } else if (*ingest_cmd) {
      run_stage(log, "ingest", {{"in", ingest_in}}, [&] {
        Dataset ds = load_dataset(ingest_in);
        ds.records = resolve_missing_labels(std::move(ds.records), ds.manifest.num_classes, ingest_seed);
        validate(ds);
        save_dataset(ds, ingest_out);
        print_json({{"records", ds.records.size()}, {"out", ingest_out}});
      });
    } else if (*noise) {
      noise_spec.kind = *parse_noise_kind(noise_kind);
      run_stage(log, "noise", {{"in", noise_in}, {"seed", noise_spec.seed}}, [&] {
        const Dataset clean = load_dataset(noise_in);
        const Dataset noisy = apply_noise(clean, noise_spec);
        save_dataset(noisy, noise_out);
        std::vector<int> t, o;
        for (const auto& r : noisy.records) {
          t.push_back(*r.true_label);
          o.push_back(*r.noisy_label);
        }
        const auto tm = empirical_transition_matrix(t, o, noisy.manifest.num_classes);
        detail::write_text(fs::path(noise_out) / "transition.csv", to_csv(tm, noisy.manifest.class_names));
        print_json({{"realized_ratio", noise_ratio(t, o)}, {"out", noise_out}});
      });
    } else if (*train_clf) {
      TrainConfig cfg = train_config_from_json(config_section(clf_config, "classifier"));
      if (clf_seed) cfg.seed = *clf_seed;
      run_stage(log, "train-classifier", {{"seed", cfg.seed}}, [&] {
        const Dataset ds = load_dataset(clf_in);
        const TrainedEnsemble ens = train_with_dynamics(ds, cfg);
        save_dataset(with_dynamics(ds, ens), clf_out);
        detail::write_text(fs::path(clf_out) / "model.json", to_json(ens).dump() + "\n");
        print_json({{"selected_epoch", ens.selected_epoch}, {"valid_accuracy", ens.epoch_valid_accuracy}});
      });
    } else if (*retrieve) {
      RetrievalConfig cfg = retrieval_config_from_json(config_section(ret_config, "retrieval"));
      if (ret_lambda) cfg.lambda = *ret_lambda;
      if (ret_gamma) cfg.gamma = *ret_gamma;
      if (ret_k) cfg.K = *ret_k;
      if (ret_sigma) cfg.sigma = *ret_sigma;
      if (!ret_space.empty()) cfg.feature_space = *detail::parse_feature_space(ret_space);
      if (!ret_weighting.empty()) cfg.distance_weighting = *detail::parse_weighting(ret_weighting);
      if (!ret_stat.empty()) cfg.statistic = *detail::parse_statistic(ret_stat);
      run_stage(log, "retrieve-candidates", {{"in", ret_in}}, [&] {
        const Dataset ds = load_dataset(ret_in);
        const RetrievalResult r = retrieve_candidates(ds, cfg);
        ensure_dir(ret_out);
        save_candidates(r.candidates, fs::path(ret_out) / "candidates.jsonl");
        const auto counts = count_kinds(r.candidates);
        const json summary{{"certain", counts.certain}, {"uncertain", counts.uncertain}, {"config", to_json(cfg)}};
        detail::write_text(fs::path(ret_out) / "summary.json", summary.dump(2) + "\n");
        print_json(summary);
      });
    } else if (*train_diff) {
      DistillConfig cfg = distill_config_from_json(config_section(diff_config, "diffusion"));
      if (diff_seed) cfg.seed = *diff_seed;
      run_stage(log, "train-diffusion", {{"seed", cfg.seed}}, [&] {
        const Dataset ds = load_dataset(diff_dynamics);
        const auto sets = load_candidates(diff_candidates);
        const auto train = ds.indices(Split::Train);
        require(sets.size() == train.size(), ErrorCode::LengthMismatch,
                "candidate file does not cover the train split");
        for (std::size_t r = 0; r < train.size(); ++r) {
          require(sets[r].sample_id == ds.records[train[r]].id, ErrorCode::InvariantViolation,
                  "candidate order does not match the train split at '" + sets[r].sample_id + "'");
        }
        const DistillData data = make_distill_data(ds, sets, cfg.condition_on_features);
        std::optional<ValidationData> valid;
        if (!diff_classifier.empty()) {
          valid = make_validation_data(ds, ensemble_from_json(read_json_file(diff_classifier)),
                                       cfg.condition_on_features);
        }
        const DistillResult d = distill_train(data, cfg, valid ? &*valid : nullptr);
        ensure_dir(diff_out);
        save_distill_result(d, diff_out);
        print_json({{"selected_epoch", d.selected_epoch}, {"max_weight_sum_deviation", d.max_weight_sum_deviation}});
      });
    } else if (*calibrate_cmd) {
      const ConditionMode mode = *parse_condition_mode(cal_mode);
      run_stage(log, "calibrate", {{"in", cal_in}}, [&] {
        const Dataset ds = load_dataset(cal_in);
        const TrainedEnsemble ens = ensemble_from_json(read_json_file(cal_classifier));
        const DiffusionModel model = diffusion_model_from_json(read_json_file(cal_diffusion));
        std::vector<Prediction> all;
        for (std::uint64_t seed : cal_seeds) {
          auto p = predict_test(ens, model, ds, seed, mode, cal_both);
          all.insert(all.end(), p.begin(), p.end());
        }
        ensure_dir(cal_out);
        save_predictions(all, fs::path(cal_out) / "predictions.jsonl");
        print_json({{"predictions", all.size()}, {"out", cal_out}});
      });
    } else if (*evaluate_cmd) {
      const ConditionMode mode = *parse_condition_mode(eval_mode);
      run_stage(log, "evaluate", {{"in", eval_in}}, [&] {
        const Dataset ds = load_dataset(eval_in);
        std::vector<Prediction> all;
        for (const auto& f : eval_predictions) {
          auto p = load_predictions(f);
          all.insert(all.end(), p.begin(), p.end());
        }
        const EvalReport rep = evaluate(ds, seed_predictions(ds, all), mode);
        write_report(rep, eval_out);
        std::cout << format_report(rep);
      });
    } else if (*report) {
      fs::path dir = report_run;
      if (!fs::exists(dir / "report.json") && fs::exists(dir / "latest.json")) {
        dir /= read_json_file(dir / "latest.json").at("report_dir").get<std::string>();
      }
      require(fs::exists(dir / "report.json"), ErrorCode::IoFailure, "no report.json under " + report_run);
      const EvalReport rep = eval_report_from_json(read_json_file(dir / "report.json"));
      write_report(rep, dir);
      std::cout << format_report(rep);
    } else if (*run) {
      PipelineConfig cfg = load_pipeline_config(run_config);
      if (!run_out.empty()) cfg.output = run_out;
      if (!run_seeds.empty()) cfg.calibration.seeds = run_seeds;
      const PipelineResult res = run_pipeline(cfg, log);
      std::cout << format_report(res.report) << "report: " << res.report_dir.string() << '\n';
    } else if (*grid) {
      PipelineConfig cfg = load_pipeline_config(grid_config);
      if (!grid_out.empty()) cfg.output = grid_out;
      const GridSpec spec = grid_file.empty() ? GridSpec{} : grid_spec_from_json(read_json_file(grid_file));
      const auto entries = run_grid(cfg, spec, grid_jobs, log);
      const auto best = best_grid_entry(entries);
      require(best.has_value(), ErrorCode::InvalidConfig, "every grid point failed");
      const auto& e = entries[*best];
      print_json({{"points", entries.size()},
                  {"best_index", e.index},
                  {"best_knobs", e.knobs},
                  {"best_valid_accuracy", e.valid_accuracy},
                  {"best_test_accuracy_mean", e.test_accuracy_mean}});
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUnexpectedExit;
  }
  return 0;
}
