#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "labelcal/pipeline.hpp"
#include "support.hpp"

using namespace labelcal;
namespace fs = std::filesystem;

namespace {

// A run small enough for a unit test: a few hundred records, shallow nets.
json tiny_config(const fs::path& out) {
  json j = json::parse(R"({
    "synthetic": {"train": 160, "valid": 40, "test": 40, "feature_dim": 6, "seed": 3},
    "noise": {"kind": "sn", "ratio": 0.3, "seed": 4},
    "classifier": {"epochs": 3, "learning_rate": 0.02, "batch_size": 32},
    "retrieval": {"K": 5},
    "diffusion": {"warmup_epochs": 1, "eval_rounds": 2, "total_epochs": 3, "train_timesteps": 40,
                  "inference_timesteps": 4, "hidden": 16, "time_embed": 8, "encode_width": 8, "batch_size": 32},
    "calibration": {"seeds": [0, 1]}
  })");
  j["output"] = out.string();
  return j;
}

std::string slurp(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(LABELCAL_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

int error_exit(ErrorCode code) { return 10 + static_cast<int>(code); }

}  // namespace

TEST(Config, RoundTrip) {
  const PipelineConfig cfg = pipeline_config_from_json(tiny_config("/tmp/x"));
  const json once = to_json(cfg);
  EXPECT_EQ(to_json(pipeline_config_from_json(once)), once);
  EXPECT_EQ(cfg.classifier.epochs, 3);
  EXPECT_EQ(cfg.retrieval.K, 5);
  EXPECT_EQ(cfg.retrieval.lambda, 0.9);
  EXPECT_EQ(cfg.calibration.seeds, (std::vector<std::uint64_t>{0, 1}));
}

TEST(Config, UnknownKeysAreRejected) {
  json j = tiny_config("/tmp/x");
  j["classifier"]["epoch"] = 3;
  EXPECT_ERROR_CODE(pipeline_config_from_json(j), ErrorCode::InvalidConfig);
  json k = tiny_config("/tmp/x");
  k["retrieval"]["feature_space"] = "pixels";
  EXPECT_ERROR_CODE(pipeline_config_from_json(k), ErrorCode::InvalidConfig);
}

TEST(Config, InvalidValuesAreRejected) {
  json j = tiny_config("/tmp/x");
  j["retrieval"]["sigma"] = 1.5;
  EXPECT_ERROR_CODE(pipeline_config_from_json(j).validate(), ErrorCode::InvalidConfig);
  json k = tiny_config("/tmp/x");
  k["diffusion"]["warmup_epochs"] = 3;
  EXPECT_ERROR_CODE(pipeline_config_from_json(k).validate(), ErrorCode::InvalidConfig);
  json m = tiny_config("/tmp/x");
  m["calibration"]["seeds"] = json::array();
  EXPECT_ERROR_CODE(pipeline_config_from_json(m).validate(), ErrorCode::InvalidConfig);
}

TEST(Config, HashIsStableAndSensitive) {
  const json a = tiny_config("/tmp/x");
  json b = a;
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  b["retrieval"]["K"] = 6;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Grid, DefaultsCoverDocumentedRanges) {
  const GridSpec g;
  EXPECT_EQ(g.lambda, (std::vector<double>{0.7, 0.8, 0.9, 1.0}));
  EXPECT_EQ(g.gamma, (std::vector<double>{0.4, 0.6, 0.8}));
  EXPECT_EQ(g.warmup_epochs, (std::vector<int>{1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(g.eval_rounds, (std::vector<int>{2, 4, 6, 8}));
  EXPECT_EQ(g.K, (std::vector<int>{10, 20, 30}));
}

TEST(Grid, PointsEnumerateEveryCombinationOnce) {
  GridSpec g;
  g.lambda = {0.8, 0.9};
  g.gamma = {0.6};
  g.warmup_epochs = {1};
  g.eval_rounds = {2, 4};
  g.K = {10};
  g.train_timesteps = {400};
  g.inference_timesteps = {10};
  g.learning_rate = {1e-3, 1e-4};
  const PipelineConfig base = pipeline_config_from_json(tiny_config("/tmp/x"));
  std::set<std::tuple<double, int, double>> seen;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const PipelineConfig c = grid_point(base, g, i);
    seen.insert({c.retrieval.lambda, c.diffusion.eval_rounds, c.diffusion.learning_rate});
  }
  EXPECT_EQ(seen.size(), 8u);
  EXPECT_EQ(grid_point(base, g, 1).diffusion.learning_rate, 1e-4);  // last axis varies fastest
  EXPECT_ERROR_CODE(grid_spec_from_json(json{{"lambdas", {0.5}}}), ErrorCode::InvalidConfig);
}

TEST(Pipeline, EndToEndIsDeterministic) {
  TempDir a("run-a"), b("run-b");
  std::ostringstream log;
  const PipelineResult ra = run_pipeline(pipeline_config_from_json(tiny_config(a.path())), StageLogger(&log));
  const PipelineResult rb = run_pipeline(pipeline_config_from_json(tiny_config(b.path())), StageLogger(nullptr));
  EXPECT_EQ(slurp(ra.report_dir / "report.json"), slurp(rb.report_dir / "report.json"));
  EXPECT_EQ(slurp(ra.report_dir / "report.txt"), slurp(rb.report_dir / "report.txt"));
  EXPECT_EQ(ra.report.per_seed.size(), 2u);
  EXPECT_EQ(ra.report.test_size, 40u);
  EXPECT_TRUE(fs::exists(ra.report_dir / "transition_before.csv"));
  EXPECT_TRUE(fs::exists(ra.report_dir / "transition_after.csv"));
  EXPECT_TRUE(fs::exists(a.path() / "latest.json"));

  // Every stage directory carries its run manifest.
  std::size_t manifests = 0;
  for (const auto& e : fs::recursive_directory_iterator(a.path())) manifests += e.path().filename() == "run.json";
  EXPECT_EQ(manifests, 2u + 2u * 4u + 1u);

  // The structured log holds a start and done event for each stage.
  std::size_t done = 0;
  std::istringstream lines(log.str());
  for (std::string line; std::getline(lines, line);) done += json::parse(line).at("event") == "done";
  EXPECT_EQ(done, manifests);

  // Regenerating the report from disk is byte-identical.
  const std::string before = slurp(ra.report_dir / "report.txt");
  write_report(eval_report_from_json(read_json_file(ra.report_dir / "report.json")), ra.report_dir);
  EXPECT_EQ(slurp(ra.report_dir / "report.txt"), before);
}

TEST(Pipeline, StageFailureNamesTheStage) {
  TempDir dir("fail");
  json j = tiny_config(dir.path());
  j["retrieval"]["K"] = 500;  // more neighbours than clean samples
  try {
    run_pipeline(pipeline_config_from_json(j), StageLogger(nullptr));
    ADD_FAILURE() << "expected KTooLarge";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::KTooLarge);
    EXPECT_NE(std::string(e.what()).find("retrieve-candidates"), std::string::npos);
  }
  // Upstream artifacts stay on disk.
  bool classifier_dir = false;
  for (const auto& e : fs::recursive_directory_iterator(dir.path())) {
    classifier_dir |= e.path().filename().string().rfind("train-classifier-", 0) == 0;
  }
  EXPECT_TRUE(classifier_dir);
}

// CLI

TEST(Cli, UsageErrorsExitWithTwo) {
  EXPECT_EQ(run_cli("no-such-command"), 2);
  EXPECT_EQ(run_cli("noise --ratio 0.5"), 2);
  EXPECT_EQ(run_cli("noise --ratio 1.5 --in a --out b"), 2);
}

TEST(Cli, NoiseRealizesRequestedRatio) {
  TempDir dir("cli-noise");
  const fs::path clean = dir.path() / "clean", noisy = dir.path() / "noisy";
  ASSERT_EQ(run_cli("synth --out " + clean.string() + " --train 4000 --valid 10 --test 10 --seed 1"), 0);
  ASSERT_EQ(run_cli("noise --kind sn --ratio 0.5 --seed 2 --in " + clean.string() + " --out " + noisy.string()), 0);
  const Dataset ds = load_dataset(noisy);
  std::vector<int> t, o;
  for (const auto& r : ds.records) {
    t.push_back(*r.true_label);
    o.push_back(*r.noisy_label);
  }
  EXPECT_NEAR(noise_ratio(t, o), 0.5, 0.03);
  EXPECT_TRUE(fs::exists(noisy / "transition.csv"));
}

TEST(Cli, EvaluateWithoutTrueLabelsFails) {
  TempDir dir("cli-eval");
  Dataset ds;
  ds.manifest.num_classes = 2;
  ds.manifest.feature_dim = 1;
  ds.manifest.class_names = {"a", "b"};
  ds.manifest.splits = {{"test", 1}};
  SampleRecord r;
  r.id = "t0";
  r.split = Split::Test;
  r.features = {0.0};
  r.noisy_label = 1;
  ds.records.push_back(r);
  save_dataset(ds, dir.path() / "ds");
  save_predictions({Prediction{"t0", 0, 1, 1, std::nullopt, {0.5, 0.5}}}, dir.path() / "p.jsonl");
  EXPECT_EQ(run_cli("evaluate --in " + (dir.path() / "ds").string() + " --predictions " +
                    (dir.path() / "p.jsonl").string() + " --out " + (dir.path() / "rep").string()),
            error_exit(ErrorCode::NoTrueLabels));
  EXPECT_EQ(run_cli("evaluate --in " + (dir.path() / "missing").string() + " --predictions x --out y"),
            error_exit(ErrorCode::MalformedManifest));
}

TEST(Cli, StagesChainThroughFiles) {
  TempDir dir("cli-stages");
  const fs::path p = dir.path();
  const std::string cfg = (p / "config.json").string();
  { std::ofstream(cfg) << tiny_config(p / "unused").dump(); }
  ASSERT_EQ(run_cli("synth --out " + (p / "clean").string() + " --train 160 --valid 40 --test 40 --dim 6 --seed 3"), 0);
  ASSERT_EQ(run_cli("noise --kind asn --ratio 0.3 --in " + (p / "clean").string() + " --out " + (p / "noisy").string()), 0);
  ASSERT_EQ(run_cli("train-classifier --config " + cfg + " --in " + (p / "noisy").string() + " --out " +
                    (p / "clf").string()),
            0);
  ASSERT_EQ(run_cli("retrieve-candidates --config " + cfg + " --in " + (p / "clf").string() + " --out " +
                    (p / "cand").string() + " --lambda 0.8"),
            0);
  ASSERT_EQ(run_cli("train-diffusion --config " + cfg + " --candidates " + (p / "cand/candidates.jsonl").string() +
                    " --dynamics " + (p / "clf").string() + " --classifier " + (p / "clf/model.json").string() +
                    " --out " + (p / "diff").string()),
            0);
  ASSERT_EQ(run_cli("calibrate --classifier " + (p / "clf/model.json").string() + " --diffusion " +
                    (p / "diff/model.json").string() + " --in " + (p / "clf").string() + " --out " +
                    (p / "cal").string() + " --seed 0 --seed 1 --both-modes"),
            0);
  ASSERT_EQ(run_cli("evaluate --in " + (p / "clf").string() + " --predictions " +
                    (p / "cal/predictions.jsonl").string() + " --out " + (p / "rep").string()),
            0);
  const std::string first = slurp(p / "rep/report.txt");
  ASSERT_EQ(run_cli("report --run " + (p / "rep").string()), 0);
  EXPECT_EQ(slurp(p / "rep/report.txt"), first);
  const EvalReport rep = eval_report_from_json(read_json_file(p / "rep/report.json"));
  EXPECT_EQ(rep.per_seed.size(), 2u);
  EXPECT_TRUE(rep.alternate_accuracy_mean.has_value());
}
