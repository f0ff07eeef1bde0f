#include <fstream>

#include "labelcal/dataset.hpp"
#include "labelcal/synthetic.hpp"
#include "support.hpp"

using namespace labelcal;

namespace {

Dataset small_dataset(std::size_t train = 20, bool with_dynamics = true) {
  SyntheticSpec spec;
  spec.train = train;
  spec.valid = 6;
  spec.test = 6;
  spec.seed = 3;
  Dataset ds = make_gaussian_mixture(spec);
  if (with_dynamics) {
    ds.manifest.dynamics_epochs = 3;
    std::vector<DynamicsRecord> dyn;
    Rng rng(5);
    for (const auto& r : ds.records) {
      Matrix t(3, spec.num_classes);
      for (Eigen::Index e = 0; e < t.rows(); ++e) {
        for (Eigen::Index c = 0; c < t.cols(); ++c) t(e, c) = uniform01(rng) + 0.01;
        t.row(e) /= t.row(e).sum();
      }
      dyn.push_back({r.id, t});
    }
    ds.dynamics = std::move(dyn);
  }
  return ds;
}

void append_line(const std::filesystem::path& file, const std::string& line) {
  std::ofstream out(file, std::ios::app);
  out << line << '\n';
}

}  // namespace

TEST(Dataset, SaveLoadRoundTripIsBitExact) {
  TempDir dir("ds");
  Dataset ds = small_dataset();
  ds.records[0].noisy_label.reset();
  ds.records[1].true_label.reset();
  ds.records[2].features[0] = 0.1 + 0.2;  // a value with no short decimal form
  save_dataset(ds, dir.path());
  const Dataset back = load_dataset(dir.path());
  EXPECT_EQ(back, ds);
  EXPECT_EQ(back.records[2].features[0], 0.1 + 0.2);
}

TEST(Dataset, ManifestEchoesCounts) {
  TempDir dir("ds");
  SyntheticSpec spec;
  spec.seed = 1;
  save_dataset(make_gaussian_mixture(spec), dir.path());
  const Dataset back = load_dataset(dir.path());
  EXPECT_EQ(back.manifest.num_classes, 4);
  EXPECT_EQ(back.manifest.feature_dim, 16);
  EXPECT_EQ(back.manifest.splits.at("train"), 2000u);
  EXPECT_EQ(back.indices(Split::Train).size(), 2000u);
}

TEST(Dataset, EmptyRecordSequenceIsValid) {
  TempDir dir("ds");
  Dataset ds;
  ds.manifest.num_classes = 2;
  ds.manifest.feature_dim = 3;
  ds.manifest.class_names = {"a", "b"};
  ds.manifest.splits = {{"train", 0}};
  save_dataset(ds, dir.path());
  const Dataset back = load_dataset(dir.path());
  EXPECT_TRUE(back.records.empty());
  EXPECT_EQ(back, ds);
}

TEST(Dataset, ShortFeatureVectorIsFeatureDimMismatch) {
  TempDir dir("ds");
  Dataset ds = small_dataset(20, false);
  ds.manifest.splits["train"] += 1;
  save_dataset(small_dataset(20, false), dir.path());
  // Re-declare the count and add a record with 15 features under d = 16.
  { std::ofstream(dir.path() / "manifest.json") << detail::manifest_to_json(ds.manifest).dump(); }
  SampleRecord bad;
  bad.id = "short";
  bad.features.assign(15, 0.0);
  bad.noisy_label = 0;
  append_line(dir.path() / "train.jsonl", detail::record_to_json(bad).dump());
  EXPECT_ERROR_CODE(load_dataset(dir.path()), ErrorCode::FeatureDimMismatch);
}

TEST(Dataset, UnknownDynamicsIdIsOrphan) {
  TempDir dir("ds");
  save_dataset(small_dataset(), dir.path());
  append_line(dir.path() / "dynamics.train.jsonl",
              R"({"id":"zz9","trajectory":[[0.25,0.25,0.25,0.25],[0.25,0.25,0.25,0.25],[0.25,0.25,0.25,0.25]]})");
  EXPECT_ERROR_CODE(load_dataset(dir.path()), ErrorCode::OrphanDynamics);
}

TEST(Dataset, CountMismatchAndMalformedManifest) {
  TempDir dir("ds");
  Dataset ds = small_dataset(20, false);
  save_dataset(ds, dir.path());
  ds.manifest.splits["train"] = 21;
  { std::ofstream(dir.path() / "manifest.json") << detail::manifest_to_json(ds.manifest).dump(); }
  EXPECT_ERROR_CODE(load_dataset(dir.path()), ErrorCode::CountMismatch);

  { std::ofstream(dir.path() / "manifest.json") << "{not json"; }
  EXPECT_ERROR_CODE(load_dataset(dir.path()), ErrorCode::MalformedManifest);

  ds.manifest.splits["train"] = 20;
  ds.manifest.class_names = {"a", "a", "b", "c"};
  { std::ofstream(dir.path() / "manifest.json") << detail::manifest_to_json(ds.manifest).dump(); }
  EXPECT_ERROR_CODE(load_dataset(dir.path()), ErrorCode::MalformedManifest);

  std::filesystem::remove(dir.path() / "manifest.json");
  EXPECT_ERROR_CODE(load_dataset(dir.path()), ErrorCode::MalformedManifest);
}

TEST(Dataset, DuplicateIdsAreRejectedOnSave) {
  TempDir dir("ds");
  Dataset ds = small_dataset(20, false);
  ds.records[1].id = ds.records[0].id;
  EXPECT_ERROR_CODE(save_dataset(ds, dir.path()), ErrorCode::InvariantViolation);
}

TEST(Dataset, NonStochasticDynamicsRowIsInvariantViolation) {
  Dataset ds = small_dataset();
  (*ds.dynamics)[0].trajectory(1, 0) += 0.1;
  EXPECT_ERROR_CODE(validate(ds), ErrorCode::InvariantViolation);
}

TEST(Dataset, AlignedDynamicsRequiresEveryRecord) {
  Dataset ds = small_dataset();
  EXPECT_EQ(ds.aligned_dynamics().size(), ds.records.size());
  ds.dynamics->pop_back();
  EXPECT_ERROR_CODE(ds.aligned_dynamics(), ErrorCode::MissingDynamics);
  ds.dynamics.reset();
  EXPECT_ERROR_CODE(ds.aligned_dynamics(), ErrorCode::MissingDynamics);
}

TEST(ResolveMissing, NoMissingLabelsIsIdentity) {
  const Dataset ds = small_dataset(20, false);
  EXPECT_EQ(resolve_missing_labels(ds.records, 4, 9), ds.records);
}

TEST(ResolveMissing, FillsTrainAndValidButNotTest) {
  Dataset ds = small_dataset(20, false);
  for (auto& r : ds.records) r.noisy_label.reset();
  const auto out = resolve_missing_labels(ds.records, 4, 9);
  for (const auto& r : out) {
    if (r.split == Split::Test) {
      EXPECT_FALSE(r.noisy_label.has_value());
    } else {
      ASSERT_TRUE(r.noisy_label.has_value());
      EXPECT_GE(*r.noisy_label, 0);
      EXPECT_LT(*r.noisy_label, 4);
    }
  }
  EXPECT_EQ(resolve_missing_labels(ds.records, 4, 9), out);
  EXPECT_EQ(resolve_missing_labels(out, 4, 10), out);
}

TEST(ResolveMissing, BinaryDrawIsUniform) {
  std::vector<SampleRecord> records(100000);
  for (std::size_t i = 0; i < records.size(); ++i) records[i].id = std::to_string(i);
  const auto out = resolve_missing_labels(records, 2, 42);
  std::size_t zeros = 0;
  for (const auto& r : out) zeros += *r.noisy_label == 0;
  EXPECT_NEAR(static_cast<double>(zeros) / static_cast<double>(out.size()), 0.5, 0.005);
}
