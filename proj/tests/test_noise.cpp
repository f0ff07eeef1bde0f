#include "labelcal/noise.hpp"
#include "labelcal/synthetic.hpp"
#include "support.hpp"

using namespace labelcal;

namespace {

std::vector<int> cycling_labels(std::size_t n, int C) {
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<int>(i % static_cast<std::size_t>(C));
  return out;
}

std::vector<std::vector<double>> random_features(std::size_t n, int d, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<double>> out(n, std::vector<double>(static_cast<std::size_t>(d)));
  for (auto& f : out) {
    for (double& v : f) v = standard_normal(rng);
  }
  return out;
}

}  // namespace

TEST(Noise, ZeroRatioIsIdentity) {
  const auto labels = cycling_labels(500, 5);
  const auto feats = random_features(500, 4, 1);
  for (NoiseKind kind : {NoiseKind::Symmetric, NoiseKind::Asymmetric, NoiseKind::InstanceDependent}) {
    EXPECT_EQ(inject_noise(feats, labels, 5, {kind, 0.0, 3}), labels) << to_string(kind);
  }
}

TEST(Noise, SymmetricFlipsUniformlyToOtherClasses) {
  const int C = 9;
  const auto labels = cycling_labels(45000, C);  // 5000 per class keeps 0.02 near 3 sigma
  const auto noisy = inject_symmetric(labels, C, {NoiseKind::Symmetric, 0.5, 7});
  const auto tm = empirical_transition_matrix(labels, noisy, C);
  for (int a = 0; a < C; ++a) {
    EXPECT_NEAR(tm.normalized(a, a), 0.5, 0.02);
    for (int b = 0; b < C; ++b) {
      if (a != b) {
        EXPECT_NEAR(tm.normalized(a, b), 0.5 / (C - 1), 0.02);
      }
    }
  }
}

TEST(Noise, AsymmetricFullRatioShiftsCyclically) {
  const std::vector<int> labels{0, 1, 2};
  EXPECT_EQ(inject_asymmetric(labels, 3, {NoiseKind::Asymmetric, 1.0, 0}), (std::vector<int>{1, 2, 0}));
}

TEST(Noise, AsymmetricHalfRatioTransition) {
  const int C = 4;
  const auto labels = cycling_labels(10000, C);
  const auto tm = empirical_transition_matrix(labels, inject_asymmetric(labels, C, {NoiseKind::Asymmetric, 0.5, 2}), C);
  for (int a = 0; a < C; ++a) {
    for (int b = 0; b < C; ++b) {
      const double target = b == a ? 0.5 : b == (a + 1) % C ? 0.5 : 0.0;
      EXPECT_NEAR(tm.normalized(a, b), target, 0.02) << a << "," << b;
    }
  }
}

TEST(Noise, InstanceDependentRatioAndSeedSensitivity) {
  const int C = 4;
  const auto labels = cycling_labels(10000, C);
  const auto feats = random_features(10000, 8, 4);
  const auto a = inject_instance_dependent(feats, labels, C, {NoiseKind::InstanceDependent, 0.5, 1});
  const auto b = inject_instance_dependent(feats, labels, C, {NoiseKind::InstanceDependent, 0.5, 2});
  EXPECT_NEAR(noise_ratio(labels, a), 0.5, 0.03);
  EXPECT_NEAR(noise_ratio(labels, b), 0.5, 0.03);
  EXPECT_GT(frobenius_distance(empirical_transition_matrix(labels, a, C), empirical_transition_matrix(labels, b, C)),
            0.0);
  EXPECT_EQ(inject_instance_dependent(feats, labels, C, {NoiseKind::InstanceDependent, 0.5, 1}), a);
}

TEST(Noise, InstanceDependentLengthMismatch) {
  const auto labels = cycling_labels(10, 3);
  EXPECT_ERROR_CODE(inject_instance_dependent(random_features(9, 2, 0), labels, 3, {NoiseKind::InstanceDependent, 0.3, 0}),
                    ErrorCode::DimensionMismatch);
}

TEST(Noise, TransitionMatrixCounts) {
  const std::vector<int> truth{0, 0, 1, 1};
  const std::vector<int> observed{0, 1, 1, 1};
  const auto tm = empirical_transition_matrix(truth, observed, 2);
  EXPECT_EQ(tm.counts, (std::vector<std::vector<long>>{{1, 1}, {0, 2}}));
  EXPECT_DOUBLE_EQ(tm.normalized(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(tm.normalized(0, 1), 0.5);
  EXPECT_DOUBLE_EQ(tm.normalized(1, 0), 0.0);
  EXPECT_DOUBLE_EQ(tm.normalized(1, 1), 1.0);

  const auto ident = empirical_transition_matrix(truth, truth, 2);
  EXPECT_TRUE(ident.normalized.isApprox(Matrix::Identity(2, 2)));
  EXPECT_ERROR_CODE(empirical_transition_matrix(truth, std::vector<int>{0, 1, 2, 1}, 2), ErrorCode::LabelOutOfRange);
}

TEST(Noise, TransitionRowsAreStochastic) {
  const int C = 5;
  const auto labels = cycling_labels(1000, C);
  const auto tm = empirical_transition_matrix(labels, inject_symmetric(labels, C, {NoiseKind::Symmetric, 0.3, 1}), C);
  for (int a = 0; a < C; ++a) {
    EXPECT_NEAR(tm.normalized.row(a).sum(), 1.0, 1e-12);
    EXPECT_GE(tm.normalized.row(a).minCoeff(), 0.0);
  }
}

TEST(Noise, NoiseRatioEdgeCases) {
  const std::vector<int> a{0, 1, 2};
  EXPECT_DOUBLE_EQ(noise_ratio(a, a), 0.0);
  EXPECT_DOUBLE_EQ(noise_ratio(a, std::vector<int>{1, 2, 0}), 1.0);
  EXPECT_ERROR_CODE(noise_ratio(a, std::vector<int>{1, 2}), ErrorCode::LengthMismatch);
}

TEST(Noise, ApplyNoiseKeepsCleanLabelsAsTruth) {
  SyntheticSpec spec;
  spec.train = 400;
  spec.seed = 2;
  const Dataset clean = make_gaussian_mixture(spec);
  const Dataset noisy = apply_noise(clean, {NoiseKind::Symmetric, 0.4, 5});
  std::vector<int> truth, observed;
  for (std::size_t i = 0; i < clean.records.size(); ++i) {
    EXPECT_EQ(noisy.records[i].true_label, clean.records[i].true_label);
    truth.push_back(*noisy.records[i].true_label);
    observed.push_back(*noisy.records[i].noisy_label);
  }
  EXPECT_NEAR(noise_ratio(truth, observed), 0.4, 0.03);
  EXPECT_FALSE(noisy.dynamics.has_value());
}
