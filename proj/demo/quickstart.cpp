// Library walk-through: noisy mixture -> classifier -> candidates -> denoiser
// -> calibrated test predictions. Mirrors what `labelcal run` does, one stage
// at a time, without writing artifacts.

#include <cstdio>

#include "labelcal/pipeline.hpp"
#include "labelcal/synthetic.hpp"

using namespace labelcal;

int main() {
  // Same setup as the first replicate of demo/benchmark.json.
  Dataset ds = apply_noise(make_gaussian_mixture(SyntheticSpec{}), {NoiseKind::Symmetric, 0.4, 0});

  TrainConfig clf;
  clf.learning_rate = 0.03;
  clf.hidden_units = 256;
  const TrainedEnsemble ens = train_with_dynamics(ds, clf);
  ds = with_dynamics(ds, ens);
  std::printf("classifier: selected epoch %d, noisy-valid accuracy %.3f\n", ens.selected_epoch,
              ens.epoch_valid_accuracy[ens.selected_epoch]);

  const RetrievalResult ret = retrieve_candidates(ds, RetrievalConfig{});
  const auto kinds = count_kinds(ret.candidates);
  std::printf("candidates: %zu certain, %zu uncertain\n", kinds.certain, kinds.uncertain);

  DistillConfig dcfg;
  dcfg.train_timesteps = 200;
  const DistillData data = make_distill_data(ds, ret.candidates, false);
  const DistillResult distilled = distill_train(data, dcfg);

  const auto test = ds.indices(Split::Test);
  const Matrix prior = predict_proba_batch(ens, detail::feature_matrix(ds, test));
  const Matrix post = calibrate_rows(ens, distilled.model, ds, test, 0, ConditionMode::ArgmaxCondition);
  std::size_t clf_hit = 0, cal_hit = 0;
  for (std::size_t r = 0; r < test.size(); ++r) {
    const int truth = *ds.records[test[r]].true_label;
    clf_hit += argmax(prior.row(static_cast<Eigen::Index>(r))) == truth;
    cal_hit += argmax(post.row(static_cast<Eigen::Index>(r))) == truth;
  }
  std::printf("test accuracy: classifier %.3f, calibrated %.3f\n", static_cast<double>(clf_hit) / test.size(),
              static_cast<double>(cal_hit) / test.size());
}
