#pragma once

// Stage-I surrogate classifier. M co-regularized softmax branches are trained
// on noisy labels while the per-epoch consensus probabilities of every sample
// are recorded as its training dynamics.

#include <optional>
#include <vector>

#include "labelcal/dataset.hpp"
#include "labelcal/nn.hpp"

namespace labelcal {

struct ClassifierParams {
  std::optional<DenseLayer> hidden;  // tanh hidden layer, d x h
  DenseLayer output;                 // (h or d) x C

  std::vector<Matrix*> tensors() {
    std::vector<Matrix*> out;
    if (hidden) {
      out.push_back(&hidden->weight);
      out.push_back(&hidden->bias);
    }
    out.push_back(&output.weight);
    out.push_back(&output.bias);
    return out;
  }

  std::vector<const Matrix*> tensors() const {
    auto out = const_cast<ClassifierParams*>(this)->tensors();
    return {out.begin(), out.end()};
  }

  ClassifierParams zeros_like() const {
    ClassifierParams g;
    if (hidden) g.hidden = hidden->zeros_like();
    g.output = output.zeros_like();
    return g;
  }

  bool all_finite() const {
    for (const Matrix* t : tensors()) {
      if (!t->allFinite()) return false;
    }
    return true;
  }

  bool operator==(const ClassifierParams&) const = default;
};

struct TrainConfig {
  int epochs = 10;
  int batch_size = 128;
  double learning_rate = 5e-5;
  int branches = 3;
  double coreg_weight = 1.0;
  double coreg_epsilon = 1e-8;
  int hidden_units = 0;  // 0 = linear softmax
  std::uint64_t seed = 0;

  void validate() const {
    require(epochs >= 1, ErrorCode::InvalidConfig, "epochs must be >= 1");
    require(batch_size >= 1, ErrorCode::InvalidConfig, "batch_size must be >= 1");
    require(branches >= 1, ErrorCode::InvalidConfig, "branches must be >= 1");
    require(learning_rate > 0.0, ErrorCode::InvalidConfig, "learning_rate must be > 0");
    require(coreg_weight >= 0.0, ErrorCode::InvalidConfig, "coreg_weight must be >= 0");
    require(coreg_epsilon > 0.0, ErrorCode::InvalidConfig, "coreg_epsilon must be > 0");
    require(hidden_units >= 0, ErrorCode::InvalidConfig, "hidden_units must be >= 0");
  }
};

struct TrainedEnsemble {
  int num_classes = 0;
  int feature_dim = 0;
  std::vector<std::vector<ClassifierParams>> snapshots;  // [epoch][branch]
  std::vector<DynamicsRecord> dynamics;                  // one per record, E x C consensus probabilities
  std::vector<double> epoch_valid_accuracy;              // vs noisy validation labels
  std::vector<double> epoch_train_loss;
  int selected_epoch = 0;

  int epochs() const { return static_cast<int>(snapshots.size()); }
  const std::vector<ClassifierParams>& branch_params() const { return snapshots.at(selected_epoch); }
};

// ---------------------------------------------------------------------------

inline ClassifierParams init_classifier(int feature_dim, int num_classes, int hidden_units, Rng& rng) {
  ClassifierParams p;
  if (hidden_units > 0) {
    p.hidden = glorot_layer(feature_dim, hidden_units, rng);
    p.output = glorot_layer(hidden_units, num_classes, rng);
  } else {
    p.output = glorot_layer(feature_dim, num_classes, rng);
  }
  return p;
}

struct ClassifierActivations {
  Matrix hidden;  // empty for the linear model
  Matrix probs;
};

inline ClassifierActivations classifier_forward(const ClassifierParams& p, const Matrix& x) {
  ClassifierActivations a;
  if (p.hidden) {
    a.hidden = tanh_forward(p.hidden->forward(x));
    a.probs = softmax_rows(p.output.forward(a.hidden));
  } else {
    a.probs = softmax_rows(p.output.forward(x));
  }
  return a;
}

struct ClassifierLoss {
  double total = 0.0;
  double cross_entropy = 0.0;  // averaged over branches and samples
  double coreg = 0.0;
};

/// Mean cross-entropy over branches plus `coreg_weight` times l_CR. When
/// `grads` is non-null it receives one gradient per branch.
inline ClassifierLoss classifier_loss(const std::vector<ClassifierParams>& branches, const Matrix& x,
                                      std::span<const int> labels, double coreg_weight, double coreg_epsilon,
                                      std::vector<ClassifierParams>* grads) {
  require(!branches.empty(), ErrorCode::ShapeMismatch, "no branches");
  require(static_cast<Eigen::Index>(labels.size()) == x.rows(), ErrorCode::ShapeMismatch,
          "labels and features differ in length");
  const std::size_t m_count = branches.size();
  const Eigen::Index n = x.rows();
  std::vector<ClassifierActivations> acts;
  acts.reserve(m_count);
  for (const auto& b : branches) acts.push_back(classifier_forward(b, x));

  ClassifierLoss out;
  for (const auto& a : acts) {
    for (Eigen::Index i = 0; i < n; ++i) out.cross_entropy -= std::log(a.probs(i, labels[i]));
  }
  out.cross_entropy /= static_cast<double>(m_count) * static_cast<double>(n);

  const bool need_coreg = m_count > 1 && coreg_weight > 0.0;
  std::vector<Matrix> probs;
  if (need_coreg) {
    for (const auto& a : acts) probs.push_back(a.probs);
  }
  const CoregResult cr = need_coreg ? coregularization(probs, coreg_epsilon, grads != nullptr) : CoregResult{};
  out.coreg = cr.loss;
  out.total = out.cross_entropy + coreg_weight * out.coreg;
  if (!grads) return out;

  grads->clear();
  const double ce_scale = 1.0 / (static_cast<double>(m_count) * static_cast<double>(n));
  for (std::size_t m = 0; m < m_count; ++m) {
    const auto& a = acts[m];
    Matrix dlogits = a.probs;
    for (Eigen::Index i = 0; i < n; ++i) dlogits(i, labels[i]) -= 1.0;
    dlogits *= ce_scale;
    if (need_coreg) dlogits += coreg_weight * softmax_backward(a.probs, cr.grad[m]);

    ClassifierParams g = branches[m].zeros_like();
    if (branches[m].hidden) {
      const Matrix dh = branches[m].output.backward(a.hidden, dlogits, g.output);
      branches[m].hidden->backward(x, tanh_backward(a.hidden, dh), *g.hidden);
    } else {
      branches[m].output.backward(x, dlogits, g.output);
    }
    grads->push_back(std::move(g));
  }
  return out;
}

inline Matrix consensus_proba(const std::vector<ClassifierParams>& branches, const Matrix& x) {
  Matrix q = Matrix::Zero(x.rows(), branches.front().output.out_dim());
  for (const auto& b : branches) q += classifier_forward(b, x).probs;
  return q / static_cast<double>(branches.size());
}

namespace detail {

inline Matrix feature_matrix(const Dataset& ds, std::span<const std::size_t> rows) {
  Matrix x(static_cast<Eigen::Index>(rows.size()), ds.manifest.feature_dim);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& f = ds.records[rows[r]].features;
    for (std::size_t j = 0; j < f.size(); ++j) x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = f[j];
  }
  return x;
}

inline std::vector<std::size_t> all_rows(const Dataset& ds) {
  std::vector<std::size_t> rows(ds.records.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return rows;
}

}  // namespace detail

/// Trains M branches with Adam on cross-entropy against noisy labels plus
/// co-regularization, recording consensus probabilities for every record
/// after every epoch. The selected epoch maximizes noisy-validation accuracy
/// (first occurrence on ties).
inline TrainedEnsemble train_with_dynamics(const Dataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  const auto train = ds.indices(Split::Train);
  const auto valid = ds.indices(Split::Valid);
  require(!train.empty(), ErrorCode::EmptySplit, "train split is empty");
  require(!valid.empty(), ErrorCode::EmptySplit, "valid split is empty");
  for (auto idx : {&train, &valid}) {
    for (std::size_t i : *idx) {
      require(ds.records[i].noisy_label.has_value(), ErrorCode::InvariantViolation,
              "record '" + ds.records[i].id + "' has a missing noisy label; resolve it first");
    }
  }

  const int classes = ds.manifest.num_classes;
  const int dim = ds.manifest.feature_dim;
  TrainedEnsemble ens;
  ens.num_classes = classes;
  ens.feature_dim = dim;

  std::vector<ClassifierParams> branches;
  std::vector<Adam> optimizers;
  for (int m = 0; m < cfg.branches; ++m) {
    Rng init_rng(derive_seed(cfg.seed, 0x636c6173ULL, m));
    branches.push_back(init_classifier(dim, classes, cfg.hidden_units, init_rng));
    optimizers.emplace_back(AdamConfig{cfg.learning_rate}, branches.back().tensors());
  }

  const Matrix x_train = detail::feature_matrix(ds, train);
  std::vector<int> y_train;
  for (std::size_t i : train) y_train.push_back(*ds.records[i].noisy_label);
  const auto every = detail::all_rows(ds);
  const Matrix x_all = detail::feature_matrix(ds, every);

  std::vector<Matrix> trajectories(ds.records.size(), Matrix(cfg.epochs, classes));
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, 0x73687566ULL, epoch));
    shuffle(order, shuffle_rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      Matrix xb(static_cast<Eigen::Index>(stop - start), dim);
      std::vector<int> yb;
      for (std::size_t r = start; r < stop; ++r) {
        xb.row(static_cast<Eigen::Index>(r - start)) = x_train.row(static_cast<Eigen::Index>(order[r]));
        yb.push_back(y_train[order[r]]);
      }
      std::vector<ClassifierParams> grads;
      const auto loss = classifier_loss(branches, xb, yb, cfg.coreg_weight, cfg.coreg_epsilon, &grads);
      require(std::isfinite(loss.total), ErrorCode::NonFiniteLoss,
              "loss diverged at epoch " + std::to_string(epoch));
      for (std::size_t m = 0; m < branches.size(); ++m) optimizers[m].step(branches[m].tensors(), grads[m].tensors());
      loss_sum += loss.total;
      ++batches;
    }
    for (const auto& b : branches) {
      require(b.all_finite(), ErrorCode::NonFiniteLoss, "parameters diverged at epoch " + std::to_string(epoch));
    }
    ens.epoch_train_loss.push_back(loss_sum / static_cast<double>(batches));

    const Matrix q = consensus_proba(branches, x_all);
    for (std::size_t i = 0; i < every.size(); ++i) trajectories[i].row(epoch) = q.row(static_cast<Eigen::Index>(i));
    std::size_t correct = 0;
    for (std::size_t i : valid) correct += argmax(q.row(static_cast<Eigen::Index>(i))) == *ds.records[i].noisy_label;
    ens.epoch_valid_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(valid.size()));
    ens.snapshots.push_back(branches);
  }

  ens.selected_epoch = static_cast<int>(
      std::max_element(ens.epoch_valid_accuracy.begin(), ens.epoch_valid_accuracy.end()) -
      ens.epoch_valid_accuracy.begin());
  ens.dynamics.reserve(ds.records.size());
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    ens.dynamics.push_back(DynamicsRecord{ds.records[i].id, std::move(trajectories[i])});
  }
  return ens;
}

/// Consensus probabilities at the selected epoch, or at `epoch` when given.
inline Matrix predict_proba_batch(const TrainedEnsemble& ens, const Matrix& x, std::optional<int> epoch = {}) {
  const int e = epoch.value_or(ens.selected_epoch);
  require(e >= 0 && e < ens.epochs(), ErrorCode::EpochOutOfRange, "epoch " + std::to_string(e) + " out of range");
  require(x.cols() == ens.feature_dim, ErrorCode::ShapeMismatch, "feature width does not match the model");
  return consensus_proba(ens.snapshots[e], x);
}

inline Vector predict_proba(const TrainedEnsemble& ens, std::span<const double> features,
                            std::optional<int> epoch = {}) {
  Matrix x(1, static_cast<Eigen::Index>(features.size()));
  for (std::size_t j = 0; j < features.size(); ++j) x(0, static_cast<Eigen::Index>(j)) = features[j];
  return predict_proba_batch(ens, x, epoch).row(0).transpose();
}

/// Copy of `ds` with the recorded dynamics attached and the manifest updated.
inline Dataset with_dynamics(Dataset ds, const TrainedEnsemble& ens) {
  ds.manifest.dynamics_epochs = ens.epochs();
  ds.dynamics = ens.dynamics;
  return ds;
}

// ---------------------------------------------------------------------------
// Noisy-sample marking from training trajectories.

enum class TrajectoryStatistic { Mean, MeanPlusStd };

/// Per-sample trajectory score: statistics over epochs of the Euclidean
/// distance between the epoch's probability vector and the one-hot noisy label.
inline double trajectory_score(const Matrix& trajectory, int noisy_label, TrajectoryStatistic stat) {
  const Eigen::Index epochs = trajectory.rows();
  std::vector<double> dist(static_cast<std::size_t>(epochs));
  for (Eigen::Index e = 0; e < epochs; ++e) {
    RowVector diff = trajectory.row(e);
    diff[noisy_label] -= 1.0;
    dist[static_cast<std::size_t>(e)] = diff.norm();
  }
  double mean = 0.0;
  for (double d : dist) mean += d;
  mean /= static_cast<double>(epochs);
  if (stat == TrajectoryStatistic::Mean) return mean;
  double var = 0.0;
  for (double d : dist) var += (d - mean) * (d - mean);
  return mean + std::sqrt(var / static_cast<double>(epochs));
}

/// Number of samples marked noisy for a cut-off fraction sigma.
inline std::size_t marked_count(double sigma, std::size_t n) {
  return static_cast<std::size_t>(std::ceil(sigma * static_cast<double>(n) - 1e-9));
}

/// Marks the ceil(sigma * N) samples with the highest trajectory score.
/// Equal scores are resolved by ascending sample id when ids are given, else
/// by position.
inline std::vector<bool> noisy_marker(const std::vector<const Matrix*>& dynamics, std::span<const int> noisy_labels,
                                      double sigma, TrajectoryStatistic stat = TrajectoryStatistic::Mean,
                                      std::span<const std::string> ids = {}) {
  require(sigma >= 0.0 && sigma <= 1.0, ErrorCode::InvalidConfig, "sigma must lie in [0, 1]");
  require(dynamics.size() == noisy_labels.size(), ErrorCode::LengthMismatch, "dynamics and labels differ in length");
  require(ids.empty() || ids.size() == dynamics.size(), ErrorCode::LengthMismatch, "ids and dynamics differ in length");
  const std::size_t n = dynamics.size();
  std::vector<double> score(n);
  for (std::size_t i = 0; i < n; ++i) score[i] = trajectory_score(*dynamics[i], noisy_labels[i], stat);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (score[a] != score[b]) return score[a] > score[b];
    return !ids.empty() && ids[a] < ids[b];
  });
  std::vector<bool> mask(n, false);
  const std::size_t count = std::min(n, marked_count(sigma, n));
  for (std::size_t r = 0; r < count; ++r) mask[order[r]] = true;
  return mask;
}

// ---------------------------------------------------------------------------
// Serialization of the trained ensemble (model file).

inline json to_json(const DenseLayer& l) {
  return json{{"weight", detail::matrix_to_json(l.weight)}, {"bias", detail::matrix_to_json(l.bias)}};
}

inline DenseLayer dense_from_json(const json& j) {
  DenseLayer l;
  l.weight = detail::matrix_from_json(j.at("weight"));
  l.bias = detail::matrix_from_json(j.at("bias"));
  return l;
}

inline json to_json(const ClassifierParams& p) {
  json j;
  j["hidden"] = p.hidden ? to_json(*p.hidden) : json(nullptr);
  j["output"] = to_json(p.output);
  return j;
}

inline ClassifierParams classifier_params_from_json(const json& j) {
  ClassifierParams p;
  if (!j.at("hidden").is_null()) p.hidden = dense_from_json(j["hidden"]);
  p.output = dense_from_json(j.at("output"));
  return p;
}

/// Model file: all per-epoch branch parameters and the validation curve.
/// Dynamics are written separately in the dataset format.
inline json to_json(const TrainedEnsemble& ens) {
  json j;
  j["num_classes"] = ens.num_classes;
  j["feature_dim"] = ens.feature_dim;
  j["selected_epoch"] = ens.selected_epoch;
  j["epoch_valid_accuracy"] = ens.epoch_valid_accuracy;
  j["epoch_train_loss"] = ens.epoch_train_loss;
  json snaps = json::array();
  for (const auto& epoch : ens.snapshots) {
    json branches = json::array();
    for (const auto& b : epoch) branches.push_back(to_json(b));
    snaps.push_back(std::move(branches));
  }
  j["snapshots"] = std::move(snaps);
  return j;
}

inline TrainedEnsemble ensemble_from_json(const json& j) {
  TrainedEnsemble ens;
  ens.num_classes = j.at("num_classes").get<int>();
  ens.feature_dim = j.at("feature_dim").get<int>();
  ens.selected_epoch = j.at("selected_epoch").get<int>();
  ens.epoch_valid_accuracy = j.at("epoch_valid_accuracy").get<std::vector<double>>();
  ens.epoch_train_loss = j.value("epoch_train_loss", std::vector<double>{});
  for (const auto& epoch : j.at("snapshots")) {
    std::vector<ClassifierParams> branches;
    for (const auto& b : epoch) branches.push_back(classifier_params_from_json(b));
    ens.snapshots.push_back(std::move(branches));
  }
  return ens;
}

}  // namespace labelcal
