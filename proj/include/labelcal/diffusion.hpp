#pragma once

// Simplex label diffusion. Labels live in k-logit space (+k at the class,
// -k elsewhere); the forward process adds Gaussian noise under a cosine
// schedule, and a conditional denoiser predicts the clean label from a noisy
// simplex point, the timestep, the noisy label and an encoding of the sample.

#include <concepts>
#include <functional>
#include <optional>
#include <vector>

#include "labelcal/candidates.hpp"
#include "labelcal/nn.hpp"

namespace labelcal {

// ---------------------------------------------------------------------------
// Schedule

class DiffusionSchedule {
 public:
  DiffusionSchedule() = default;

  /// Cosine schedule: alpha_bar(t) = f(t) / f(0), f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2).
  static DiffusionSchedule cosine(int train_timesteps, double k = 5.0, double offset = 0.008) {
    require(train_timesteps >= 1, ErrorCode::InvalidConfig, "train timesteps must be >= 1");
    require(k > 0.0 && std::isfinite(k), ErrorCode::InvalidConfig, "simplex magnitude k must be positive");
    require(offset >= 0.0, ErrorCode::InvalidConfig, "schedule offset must be >= 0");
    DiffusionSchedule s;
    s.T_ = train_timesteps;
    s.k_ = k;
    s.offset_ = offset;
    constexpr double half_pi = 1.5707963267948966192313216916398;
    auto f = [&](int t) {
      const double c = std::cos(((static_cast<double>(t) / train_timesteps + offset) / (1.0 + offset)) * half_pi);
      return c * c;
    };
    const double f0 = f(0);
    s.alpha_bar_.resize(static_cast<std::size_t>(train_timesteps) + 1);
    s.alpha_bar_[0] = 1.0;
    for (int t = 1; t <= train_timesteps; ++t) s.alpha_bar_[t] = f(t) / f0;
    s.beta_.assign(static_cast<std::size_t>(train_timesteps) + 1, 0.0);
    for (int t = 1; t <= train_timesteps; ++t) {
      s.beta_[t] = std::min(1.0 - s.alpha_bar_[t] / s.alpha_bar_[t - 1], kMaxBeta);
    }
    return s;
  }

  static constexpr double kMaxBeta = 0.999;

  int train_timesteps() const { return T_; }
  double k() const { return k_; }
  double offset() const { return offset_; }

  double alpha_bar(int t) const {
    require(t >= 0 && t <= T_, ErrorCode::TimestepOutOfRange,
            "timestep " + std::to_string(t) + " outside [0, " + std::to_string(T_) + "]");
    return alpha_bar_[static_cast<std::size_t>(t)];
  }

  double beta(int t) const {
    require(t >= 1 && t <= T_, ErrorCode::TimestepOutOfRange, "timestep " + std::to_string(t) + " outside [1, T]");
    return beta_[static_cast<std::size_t>(t)];
  }

  double alpha(int t) const { return 1.0 - beta(t); }

  const std::vector<double>& alpha_bar_table() const { return alpha_bar_; }

 private:
  int T_ = 0;
  double k_ = 5.0;
  double offset_ = 0.008;
  std::vector<double> alpha_bar_;
  std::vector<double> beta_;
};

inline double alpha_bar(int t, const DiffusionSchedule& schedule) { return schedule.alpha_bar(t); }

/// Decreasing grid of `steps` timesteps spread evenly over {1..T}, starting at T.
inline std::vector<int> inference_grid(int train_timesteps, int steps) {
  require(steps >= 1 && steps <= train_timesteps, ErrorCode::InvalidConfig,
          "inference timesteps must lie in [1, train timesteps]");
  if (steps == 1) return {train_timesteps};
  std::vector<int> grid;
  for (int j = 0; j < steps; ++j) {
    const double pos = static_cast<double>(train_timesteps - 1) * (steps - 1 - j) / (steps - 1);
    grid.push_back(1 + static_cast<int>(std::lround(pos)));
  }
  return grid;
}

// ---------------------------------------------------------------------------
// k-logit simplex

inline Vector to_k_logit(int label, int num_classes, double k) {
  require(label >= 0 && label < num_classes, ErrorCode::LabelOutOfRange,
          "label " + std::to_string(label) + " outside [0, " + std::to_string(num_classes) + ")");
  Vector s = Vector::Constant(num_classes, -k);
  s[label] = k;
  return s;
}

inline Matrix to_k_logit_rows(std::span<const int> labels, int num_classes, double k) {
  Matrix s = Matrix::Constant(static_cast<Eigen::Index>(labels.size()), num_classes, -k);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < num_classes, ErrorCode::LabelOutOfRange, "label outside [0, C)");
    s(static_cast<Eigen::Index>(i), labels[i]) = k;
  }
  return s;
}

/// +k at the argmax position (lowest index on exact ties), -k elsewhere.
inline Vector project_argmax(const Vector& logits, double k) {
  Vector s = Vector::Constant(logits.size(), -k);
  s[argmax(logits)] = k;
  return s;
}

/// sqrt(alpha_bar) * s0 + sqrt(1 - alpha_bar) * eps, eps ~ Normal(0, k^2 I).
inline Vector forward_sample_at(const Vector& s0, double alpha_bar_t, double k, Rng& rng) {
  Vector out(s0.size());
  const double signal = std::sqrt(alpha_bar_t);
  const double noise = std::sqrt(1.0 - alpha_bar_t) * k;
  for (Eigen::Index i = 0; i < s0.size(); ++i) out[i] = signal * s0[i] + noise * standard_normal(rng);
  return out;
}

inline Vector forward_sample(const Vector& s0, int t, const DiffusionSchedule& schedule, Rng& rng) {
  return forward_sample_at(s0, schedule.alpha_bar(t), schedule.k(), rng);
}

// ---------------------------------------------------------------------------
// Denoiser network

struct DenoiserArch {
  int num_classes = 2;
  int condition_width = 1;  // width of the raw conditioning vector (flattened dynamics, optionally + features)
  int hidden = 128;
  int time_embed = 64;
  int encode_width = 64;
  double k = 5.0;  // simplex inputs are divided by k

  bool operator==(const DenoiserArch&) const = default;
};

/// Sinusoidal embedding of integer timesteps, one row per entry of `t`.
inline Matrix time_embedding(std::span<const int> t, int width) {
  const int half = width / 2;
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(t.size()), width);
  for (std::size_t r = 0; r < t.size(); ++r) {
    for (int j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * j / std::max(1, half));
      const double angle = static_cast<double>(t[r]) * freq;
      out(static_cast<Eigen::Index>(r), j) = std::sin(angle);
      out(static_cast<Eigen::Index>(r), half + j) = std::cos(angle);
    }
  }
  return out;
}

/// logits = W3 tanh(W2 tanh(W1 [s_t/k | emb(t) | s_noisy/k | tanh(We cond)])).
struct DenoiserNet {
  DenoiserArch arch;
  DenseLayer encoder;
  DenseLayer hidden1;
  DenseLayer hidden2;
  DenseLayer output;

  static DenoiserNet create(const DenoiserArch& arch, Rng& rng) {
    require(arch.num_classes >= 2 && arch.condition_width >= 1 && arch.hidden >= 1 && arch.encode_width >= 1 &&
                arch.time_embed >= 2 && arch.time_embed % 2 == 0 && arch.k > 0.0,
            ErrorCode::InvalidConfig, "invalid denoiser architecture");
    DenoiserNet net;
    net.arch = arch;
    net.encoder = glorot_layer(arch.condition_width, arch.encode_width, rng);
    net.hidden1 = glorot_layer(net.input_width(), arch.hidden, rng);
    net.hidden2 = glorot_layer(arch.hidden, arch.hidden, rng);
    net.output = glorot_layer(arch.hidden, arch.num_classes, rng);
    return net;
  }

  int input_width() const { return 2 * arch.num_classes + arch.time_embed + arch.encode_width; }

  std::vector<Matrix*> tensors() {
    return {&encoder.weight, &encoder.bias, &hidden1.weight, &hidden1.bias,
            &hidden2.weight, &hidden2.bias, &output.weight,  &output.bias};
  }

  std::vector<const Matrix*> tensors() const {
    auto out = const_cast<DenoiserNet*>(this)->tensors();
    return {out.begin(), out.end()};
  }

  DenoiserNet zeros_like() const {
    DenoiserNet g;
    g.arch = arch;
    g.encoder = encoder.zeros_like();
    g.hidden1 = hidden1.zeros_like();
    g.hidden2 = hidden2.zeros_like();
    g.output = output.zeros_like();
    return g;
  }

  struct Cache {
    Matrix cond;
    Matrix encoded;
    Matrix input;
    Matrix h1;
    Matrix h2;
    Matrix logits;
  };

  Cache forward_cached(const Matrix& s_t, std::span<const int> t, const Matrix& s_noisy, const Matrix& cond) const {
    const Eigen::Index b = s_t.rows();
    require(s_t.cols() == arch.num_classes && s_noisy.cols() == arch.num_classes, ErrorCode::ShapeMismatch,
            "simplex inputs must have num_classes columns");
    require(cond.cols() == arch.condition_width, ErrorCode::ShapeMismatch,
            "conditioning width " + std::to_string(cond.cols()) + " != " + std::to_string(arch.condition_width));
    require(s_noisy.rows() == b && cond.rows() == b && static_cast<Eigen::Index>(t.size()) == b,
            ErrorCode::ShapeMismatch, "batch inputs differ in length");
    Cache c;
    c.cond = cond;
    c.encoded = tanh_forward(encoder.forward(cond));
    c.input.resize(b, input_width());
    const int C = arch.num_classes;
    c.input.leftCols(C) = s_t / arch.k;
    c.input.middleCols(C, arch.time_embed) = time_embedding(t, arch.time_embed);
    c.input.middleCols(C + arch.time_embed, C) = s_noisy / arch.k;
    c.input.rightCols(arch.encode_width) = c.encoded;
    c.h1 = tanh_forward(hidden1.forward(c.input));
    c.h2 = tanh_forward(hidden2.forward(c.h1));
    c.logits = output.forward(c.h2);
    return c;
  }

  Matrix logits(const Matrix& s_t, std::span<const int> t, const Matrix& s_noisy, const Matrix& cond) const {
    return forward_cached(s_t, t, s_noisy, cond).logits;
  }

  /// Accumulates d(loss)/d(theta) into `grad` given d(loss)/d(logits).
  void backward(const Cache& c, const Matrix& dlogits, DenoiserNet& grad) const {
    const Matrix dh2 = output.backward(c.h2, dlogits, grad.output);
    const Matrix dh1 = hidden2.backward(c.h1, tanh_backward(c.h2, dh2), grad.hidden2);
    const Matrix din = hidden1.backward(c.input, tanh_backward(c.h1, dh1), grad.hidden1);
    const Matrix denc = din.rightCols(arch.encode_width);
    encoder.backward(c.cond, tanh_backward(c.encoded, denc), grad.encoder);
  }

  bool operator==(const DenoiserNet&) const = default;
};

template <typename D>
concept Denoiser = requires(const D& d, const Matrix& m, std::span<const int> t) {
  { d.logits(m, t, m, m) } -> std::convertible_to<Matrix>;
};

struct DenoiserOutput {
  Vector logits;
  Vector probs;
};

/// Single-sample forward pass.
inline DenoiserOutput denoiser_forward(const DenoiserNet& net, const Vector& s_t, int t, const Vector& s_noisy,
                                       const RowVector& cond) {
  const int ts[] = {t};
  const Matrix logits = net.logits(s_t.transpose(), ts, s_noisy.transpose(), cond);
  DenoiserOutput out;
  out.logits = logits.row(0).transpose();
  out.probs = softmax(out.logits);
  return out;
}

// ---------------------------------------------------------------------------
// Loss

struct DiffusionBatch {
  std::vector<int> target;     // label the item is trained towards
  Matrix s_noisy;              // k-logit of the conditioning (noisy) label, one row per item
  Matrix cond;                 // raw conditioning vector, one row per item
  std::vector<double> weight;  // per-item loss weight (1 for certain items)

  std::size_t size() const { return target.size(); }
};

struct DiffusionLoss {
  double total = 0.0;
  double cross_entropy = 0.0;      // weighted, averaged over branches and items
  double coreg = 0.0;
  std::vector<double> per_item;    // unweighted branch-averaged -log p(target)
};

/// Loss at given noisy points s_t and timesteps t:
///   (1/M) sum_m (1/B) sum_i w_i * -log p_m(target_i | s_t, t, s_noisy, cond) + coreg_weight * l_CR.
inline DiffusionLoss denoiser_loss_at(const std::vector<DenoiserNet>& branches, const DiffusionBatch& batch,
                                      const Matrix& s_t, std::span<const int> t, double coreg_weight,
                                      double coreg_epsilon, std::vector<DenoiserNet>* grads) {
  require(!branches.empty(), ErrorCode::ShapeMismatch, "no branches");
  const auto b = static_cast<Eigen::Index>(batch.size());
  require(batch.weight.size() == batch.size() && s_t.rows() == b, ErrorCode::ShapeMismatch,
          "batch fields differ in length");
  const double m_count = static_cast<double>(branches.size());
  std::vector<DenoiserNet::Cache> caches;
  std::vector<Matrix> probs;
  for (const auto& net : branches) {
    caches.push_back(net.forward_cached(s_t, t, batch.s_noisy, batch.cond));
    probs.push_back(softmax_rows(caches.back().logits));
  }

  DiffusionLoss out;
  out.per_item.assign(batch.size(), 0.0);
  for (const auto& p : probs) {
    for (Eigen::Index i = 0; i < b; ++i) {
      const double nll = -std::log(p(i, batch.target[i]));
      out.per_item[i] += nll / m_count;
      out.cross_entropy += batch.weight[i] * nll;
    }
  }
  out.cross_entropy /= m_count * static_cast<double>(std::max<Eigen::Index>(b, 1));

  const bool need_coreg = branches.size() > 1 && coreg_weight > 0.0;
  const CoregResult cr = need_coreg ? coregularization(probs, coreg_epsilon, grads != nullptr) : CoregResult{};
  out.coreg = cr.loss;
  out.total = out.cross_entropy + coreg_weight * out.coreg;
  if (!grads) return out;

  grads->clear();
  const double scale = 1.0 / (m_count * static_cast<double>(std::max<Eigen::Index>(b, 1)));
  for (std::size_t m = 0; m < branches.size(); ++m) {
    Matrix dlogits = probs[m];
    for (Eigen::Index i = 0; i < b; ++i) {
      dlogits(i, batch.target[i]) -= 1.0;
      dlogits.row(i) *= batch.weight[i] * scale;
    }
    if (need_coreg) dlogits += coreg_weight * softmax_backward(probs[m], cr.grad[m]);
    DenoiserNet g = branches[m].zeros_like();
    branches[m].backward(caches[m], dlogits, g);
    grads->push_back(std::move(g));
  }
  return out;
}

/// Draws t ~ U{1..T} and s_t from the closed-form forward process for every
/// item (shared across branches), then evaluates denoiser_loss_at.
inline DiffusionLoss training_loss(const std::vector<DenoiserNet>& branches, const DiffusionBatch& batch,
                                   const DiffusionSchedule& schedule, Rng& rng, double coreg_weight,
                                   double coreg_epsilon, std::vector<DenoiserNet>* grads) {
  const int C = branches.front().arch.num_classes;
  Matrix s_t(static_cast<Eigen::Index>(batch.size()), C);
  std::vector<int> t(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    t[i] = static_cast<int>(uniform_int(rng, 1, schedule.train_timesteps()));
    s_t.row(static_cast<Eigen::Index>(i)) =
        forward_sample(to_k_logit(batch.target[i], C, schedule.k()), t[i], schedule, rng).transpose();
  }
  return denoiser_loss_at(branches, batch, s_t, t, coreg_weight, coreg_epsilon, grads);
}

// ---------------------------------------------------------------------------
// Reverse process

/// Batched reverse process, one independent engine per row. Starting from
/// s ~ Normal(0, k^2 I) at the largest grid timestep, each step projects the
/// branch-consensus prediction to its k-logit vertex and re-noises it to the
/// next grid timestep. Returns the consensus softmax of the final step.
template <Denoiser D>
Matrix infer_reverse_batch(const std::vector<D>& branches, const Matrix& s_noisy, const Matrix& cond,
                           const DiffusionSchedule& schedule, int inference_timesteps, std::vector<Rng>& rngs) {
  require(!branches.empty(), ErrorCode::ShapeMismatch, "no denoiser branches");
  const Eigen::Index b = s_noisy.rows();
  const Eigen::Index C = s_noisy.cols();
  require(static_cast<Eigen::Index>(rngs.size()) == b, ErrorCode::ShapeMismatch, "one engine per row required");
  const auto grid = inference_grid(schedule.train_timesteps(), inference_timesteps);
  const double k = schedule.k();

  Matrix s(b, C);
  for (Eigen::Index i = 0; i < b; ++i) {
    for (Eigen::Index c = 0; c < C; ++c) s(i, c) = k * standard_normal(rngs[i]);
  }
  Matrix q(b, C);
  std::vector<int> ts(static_cast<std::size_t>(b));
  for (std::size_t j = 0; j < grid.size(); ++j) {
    std::fill(ts.begin(), ts.end(), grid[j]);
    q.setZero();
    for (const auto& net : branches) q += softmax_rows(net.logits(s, ts, s_noisy, cond));
    q /= static_cast<double>(branches.size());

    const int t_prev = j + 1 < grid.size() ? grid[j + 1] : 0;
    const double signal = std::sqrt(schedule.alpha_bar(t_prev));
    const double noise = std::sqrt(1.0 - schedule.alpha_bar(t_prev)) * k;
    for (Eigen::Index i = 0; i < b; ++i) {
      const int top = argmax(q.row(i));
      for (Eigen::Index c = 0; c < C; ++c) {
        const double vertex = c == top ? k : -k;
        s(i, c) = signal * vertex + (t_prev > 0 ? noise * standard_normal(rngs[i]) : 0.0);
      }
    }
  }
  return q;
}

template <Denoiser D>
Vector infer_reverse(const std::vector<D>& branches, const Vector& s_noisy, const RowVector& cond,
                     const DiffusionSchedule& schedule, int inference_timesteps, Rng& rng) {
  std::vector<Rng> rngs{rng};
  const Matrix q = infer_reverse_batch(branches, Matrix(s_noisy.transpose()), Matrix(cond), schedule,
                                       inference_timesteps, rngs);
  rng = rngs.front();
  return q.row(0).transpose();
}

// ---------------------------------------------------------------------------
// Candidate distillation

struct DistillConfig {
  int warmup_epochs = 2;  // epochs 0..warmup_epochs train on certain samples only
  int eval_rounds = 2;
  int total_epochs = 10;
  int train_timesteps = 800;
  int inference_timesteps = 10;
  double k = 5.0;
  double schedule_offset = 0.008;
  int batch_size = 128;
  double learning_rate = 5e-4;
  int branches = 3;
  double coreg_weight = 1.0;
  double coreg_epsilon = 1e-8;
  int hidden = 128;
  int time_embed = 64;
  int encode_width = 64;
  bool condition_on_features = false;
  bool select_by_validation = true;
  std::uint64_t seed = 0;

  void validate() const {
    require(warmup_epochs >= 0 && warmup_epochs < total_epochs, ErrorCode::InvalidConfig,
            "warmup epochs must satisfy 0 <= alpha < total epochs");
    require(eval_rounds >= 1, ErrorCode::InvalidConfig, "eval rounds must be >= 1");
    require(train_timesteps >= 1, ErrorCode::InvalidConfig, "train timesteps must be >= 1");
    require(inference_timesteps >= 1 && inference_timesteps <= train_timesteps, ErrorCode::InvalidConfig,
            "inference timesteps must lie in [1, train timesteps]");
    require(batch_size >= 1 && branches >= 1, ErrorCode::InvalidConfig, "batch size and branches must be >= 1");
    require(learning_rate > 0.0 && coreg_weight >= 0.0 && coreg_epsilon > 0.0, ErrorCode::InvalidConfig,
            "learning rate, coreg weight and epsilon out of range");
  }

  DiffusionSchedule schedule() const { return DiffusionSchedule::cosine(train_timesteps, k, schedule_offset); }
};

/// Raises the weight of `label` by (1 - w) / beta and renormalizes the list.
/// Returns false (weights untouched) when `label` is not a candidate.
inline bool reinforce_candidate(std::vector<Candidate>& candidates, int label, int beta) {
  auto it = std::find_if(candidates.begin(), candidates.end(), [&](const Candidate& c) { return c.label == label; });
  if (it == candidates.end()) return false;
  it->weight += (1.0 - it->weight) / static_cast<double>(beta);
  double total = 0.0;
  for (const auto& c : candidates) total += c.weight;
  for (auto& c : candidates) c.weight /= total;
  return true;
}

/// Inputs for one distillation run; rows of `cond` align with `candidates`.
struct DistillData {
  std::vector<CandidateSet> candidates;
  Matrix cond;
  int num_classes = 0;
};

/// Noisy-validation model selection inputs.
struct ValidationData {
  Matrix cond;
  std::vector<int> conditioning_labels;  // classifier argmax per sample
  std::vector<int> noisy_labels;         // scored against
  std::vector<std::string> ids;
};

struct DistillEpochLog {
  int epoch = 0;
  bool warmup = false;
  double loss = 0.0;
  std::size_t trained_items = 0;
  std::size_t matched_updates = 0;
  double valid_accuracy = -1.0;  // -1 when no validation data
};

struct DiffusionModel {
  DiffusionSchedule schedule;
  std::vector<DenoiserNet> branches;
  int inference_timesteps = 10;
  bool condition_on_features = false;
};

struct DistillResult {
  DiffusionModel model;
  std::vector<CandidateSet> initial;
  std::vector<CandidateSet> refined;
  std::vector<DistillEpochLog> history;
  int selected_epoch = 0;
  double max_weight_sum_deviation = 0.0;  // over every uncertain list after every round
};

/// Called after each evaluation round with (epoch, round, current candidates).
using RoundObserver = std::function<void(int, int, const std::vector<CandidateSet>&)>;

namespace detail {

inline std::vector<Rng> row_engines(std::uint64_t seed, std::span<const std::string> ids, std::uint64_t a,
                                    std::uint64_t b) {
  std::vector<Rng> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.emplace_back(derive_seed(seed, fnv1a(id), a, b));
  return out;
}

}  // namespace detail

/// Calibrated labels for the validation set under the given branches.
inline std::vector<int> predict_labels(const DiffusionModel& model, const Matrix& cond,
                                       std::span<const int> conditioning_labels, std::span<const std::string> ids,
                                       std::uint64_t seed) {
  const int C = model.branches.front().arch.num_classes;
  auto rngs = detail::row_engines(seed, ids, 0x76616cULL, 0);
  const Matrix q = infer_reverse_batch(model.branches, to_k_logit_rows(conditioning_labels, C, model.schedule.k()),
                                       cond, model.schedule, model.inference_timesteps, rngs);
  std::vector<int> out(static_cast<std::size_t>(q.rows()));
  for (Eigen::Index i = 0; i < q.rows(); ++i) out[i] = argmax(q.row(i));
  return out;
}

/// Trains M denoiser branches while distilling uncertain candidate weights.
/// Epochs 0..warmup train on certain samples only. Every later epoch first runs
/// `eval_rounds` full reverse passes over the uncertain samples (reinforcing a
/// predicted label that is among the candidates), then samples one candidate per
/// uncertain sample by weight and trains on certain items (weight 1) plus the
/// sampled uncertain items weighted by the sampled candidate's weight.
inline DistillResult distill_train(const DistillData& data, const DistillConfig& cfg,
                                   const ValidationData* validation = nullptr,
                                   const RoundObserver& observer = nullptr) {
  cfg.validate();
  const std::size_t n = data.candidates.size();
  const int C = data.num_classes;
  require(C >= 2, ErrorCode::InvalidConfig, "num_classes must be >= 2");
  require(static_cast<std::size_t>(data.cond.rows()) == n, ErrorCode::ShapeMismatch,
          "conditioning rows must align with candidate sets");
  for (const auto& s : data.candidates) {
    check_invariants(s);
    require(s.noisy_label >= 0 && s.noisy_label < C, ErrorCode::LabelOutOfRange, "noisy label outside [0, C)");
    for (const auto& c : s.candidates) {
      require(c.label >= 0 && c.label < C, ErrorCode::LabelOutOfRange, "candidate label outside [0, C)");
    }
  }

  std::vector<std::size_t> certain, uncertain;
  for (std::size_t i = 0; i < n; ++i) {
    (data.candidates[i].kind == CandidateKind::Certain ? certain : uncertain).push_back(i);
  }
  require(!certain.empty(), ErrorCode::NoWarmupData, "no certain samples to warm up on");

  DistillResult result;
  result.initial = data.candidates;
  result.refined = data.candidates;
  result.model.schedule = cfg.schedule();
  result.model.inference_timesteps = cfg.inference_timesteps;
  result.model.condition_on_features = cfg.condition_on_features;
  const DiffusionSchedule& schedule = result.model.schedule;
  auto& refined = result.refined;

  DenoiserArch arch;
  arch.num_classes = C;
  arch.condition_width = static_cast<int>(data.cond.cols());
  arch.hidden = cfg.hidden;
  arch.time_embed = cfg.time_embed;
  arch.encode_width = cfg.encode_width;
  arch.k = cfg.k;
  auto& branches = result.model.branches;
  std::vector<Adam> optimizers;
  for (int m = 0; m < cfg.branches; ++m) {
    Rng init_rng(derive_seed(cfg.seed, 0x64656e6fULL, m));
    branches.push_back(DenoiserNet::create(arch, init_rng));
    optimizers.emplace_back(AdamConfig{cfg.learning_rate}, branches.back().tensors());
  }

  std::vector<int> noisy(n);
  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    noisy[i] = data.candidates[i].noisy_label;
    ids[i] = data.candidates[i].sample_id;
  }
  const Matrix s_noisy_all = to_k_logit_rows(noisy, C, cfg.k);

  Matrix unc_cond(static_cast<Eigen::Index>(uncertain.size()), data.cond.cols());
  Matrix unc_noisy(static_cast<Eigen::Index>(uncertain.size()), C);
  std::vector<std::string> unc_ids;
  for (std::size_t u = 0; u < uncertain.size(); ++u) {
    unc_cond.row(static_cast<Eigen::Index>(u)) = data.cond.row(static_cast<Eigen::Index>(uncertain[u]));
    unc_noisy.row(static_cast<Eigen::Index>(u)) = s_noisy_all.row(static_cast<Eigen::Index>(uncertain[u]));
    unc_ids.push_back(ids[uncertain[u]]);
  }

  double best_valid = -1.0;
  std::vector<DenoiserNet> best_branches = branches;

  for (int epoch = 0; epoch < cfg.total_epochs; ++epoch) {
    DistillEpochLog log;
    log.epoch = epoch;
    log.warmup = epoch <= cfg.warmup_epochs;

    // (target, weight) per trained item, aligned with `items`.
    std::vector<std::size_t> items(certain.begin(), certain.end());
    std::vector<int> targets;
    std::vector<double> weights;
    for (std::size_t i : certain) {
      targets.push_back(refined[i].candidates.front().label);
      weights.push_back(1.0);
    }

    if (!log.warmup && !uncertain.empty()) {
      for (int round = 0; round < cfg.eval_rounds; ++round) {
        auto rngs = detail::row_engines(cfg.seed, unc_ids, 0x65766100ULL + static_cast<std::uint64_t>(epoch),
                                        static_cast<std::uint64_t>(round));
        const Matrix q = infer_reverse_batch(branches, unc_noisy, unc_cond, schedule, cfg.inference_timesteps, rngs);
        for (std::size_t u = 0; u < uncertain.size(); ++u) {
          const int predicted = argmax(q.row(static_cast<Eigen::Index>(u)));
          log.matched_updates += reinforce_candidate(refined[uncertain[u]].candidates, predicted, cfg.eval_rounds);
        }
        for (std::size_t i : uncertain) {
          double total = 0.0;
          for (const auto& c : refined[i].candidates) total += c.weight;
          result.max_weight_sum_deviation = std::max(result.max_weight_sum_deviation, std::abs(total - 1.0));
        }
        if (observer) observer(epoch, round, refined);
      }
      for (std::size_t i : uncertain) {
        Rng pick(derive_seed(cfg.seed, fnv1a(ids[i]), 0x7069636bULL, static_cast<std::uint64_t>(epoch)));
        const auto& cands = refined[i].candidates;
        double u = uniform01(pick);
        std::size_t chosen = cands.size() - 1;
        for (std::size_t c = 0; c < cands.size(); ++c) {
          if (u < cands[c].weight) {
            chosen = c;
            break;
          }
          u -= cands[c].weight;
        }
        items.push_back(i);
        targets.push_back(cands[chosen].label);
        weights.push_back(cands[chosen].weight);
      }
    }

    std::vector<std::size_t> order(items.size());
    for (std::size_t r = 0; r < order.size(); ++r) order[r] = r;
    Rng epoch_rng(derive_seed(cfg.seed, 0x64697374ULL, static_cast<std::uint64_t>(epoch)));
    shuffle(order, epoch_rng);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      DiffusionBatch batch;
      batch.s_noisy.resize(static_cast<Eigen::Index>(stop - start), C);
      batch.cond.resize(static_cast<Eigen::Index>(stop - start), data.cond.cols());
      for (std::size_t r = start; r < stop; ++r) {
        const std::size_t item = order[r];
        const auto row = static_cast<Eigen::Index>(r - start);
        batch.target.push_back(targets[item]);
        batch.weight.push_back(weights[item]);
        batch.s_noisy.row(row) = s_noisy_all.row(static_cast<Eigen::Index>(items[item]));
        batch.cond.row(row) = data.cond.row(static_cast<Eigen::Index>(items[item]));
      }
      std::vector<DenoiserNet> grads;
      const auto loss = training_loss(branches, batch, schedule, epoch_rng, cfg.coreg_weight, cfg.coreg_epsilon, &grads);
      require(std::isfinite(loss.total), ErrorCode::NonFiniteLoss,
              "denoiser loss diverged at epoch " + std::to_string(epoch));
      for (std::size_t m = 0; m < branches.size(); ++m) optimizers[m].step(branches[m].tensors(), grads[m].tensors());
      loss_sum += loss.total;
      ++batches;
    }
    log.loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    log.trained_items = items.size();

    if (validation && cfg.select_by_validation) {
      const auto predicted =
          predict_labels(result.model, validation->cond, validation->conditioning_labels, validation->ids, cfg.seed);
      std::size_t hit = 0;
      for (std::size_t i = 0; i < predicted.size(); ++i) hit += predicted[i] == validation->noisy_labels[i];
      log.valid_accuracy = predicted.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(predicted.size());
      if (log.valid_accuracy > best_valid) {
        best_valid = log.valid_accuracy;
        best_branches = branches;
        result.selected_epoch = epoch;
      }
    } else {
      best_branches = branches;
      result.selected_epoch = epoch;
    }
    result.history.push_back(log);
  }
  branches = std::move(best_branches);
  return result;
}

// ---------------------------------------------------------------------------
// Model file

inline json to_json(const DenoiserNet& net) {
  json j;
  j["arch"] = {{"num_classes", net.arch.num_classes}, {"condition_width", net.arch.condition_width},
               {"hidden", net.arch.hidden},           {"time_embed", net.arch.time_embed},
               {"encode_width", net.arch.encode_width}, {"k", net.arch.k}};
  j["encoder"] = to_json(net.encoder);
  j["hidden1"] = to_json(net.hidden1);
  j["hidden2"] = to_json(net.hidden2);
  j["output"] = to_json(net.output);
  return j;
}

inline DenoiserNet denoiser_from_json(const json& j) {
  DenoiserNet net;
  const auto& a = j.at("arch");
  net.arch.num_classes = a.at("num_classes").get<int>();
  net.arch.condition_width = a.at("condition_width").get<int>();
  net.arch.hidden = a.at("hidden").get<int>();
  net.arch.time_embed = a.at("time_embed").get<int>();
  net.arch.encode_width = a.at("encode_width").get<int>();
  net.arch.k = a.at("k").get<double>();
  net.encoder = dense_from_json(j.at("encoder"));
  net.hidden1 = dense_from_json(j.at("hidden1"));
  net.hidden2 = dense_from_json(j.at("hidden2"));
  net.output = dense_from_json(j.at("output"));
  return net;
}

inline json to_json(const DiffusionModel& model) {
  json j;
  j["schedule"] = {{"train_timesteps", model.schedule.train_timesteps()},
                   {"k", model.schedule.k()},
                   {"offset", model.schedule.offset()}};
  j["inference_timesteps"] = model.inference_timesteps;
  j["condition_on_features"] = model.condition_on_features;
  json branches = json::array();
  for (const auto& b : model.branches) branches.push_back(to_json(b));
  j["branches"] = std::move(branches);
  return j;
}

inline DiffusionModel diffusion_model_from_json(const json& j) {
  DiffusionModel model;
  const auto& s = j.at("schedule");
  model.schedule = DiffusionSchedule::cosine(s.at("train_timesteps").get<int>(), s.at("k").get<double>(),
                                             s.at("offset").get<double>());
  model.inference_timesteps = j.at("inference_timesteps").get<int>();
  model.condition_on_features = j.value("condition_on_features", false);
  for (const auto& b : j.at("branches")) model.branches.push_back(denoiser_from_json(b));
  require(!model.branches.empty(), ErrorCode::InvariantViolation, "diffusion model has no branches");
  return model;
}

}  // namespace labelcal
