#pragma once

// Minimal dense-network building blocks with hand-written backward passes.
// Shared by the Stage-I classifier and the diffusion denoiser.

#include <vector>

#include "labelcal/common.hpp"

namespace labelcal {

/// y = x * weight + bias, with weight stored (in x out) and bias (1 x out).
struct DenseLayer {
  Matrix weight;
  Matrix bias;

  DenseLayer() = default;
  DenseLayer(Eigen::Index in, Eigen::Index out) : weight(Matrix::Zero(in, out)), bias(Matrix::Zero(1, out)) {}

  Eigen::Index in_dim() const { return weight.rows(); }
  Eigen::Index out_dim() const { return weight.cols(); }

  Matrix forward(const Matrix& x) const {
    Matrix y = x * weight;
    y.rowwise() += bias.row(0);
    return y;
  }

  /// Accumulates parameter gradients into `grad` and returns d(loss)/d(x).
  Matrix backward(const Matrix& x, const Matrix& dy, DenseLayer& grad) const {
    grad.weight.noalias() += x.transpose() * dy;
    grad.bias.noalias() += dy.colwise().sum();
    return dy * weight.transpose();
  }

  DenseLayer zeros_like() const { return DenseLayer(in_dim(), out_dim()); }

  bool operator==(const DenseLayer& o) const {
    return weight.rows() == o.weight.rows() && weight.cols() == o.weight.cols() && weight == o.weight &&
           bias == o.bias;
  }
};

/// Glorot-uniform weights, zero bias.
inline DenseLayer glorot_layer(Eigen::Index in, Eigen::Index out, Rng& rng) {
  DenseLayer layer(in, out);
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  for (Eigen::Index r = 0; r < in; ++r) {
    for (Eigen::Index c = 0; c < out; ++c) layer.weight(r, c) = (2.0 * uniform01(rng) - 1.0) * limit;
  }
  return layer;
}

/// Gradient of the loss w.r.t. logits given gradient w.r.t. softmax outputs.
inline Matrix softmax_backward(const Matrix& probs, const Matrix& dprobs) {
  Matrix out(probs.rows(), probs.cols());
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    const double inner = probs.row(r).dot(dprobs.row(r));
    out.row(r) = probs.row(r).array() * (dprobs.row(r).array() - inner);
  }
  return out;
}

inline Matrix tanh_forward(const Matrix& x) { return x.array().tanh().matrix(); }

/// d(loss)/d(pre-activation) for y = tanh(pre).
inline Matrix tanh_backward(const Matrix& y, const Matrix& dy) {
  return (dy.array() * (1.0 - y.array().square())).matrix();
}

// ---------------------------------------------------------------------------
// Co-regularization across M branches:
//   q_i = mean_m p_i^(m)
//   loss = 1/(M N) sum_i sum_m sum_c q_ic log((q_ic + eps) / (p_ic^(m) + eps))

struct CoregResult {
  double loss = 0.0;
  std::vector<Matrix> grad;  // d loss / d p^(m), only filled when requested
};

inline Matrix consensus(const std::vector<Matrix>& branch_probs) {
  Matrix q = branch_probs.front();
  for (std::size_t m = 1; m < branch_probs.size(); ++m) q += branch_probs[m];
  return q / static_cast<double>(branch_probs.size());
}

inline CoregResult coregularization(const std::vector<Matrix>& branch_probs, double eps, bool with_grad) {
  CoregResult out;
  require(!branch_probs.empty(), ErrorCode::ShapeMismatch, "co-regularization needs at least one branch");
  const Eigen::Index n = branch_probs.front().rows();
  const Eigen::Index c = branch_probs.front().cols();
  for (const auto& p : branch_probs) {
    require(p.rows() == n && p.cols() == c, ErrorCode::ShapeMismatch, "branch probability shapes differ");
  }
  if (n == 0) {
    if (with_grad) out.grad.assign(branch_probs.size(), Matrix::Zero(0, c));
    return out;
  }
  const double m_count = static_cast<double>(branch_probs.size());
  const double norm = 1.0 / (m_count * static_cast<double>(n));
  const Matrix q = consensus(branch_probs);
  const Array log_q = (q.array() + eps).log();

  Array mean_log_p = Array::Zero(n, c);
  double total = 0.0;
  for (const auto& p : branch_probs) {
    const Array log_p = (p.array() + eps).log();
    total += (q.array() * (log_q - log_p)).sum();
    mean_log_p += log_p;
  }
  mean_log_p /= m_count;
  out.loss = norm * total;
  if (!with_grad) return out;

  // Through q: d/dq of sum_m q (log(q+eps) - log(p_m+eps)), divided by M since q = mean p.
  const Array via_q = log_q + q.array() / (q.array() + eps) - mean_log_p;
  out.grad.reserve(branch_probs.size());
  for (const auto& p : branch_probs) {
    out.grad.emplace_back((norm * (via_q - q.array() / (p.array() + eps))).matrix());
  }
  return out;
}

/// l_CR for branch_probs[m] of shape N x C.
inline double coregularization_loss(const std::vector<Matrix>& branch_probs, double eps) {
  return coregularization(branch_probs, eps, false).loss;
}

// ---------------------------------------------------------------------------
// Adam (no step-size decay).

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam() = default;

  Adam(AdamConfig cfg, const std::vector<Matrix*>& params) : cfg_(cfg) {
    for (const Matrix* p : params) {
      m_.push_back(Matrix::Zero(p->rows(), p->cols()));
      v_.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }

  void step(const std::vector<Matrix*>& params, const std::vector<Matrix*>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Matrix& g = *grads[i];
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
      params[i]->array() -=
          cfg_.learning_rate * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg_.epsilon);
    }
  }

 private:
  AdamConfig cfg_;
  std::vector<Matrix> m_, v_;
  long t_ = 0;
};

}  // namespace labelcal
