#pragma once

// MIL pooling operators over a bag of projected frame features H (K x D').
//
// Attention heads score each frame, normalize the scores onto the simplex and
// pool with the resulting weights:
//
//   ungated  e_i = a . tanh(V h_i)
//   gated    e_i = a . (tanh(V h_i) * sigmoid(U h_i))
//   w = softmax(e) or sparsemax(e),   pooled = sum_i w_i h_i
//
// Every differentiable operator has an analytic backward pass.

#include "milattn/common.hpp"

#include <numeric>
#include <string>
#include <vector>

namespace milattn {

enum class Normalization { Softmax, Sparsemax };

inline std::string to_string(Normalization n) { return n == Normalization::Softmax ? "softmax" : "sparsemax"; }

inline Normalization parse_normalization(const std::string& s) {
  if (s == "softmax") return Normalization::Softmax;
  if (s == "sparsemax") return Normalization::Sparsemax;
  throw ConfigError("unknown normalization '" + s + "' (want softmax or sparsemax)");
}

/// One attention parameter set. V and U are L x D'; U is empty for ungated heads.
struct AttentionHead {
  Vector a;
  Matrix V;
  Matrix U;

  Eigen::Index hidden_dim() const { return a.size(); }
  Eigen::Index input_dim() const { return V.cols(); }
  bool gated() const { return U.size() > 0; }

  void validate(Eigen::Index input_dim, bool want_gated) const {
    require(a.size() >= 1 && V.rows() == a.size() && V.cols() == input_dim,
            "attention head: V must be L x D' with L = len(a)");
    if (want_gated)
      require(U.rows() == V.rows() && U.cols() == V.cols(), "attention head: U must match V's shape");
  }
};

struct MultiAttention {
  std::vector<AttentionHead> heads;
  Normalization normalization = Normalization::Softmax;
  bool gated = true;

  void validate(Eigen::Index input_dim) const {
    require(!heads.empty(), "multi-attention needs at least one head");
    for (const auto& h : heads) {
      h.validate(input_dim, gated);
      require(h.hidden_dim() == heads.front().hidden_dim(), "attention heads must share L");
    }
  }
};

inline Vector mean_pool(const Matrix& frames) {
  require(frames.rows() >= 1, "mean_pool: empty bag");
  return frames.colwise().mean().transpose();
}

inline Vector max_pool(const Matrix& frames) {
  require(frames.rows() >= 1, "max_pool: empty bag");
  return frames.colwise().maxCoeff().transpose();
}

inline Vector softmax(const Vector& z) {
  require(z.size() >= 1, "softmax: empty input");
  const Vector e = (z.array() - z.maxCoeff()).exp().matrix();
  return e / e.sum();
}

/// Threshold tau of the simplex projection: sort descending, take the
/// largest k with 1 + k z_(k) > sum_{j<=k} z_(j), tau = (sum_{j<=k} z_(j) - 1) / k.
inline double sparsemax_threshold(const Vector& z) {
  require(z.size() >= 1, "sparsemax: empty input");
  std::vector<double> sorted(z.data(), z.data() + z.size());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  double cumsum = 0.0;
  double support_sum = sorted[0];
  std::size_t support = 1;
  for (std::size_t k = 1; k <= sorted.size(); ++k) {
    cumsum += sorted[k - 1];
    if (1.0 + static_cast<double>(k) * sorted[k - 1] > cumsum) {
      support = k;
      support_sum = cumsum;
    }
  }
  return (support_sum - 1.0) / static_cast<double>(support);
}

inline Vector sparsemax(const Vector& z) {
  const double tau = sparsemax_threshold(z);
  return (z.array() - tau).max(0.0).matrix();
}

inline Vector normalize(const Vector& z, Normalization n) {
  return n == Normalization::Softmax ? softmax(z) : sparsemax(z);
}

/// Vector-Jacobian product of softmax at output w.
inline Vector softmax_backward(const Vector& w, const Vector& dw) {
  return (w.array() * (dw.array() - w.dot(dw))).matrix();
}

/// Vector-Jacobian product of sparsemax at output p: the Jacobian is
/// diag(s) - s s^T / |S| on the support S = {i : p_i > 0}.
inline Vector sparsemax_backward(const Vector& p, const Vector& dp) {
  double sum = 0.0;
  int support = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p(i) > 0.0) {
      sum += dp(i);
      ++support;
    }
  const double mean = support > 0 ? sum / support : 0.0;
  Vector dz = Vector::Zero(p.size());
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p(i) > 0.0) dz(i) = dp(i) - mean;
  return dz;
}

inline Vector normalize_backward(const Vector& w, const Vector& dw, Normalization n) {
  return n == Normalization::Softmax ? softmax_backward(w, dw) : sparsemax_backward(w, dw);
}

inline Vector attention_logits(const Matrix& frames, const AttentionHead& head) {
  require(frames.cols() == head.input_dim() && head.V.rows() == head.a.size(),
          "attention: frame dimension " + std::to_string(frames.cols()) + " does not match head");
  return (frames * head.V.transpose()).array().tanh().matrix() * head.a;
}

inline Vector gated_attention_logits(const Matrix& frames, const AttentionHead& head) {
  require(frames.cols() == head.input_dim() && head.V.rows() == head.a.size(),
          "gated attention: frame dimension " + std::to_string(frames.cols()) + " does not match head");
  require(head.U.rows() == head.V.rows() && head.U.cols() == head.V.cols(), "gated attention: head has no U gate");
  const Matrix t = (frames * head.V.transpose()).array().tanh().matrix();
  const Matrix g = sigmoid(frames * head.U.transpose());
  return t.cwiseProduct(g) * head.a;
}

inline Vector attention_weights(const Matrix& frames, const AttentionHead& head, Normalization n) {
  return normalize(attention_logits(frames, head), n);
}

inline Vector gated_attention_weights(const Matrix& frames, const AttentionHead& head, Normalization n) {
  return normalize(gated_attention_logits(frames, head), n);
}

inline Vector attention_pool(const Matrix& frames, const Vector& weights) {
  require(weights.size() == frames.rows(), "attention_pool: weight count differs from frame count");
  if (!weights.allFinite()) throw NumericError("attention_pool: non-finite attention weights");
  require(weights.minCoeff() >= 0.0 && std::abs(weights.sum() - 1.0) <= 1e-6,
          "attention_pool: weights are not on the simplex");
  return frames.transpose() * weights;
}

inline Vector head_weights(const Matrix& frames, const MultiAttention& ma, std::size_t m) {
  return ma.gated ? gated_attention_weights(frames, ma.heads[m], ma.normalization)
                  : attention_weights(frames, ma.heads[m], ma.normalization);
}

/// Row m is the bag pooled with head m's weights.
inline Matrix multi_attention_pool(const Matrix& frames, const MultiAttention& ma) {
  ma.validate(frames.cols());
  Matrix out(static_cast<Eigen::Index>(ma.heads.size()), frames.cols());
  for (std::size_t m = 0; m < ma.heads.size(); ++m)
    out.row(static_cast<Eigen::Index>(m)) = attention_pool(frames, head_weights(frames, ma, m)).transpose();
  return out;
}

struct HeadGradients {
  Vector a;
  Matrix V;
  Matrix U;
};

struct PoolGradients {
  Matrix d_frames;
  std::vector<HeadGradients> d_heads;
};

inline Matrix mean_pool_backward(Eigen::Index frame_count, const Vector& upstream) {
  return Matrix::Ones(frame_count, 1) * (upstream.transpose() / static_cast<double>(frame_count));
}

/// Routes each column's gradient to its first maximizing row.
inline Matrix max_pool_backward(const Matrix& frames, const Vector& upstream) {
  require(upstream.size() == frames.cols(), "max_pool_backward: shape mismatch");
  Matrix d = Matrix::Zero(frames.rows(), frames.cols());
  for (Eigen::Index j = 0; j < frames.cols(); ++j) {
    Eigen::Index best = 0;
    frames.col(j).maxCoeff(&best);
    d(best, j) = upstream(j);
  }
  return d;
}

/// Gradient of one head's pooled vector given d(pooled). Accumulates into
/// d_frames and returns the head's parameter gradients.
inline HeadGradients attention_head_backward(const Matrix& frames, const AttentionHead& head, bool gated,
                                             Normalization n, const Vector& upstream, Matrix& d_frames) {
  const Matrix t = (frames * head.V.transpose()).array().tanh().matrix();
  Matrix g;
  Vector logits;
  if (gated) {
    g = sigmoid(frames * head.U.transpose());
    logits = t.cwiseProduct(g) * head.a;
  } else {
    logits = t * head.a;
  }
  const Vector w = normalize(logits, n);

  d_frames += w * upstream.transpose();
  const Vector dw = frames * upstream;
  const Vector de = normalize_backward(w, dw, n);

  HeadGradients grad;
  const Matrix dp = de * head.a.transpose();  // K x L
  if (gated) {
    grad.a = t.cwiseProduct(g).transpose() * de;
    const Matrix dzv = dp.cwiseProduct(g).cwiseProduct((1.0 - t.array().square()).matrix());
    const Matrix dzu = dp.cwiseProduct(t).cwiseProduct((g.array() * (1.0 - g.array())).matrix());
    grad.V = dzv.transpose() * frames;
    grad.U = dzu.transpose() * frames;
    d_frames += dzv * head.V + dzu * head.U;
  } else {
    grad.a = t.transpose() * de;
    const Matrix dzv = dp.cwiseProduct((1.0 - t.array().square()).matrix());
    grad.V = dzv.transpose() * frames;
    d_frames += dzv * head.V;
  }
  return grad;
}

/// Gradients of multi_attention_pool's M x D' output given `upstream` (M x D').
inline PoolGradients pooling_backward(const Matrix& frames, const MultiAttention& ma, const Matrix& upstream) {
  ma.validate(frames.cols());
  require(upstream.rows() == static_cast<Eigen::Index>(ma.heads.size()) && upstream.cols() == frames.cols(),
          "pooling_backward: upstream must be M x D'");
  PoolGradients out;
  out.d_frames = Matrix::Zero(frames.rows(), frames.cols());
  for (std::size_t m = 0; m < ma.heads.size(); ++m)
    out.d_heads.push_back(attention_head_backward(frames, ma.heads[m], ma.gated, ma.normalization,
                                                  upstream.row(static_cast<Eigen::Index>(m)).transpose(),
                                                  out.d_frames));
  return out;
}

}  // namespace milattn
