#pragma once

// Bag-level classifiers g applied to a pooled feature vector, the max-combine
// across attention heads, and the class-weighted cross entropy.

#include "milattn/common.hpp"

#include <string>
#include <vector>

namespace milattn {

/// Prediction clamp used by the loss.
inline constexpr double kLossEpsilon = 1e-7;

enum class ClassifierKind { Logistic, MixtureOfExperts };

inline std::string to_string(ClassifierKind k) { return k == ClassifierKind::Logistic ? "logistic" : "moe"; }

inline ClassifierKind parse_classifier(const std::string& s) {
  if (s == "logistic") return ClassifierKind::Logistic;
  if (s == "moe") return ClassifierKind::MixtureOfExperts;
  throw ConfigError("unknown classifier '" + s + "' (want logistic or moe)");
}

struct ContextGateParams {
  Matrix W;  // D' x D'
  Vector b;
};

struct LogisticParams {
  Matrix W;  // n x D'
  Vector b;

  Eigen::Index class_count() const { return W.rows(); }
};

/// Per class c: experts at rows c*E + e, gates at rows c*(E+1) + k, where gate
/// k == E is the dummy expert that always predicts 0.
struct MoEParams {
  int experts = 2;
  Matrix expert_W;  // (n*E) x D'
  Vector expert_b;
  Matrix gate_W;  // (n*(E+1)) x D'
  Vector gate_b;

  Eigen::Index class_count() const { return expert_W.rows() / experts; }
};

inline Vector context_gate(const Vector& x, const ContextGateParams& p) {
  require(p.W.rows() == x.size() && p.W.cols() == x.size() && p.b.size() == x.size(),
          "context_gate: parameters must be D' x D' for input of size " + std::to_string(x.size()));
  return sigmoid(p.W * x + p.b).cwiseProduct(x);
}

inline Vector logistic_classify(const Vector& x, const LogisticParams& p) {
  require(p.W.cols() == x.size() && p.b.size() == p.W.rows(), "logistic_classify: dimension mismatch");
  return sigmoid(p.W * x + p.b);
}

namespace detail {

struct MoEForward {
  Matrix expert_prob;  // n x E
  Matrix gate_prob;    // n x (E+1)
  Vector scores;
};

inline MoEForward moe_forward(const Vector& x, const MoEParams& p) {
  require(p.experts >= 1 && p.expert_W.cols() == x.size() && p.gate_W.cols() == x.size(),
          "moe_classify: dimension mismatch");
  const Eigen::Index n = p.class_count(), e = p.experts;
  require(p.expert_W.rows() == n * e && p.expert_b.size() == n * e && p.gate_W.rows() == n * (e + 1) &&
              p.gate_b.size() == n * (e + 1),
          "moe_classify: parameter rows inconsistent with class/expert counts");
  const Vector expert_logit = p.expert_W * x + p.expert_b;
  const Vector gate_logit = p.gate_W * x + p.gate_b;
  MoEForward f;
  f.expert_prob.resize(n, e);
  f.gate_prob.resize(n, e + 1);
  f.scores.resize(n);
  for (Eigen::Index c = 0; c < n; ++c) {
    const auto g = gate_logit.segment(c * (e + 1), e + 1);
    const double mx = g.maxCoeff();
    const Eigen::ArrayXd ex = (g.array() - mx).exp();
    f.gate_prob.row(c) = (ex / ex.sum()).matrix().transpose();
    double s = 0.0;
    for (Eigen::Index k = 0; k < e; ++k) {
      f.expert_prob(c, k) = sigmoid(expert_logit(c * e + k));
      s += f.gate_prob(c, k) * f.expert_prob(c, k);
    }
    f.scores(c) = s;
  }
  return f;
}

}  // namespace detail

inline Vector moe_classify(const Vector& x, const MoEParams& p) { return detail::moe_forward(x, p).scores; }

/// Elementwise maximum over per-head class scores.
inline Vector combine_heads(const std::vector<Vector>& per_head) {
  if (per_head.empty()) throw ShapeError("combine_heads: no heads");
  Vector out = per_head.front();
  for (const auto& s : per_head) {
    require(s.size() == out.size(), "combine_heads: heads disagree on class count");
    out = out.cwiseMax(s);
  }
  return out;
}

inline double weighted_cross_entropy(const Vector& pred, const Vector& labels, const Vector& weights) {
  require(pred.size() == labels.size() && pred.size() == weights.size(), "weighted_cross_entropy: length mismatch");
  double loss = 0.0;
  for (Eigen::Index c = 0; c < pred.size(); ++c) {
    const double p = std::clamp(pred(c), kLossEpsilon, 1.0 - kLossEpsilon);
    loss += weights(c) * (labels(c) > 0.5 ? -std::log(p) : -std::log1p(-p));
  }
  return loss;
}

/// d loss / d pred. Zero where the clamp is active.
inline Vector weighted_cross_entropy_backward(const Vector& pred, const Vector& labels, const Vector& weights) {
  require(pred.size() == labels.size() && pred.size() == weights.size(), "weighted_cross_entropy: length mismatch");
  Vector d = Vector::Zero(pred.size());
  for (Eigen::Index c = 0; c < pred.size(); ++c) {
    const double p = pred(c);
    if (p <= kLossEpsilon || p >= 1.0 - kLossEpsilon) continue;
    d(c) = weights(c) * (labels(c) > 0.5 ? -1.0 / p : 1.0 / (1.0 - p));
  }
  return d;
}

struct ContextGateGrad {
  Matrix W;
  Vector b;
  Vector x;
};

inline ContextGateGrad context_gate_backward(const Vector& x, const ContextGateParams& p, const Vector& upstream) {
  require(upstream.size() == x.size(), "context_gate_backward: shape mismatch");
  const Vector g = sigmoid(p.W * x + p.b);
  const Vector dz = upstream.cwiseProduct(x).cwiseProduct((g.array() * (1.0 - g.array())).matrix());
  return {dz * x.transpose(), dz, upstream.cwiseProduct(g) + p.W.transpose() * dz};
}

struct LogisticGrad {
  Matrix W;
  Vector b;
  Vector x;
};

inline LogisticGrad logistic_backward(const Vector& x, const LogisticParams& p, const Vector& upstream) {
  require(upstream.size() == p.W.rows(), "logistic_backward: shape mismatch");
  const Vector s = logistic_classify(x, p);
  const Vector dz = upstream.cwiseProduct((s.array() * (1.0 - s.array())).matrix());
  return {dz * x.transpose(), dz, p.W.transpose() * dz};
}

struct MoEGrad {
  Matrix expert_W;
  Vector expert_b;
  Matrix gate_W;
  Vector gate_b;
  Vector x;
};

inline MoEGrad moe_backward(const Vector& x, const MoEParams& p, const Vector& upstream) {
  const auto f = detail::moe_forward(x, p);
  const Eigen::Index n = p.class_count(), e = p.experts;
  require(upstream.size() == n, "moe_backward: shape mismatch");
  Vector d_expert(n * e), d_gate(n * (e + 1));
  for (Eigen::Index c = 0; c < n; ++c) {
    const double s = f.scores(c);
    for (Eigen::Index k = 0; k <= e; ++k) {
      const double sk = k < e ? f.expert_prob(c, k) : 0.0;
      d_gate(c * (e + 1) + k) = upstream(c) * f.gate_prob(c, k) * (sk - s);
      if (k < e) d_expert(c * e + k) = upstream(c) * f.gate_prob(c, k) * sk * (1.0 - sk);
    }
  }
  return {d_expert * x.transpose(), d_expert, d_gate * x.transpose(), d_gate,
          p.expert_W.transpose() * d_expert + p.gate_W.transpose() * d_gate};
}

}  // namespace milattn
