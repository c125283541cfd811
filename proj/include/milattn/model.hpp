#pragma once

// End-to-end MIL model S(X) = max_m g(gate(pool_m(f(X)))):
//   f     affine projection D -> D' followed by ReLU
//   pool  mean | max | attention | gated attention | multi-attention
//   gate  optional context gating, applied to each pooled vector
//   g     logistic or mixture-of-experts classifier shared by all heads

#include "milattn/classifier.hpp"
#include "milattn/pooling.hpp"

#include <limits>
#include <string>
#include <vector>

namespace milattn {

enum class PoolingKind { Mean, Max, Attention, GatedAttention, MultiAttention };

inline std::string to_string(PoolingKind k) {
  switch (k) {
    case PoolingKind::Mean: return "mean";
    case PoolingKind::Max: return "max";
    case PoolingKind::Attention: return "attention";
    case PoolingKind::GatedAttention: return "gated-attention";
    case PoolingKind::MultiAttention: return "multi-attention";
  }
  return "?";
}

inline PoolingKind parse_pooling(const std::string& s) {
  for (auto k : {PoolingKind::Mean, PoolingKind::Max, PoolingKind::Attention, PoolingKind::GatedAttention,
                 PoolingKind::MultiAttention})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown pooling '" + s + "' (want mean, max, attention, gated-attention or multi-attention)");
}

struct ModelConfig {
  int feature_dim = 16;    // D
  int hidden_dim = 32;     // D'
  int attention_dim = 16;  // L
  int heads = 8;           // M, multi-attention only
  int class_count = 10;    // n
  PoolingKind pooling = PoolingKind::GatedAttention;
  Normalization normalization = Normalization::Softmax;
  bool gated = true;  // multi-attention only; single-head kinds fix this
  ClassifierKind classifier = ClassifierKind::Logistic;
  int experts = 2;
  bool context_gate = true;

  bool uses_attention() const { return pooling != PoolingKind::Mean && pooling != PoolingKind::Max; }

  int effective_heads() const { return pooling == PoolingKind::MultiAttention ? heads : 1; }

  bool attention_gated() const {
    return pooling == PoolingKind::GatedAttention || (pooling == PoolingKind::MultiAttention && gated);
  }

  void validate() const {
    if (feature_dim < 1 || hidden_dim < 1 || attention_dim < 1 || class_count < 1)
      throw ConfigError("model dimensions must be >= 1");
    if (pooling == PoolingKind::MultiAttention && heads < 1) throw ConfigError("heads must be >= 1");
    if (classifier == ClassifierKind::MixtureOfExperts && experts < 1) throw ConfigError("experts must be >= 1");
  }

  bool operator==(const ModelConfig&) const = default;
};

/// All trainable tensors. Inactive parts (attention for mean/max, U for
/// ungated heads, the context gate when disabled, the unused classifier) are
/// left empty. A zero-filled copy doubles as the gradient container.
struct ModelParams {
  ModelConfig config;
  Matrix proj_W;  // D x D'
  Vector proj_b;
  MultiAttention attention;
  ContextGateParams gate;
  LogisticParams logistic;
  MoEParams moe;
};

/// Calls f(name, t...) for every active tensor, walking several models of the
/// same architecture in lockstep.
template <class F, class First, class... Rest>
void for_each_tensor(F&& f, First& first, Rest&... rest) {
  const ModelConfig& cfg = first.config;
  f("projection.W", first.proj_W, rest.proj_W...);
  f("projection.b", first.proj_b, rest.proj_b...);
  for (std::size_t m = 0; m < first.attention.heads.size(); ++m) {
    const std::string p = "attention." + std::to_string(m) + ".";
    f(p + "a", first.attention.heads[m].a, rest.attention.heads[m].a...);
    f(p + "V", first.attention.heads[m].V, rest.attention.heads[m].V...);
    if (first.attention.gated) f(p + "U", first.attention.heads[m].U, rest.attention.heads[m].U...);
  }
  if (cfg.context_gate) {
    f("context_gate.W", first.gate.W, rest.gate.W...);
    f("context_gate.b", first.gate.b, rest.gate.b...);
  }
  if (cfg.classifier == ClassifierKind::Logistic) {
    f("logistic.W", first.logistic.W, rest.logistic.W...);
    f("logistic.b", first.logistic.b, rest.logistic.b...);
  } else {
    f("moe.expert_W", first.moe.expert_W, rest.moe.expert_W...);
    f("moe.expert_b", first.moe.expert_b, rest.moe.expert_b...);
    f("moe.gate_W", first.moe.gate_W, rest.moe.gate_W...);
    f("moe.gate_b", first.moe.gate_b, rest.moe.gate_b...);
  }
}

inline ModelParams zeros_like(const ModelParams& model) {
  ModelParams z = model;
  for_each_tensor([](const std::string&, auto& t) { t.setZero(); }, z);
  return z;
}

inline std::size_t parameter_count(const ModelParams& model) {
  std::size_t n = 0;
  for_each_tensor([&](const std::string&, const auto& t) { n += static_cast<std::size_t>(t.size()); }, model);
  return n;
}

inline bool all_finite(const ModelParams& model) {
  bool ok = true;
  for_each_tensor([&](const std::string&, const auto& t) { ok = ok && t.allFinite(); }, model);
  return ok;
}

inline bool operator==(const ModelParams& a, const ModelParams& b) {
  if (!(a.config == b.config) || a.attention.heads.size() != b.attention.heads.size() ||
      a.attention.normalization != b.attention.normalization || a.attention.gated != b.attention.gated ||
      a.moe.experts != b.moe.experts)
    return false;
  bool same = true;
  for_each_tensor([&](const std::string&, const auto& x, const auto& y) { same = same && same_tensor(x, y); }, a, b);
  return same;
}

/// Glorot-uniform weights in [-r, r], r = sqrt(6 / (fan_in + fan_out)); zero biases.
inline ModelParams init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  auto glorot = [&](Eigen::Index rows, Eigen::Index cols, double fan_in, double fan_out) {
    const double r = std::sqrt(6.0 / (fan_in + fan_out));
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(-r, r);
    return m;
  };
  const int d = cfg.feature_dim, h = cfg.hidden_dim, l = cfg.attention_dim, n = cfg.class_count;

  ModelParams p;
  p.config = cfg;
  p.proj_W = glorot(d, h, d, h);
  p.proj_b = Vector::Zero(h);
  p.attention.normalization = cfg.normalization;
  p.attention.gated = cfg.attention_gated();
  if (cfg.uses_attention()) {
    for (int m = 0; m < cfg.effective_heads(); ++m) {
      AttentionHead head;
      head.a = glorot(l, 1, l, 1);
      head.V = glorot(l, h, h, l);
      if (p.attention.gated) head.U = glorot(l, h, h, l);
      p.attention.heads.push_back(std::move(head));
    }
  }
  if (cfg.context_gate) {
    p.gate.W = glorot(h, h, h, h);
    p.gate.b = Vector::Zero(h);
  }
  if (cfg.classifier == ClassifierKind::Logistic) {
    p.logistic.W = glorot(n, h, h, n);
    p.logistic.b = Vector::Zero(n);
  } else {
    const int e = cfg.experts;
    p.moe.experts = e;
    p.moe.expert_W = glorot(n * e, h, h, n * e);
    p.moe.expert_b = Vector::Zero(n * e);
    p.moe.gate_W = glorot(n * (e + 1), h, h, n * (e + 1));
    p.moe.gate_b = Vector::Zero(n * (e + 1));
  }
  return p;
}

struct HeadTrace {
  Vector logits;   // attention kinds only
  Vector weights;  // empty for max pooling
  Vector pooled;
  Vector gated;  // pooled after the context gate (== pooled when disabled)
  Vector scores;
};

struct ForwardTrace {
  Matrix pre;     // K x D' projection before ReLU
  Matrix hidden;  // K x D' after ReLU
  std::vector<HeadTrace> heads;
  Vector scores;
  std::vector<int> winner;  // per class: head supplying the max
};

struct ForwardResult {
  Vector scores;
  std::vector<Vector> head_weights;
};

inline Vector classify(const ModelParams& model, const Vector& x) {
  return model.config.classifier == ClassifierKind::Logistic ? logistic_classify(x, model.logistic)
                                                             : moe_classify(x, model.moe);
}

inline ForwardTrace forward_trace(const ModelParams& model, const Matrix& frames) {
  const auto& cfg = model.config;
  require(frames.rows() >= 1, "forward: empty bag");
  require(frames.cols() == cfg.feature_dim, "forward: bag has feature dimension " + std::to_string(frames.cols()) +
                                                ", model expects " + std::to_string(cfg.feature_dim));
  ForwardTrace tr;
  tr.pre = (frames * model.proj_W).rowwise() + model.proj_b.transpose();
  tr.hidden = tr.pre.cwiseMax(0.0);
  if (!tr.pre.allFinite()) throw NumericError("forward: non-finite projected features");

  const Eigen::Index k = frames.rows();
  switch (cfg.pooling) {
    case PoolingKind::Mean: {
      HeadTrace h;
      h.weights = Vector::Constant(k, 1.0 / static_cast<double>(k));
      h.pooled = mean_pool(tr.hidden);
      tr.heads.push_back(std::move(h));
      break;
    }
    case PoolingKind::Max: {
      HeadTrace h;
      h.pooled = max_pool(tr.hidden);
      tr.heads.push_back(std::move(h));
      break;
    }
    default: {
      model.attention.validate(tr.hidden.cols());
      for (const auto& head : model.attention.heads) {
        HeadTrace h;
        h.logits = model.attention.gated ? gated_attention_logits(tr.hidden, head) : attention_logits(tr.hidden, head);
        h.weights = normalize(h.logits, model.attention.normalization);
        h.pooled = attention_pool(tr.hidden, h.weights);
        tr.heads.push_back(std::move(h));
      }
    }
  }

  std::vector<Vector> per_head;
  for (auto& h : tr.heads) {
    h.gated = cfg.context_gate ? context_gate(h.pooled, model.gate) : h.pooled;
    h.scores = classify(model, h.gated);
    per_head.push_back(h.scores);
  }
  tr.scores = combine_heads(per_head);
  tr.winner.assign(static_cast<std::size_t>(tr.scores.size()), 0);
  for (Eigen::Index c = 0; c < tr.scores.size(); ++c)
    for (std::size_t m = 0; m < tr.heads.size(); ++m)
      if (tr.heads[m].scores(c) > tr.heads[tr.winner[c]].scores(c)) tr.winner[c] = static_cast<int>(m);
  return tr;
}

inline ForwardResult forward(const ModelParams& model, const Matrix& frames) {
  auto tr = forward_trace(model, frames);
  ForwardResult r{std::move(tr.scores), {}};
  for (auto& h : tr.heads) r.head_weights.push_back(std::move(h.weights));
  return r;
}

/// Parameter gradients of a scalar loss given d loss / d scores.
inline ModelParams backward(const ModelParams& model, const Matrix& frames, const ForwardTrace& tr,
                            const Vector& d_scores) {
  const auto& cfg = model.config;
  require(d_scores.size() == tr.scores.size(), "backward: upstream gradient length mismatch");
  ModelParams grad = zeros_like(model);
  Matrix d_pooled(static_cast<Eigen::Index>(tr.heads.size()), tr.hidden.cols());

  for (std::size_t m = 0; m < tr.heads.size(); ++m) {
    const auto& h = tr.heads[m];
    Vector ds = Vector::Zero(d_scores.size());
    for (Eigen::Index c = 0; c < ds.size(); ++c)
      if (tr.winner[c] == static_cast<int>(m)) ds(c) = d_scores(c);

    Vector d_gated;
    if (cfg.classifier == ClassifierKind::Logistic) {
      auto g = logistic_backward(h.gated, model.logistic, ds);
      grad.logistic.W += g.W;
      grad.logistic.b += g.b;
      d_gated = std::move(g.x);
    } else {
      auto g = moe_backward(h.gated, model.moe, ds);
      grad.moe.expert_W += g.expert_W;
      grad.moe.expert_b += g.expert_b;
      grad.moe.gate_W += g.gate_W;
      grad.moe.gate_b += g.gate_b;
      d_gated = std::move(g.x);
    }
    if (cfg.context_gate) {
      auto g = context_gate_backward(h.pooled, model.gate, d_gated);
      grad.gate.W += g.W;
      grad.gate.b += g.b;
      d_gated = std::move(g.x);
    }
    d_pooled.row(static_cast<Eigen::Index>(m)) = d_gated.transpose();
  }

  Matrix d_hidden;
  switch (cfg.pooling) {
    case PoolingKind::Mean:
      d_hidden = mean_pool_backward(tr.hidden.rows(), d_pooled.row(0).transpose());
      break;
    case PoolingKind::Max:
      d_hidden = max_pool_backward(tr.hidden, d_pooled.row(0).transpose());
      break;
    default: {
      auto pg = pooling_backward(tr.hidden, model.attention, d_pooled);
      for (std::size_t m = 0; m < pg.d_heads.size(); ++m) {
        grad.attention.heads[m].a = pg.d_heads[m].a;
        grad.attention.heads[m].V = pg.d_heads[m].V;
        if (model.attention.gated) grad.attention.heads[m].U = pg.d_heads[m].U;
      }
      d_hidden = std::move(pg.d_frames);
    }
  }

  const Matrix d_pre = d_hidden.cwiseProduct((tr.pre.array() > 0.0).cast<double>().matrix());
  grad.proj_W = frames.transpose() * d_pre;
  grad.proj_b = d_pre.colwise().sum().transpose();
  return grad;
}

struct LossGradient {
  double loss = 0.0;
  ModelParams grad;
};

inline double model_loss(const ModelParams& model, const Matrix& frames, const Vector& labels,
                         const Vector& class_weights) {
  return weighted_cross_entropy(forward_trace(model, frames).scores, labels, class_weights);
}

inline LossGradient loss_and_gradient(const ModelParams& model, const Matrix& frames, const Vector& labels,
                                      const Vector& class_weights) {
  const auto tr = forward_trace(model, frames);
  LossGradient out;
  out.loss = weighted_cross_entropy(tr.scores, labels, class_weights);
  out.grad = backward(model, frames, tr, weighted_cross_entropy_backward(tr.scores, labels, class_weights));
  return out;
}

/// Distance of the evaluation point from the nearest non-differentiable
/// boundary (ReLU hinge, max-pool/max-combine tie, sparsemax support change,
/// loss clamp). Finite differences are only meaningful when this is well
/// above the step size.
inline double smoothness_margin(const ModelParams& model, const ForwardTrace& tr) {
  double margin = std::numeric_limits<double>::infinity();
  margin = std::min(margin, tr.pre.cwiseAbs().minCoeff());
  if (model.config.pooling == PoolingKind::Max) {
    for (Eigen::Index j = 0; j < tr.hidden.cols(); ++j) {
      std::vector<double> col(tr.hidden.col(j).data(), tr.hidden.col(j).data() + tr.hidden.rows());
      std::sort(col.begin(), col.end(), std::greater<>());
      if (col.size() > 1 && col[0] > 0.0) margin = std::min(margin, col[0] - col[1]);
    }
  }
  if (model.config.uses_attention() && model.attention.normalization == Normalization::Sparsemax) {
    for (const auto& h : tr.heads) {
      if (h.logits.size() < 2) continue;
      const double tau = sparsemax_threshold(h.logits);
      margin = std::min(margin, (h.logits.array() - tau).abs().minCoeff());
    }
  }
  if (tr.heads.size() > 1) {
    for (Eigen::Index c = 0; c < tr.scores.size(); ++c)
      for (std::size_t m = 0; m < tr.heads.size(); ++m)
        if (static_cast<int>(m) != tr.winner[c]) margin = std::min(margin, tr.scores(c) - tr.heads[m].scores(c));
  }
  for (Eigen::Index c = 0; c < tr.scores.size(); ++c)
    margin = std::min({margin, tr.scores(c) - kLossEpsilon, 1.0 - kLossEpsilon - tr.scores(c)});
  return margin;
}

}  // namespace milattn
