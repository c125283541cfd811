#pragma once

#include "milattn/datamodel.hpp"
#include "milattn/model.hpp"

#include <cstdio>
#include <functional>
#include <string>
#include <vector>

namespace milattn {

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long long step = 0;
  ModelParams m;  // first moments, shaped like the model
  ModelParams v;  // second moments

  static AdamState fresh(const ModelParams& model, double lr = 1e-3) {
    AdamState s;
    s.lr = lr;
    s.m = zeros_like(model);
    s.v = zeros_like(model);
    return s;
  }
};

/// One bias-corrected Adam update of `params` in place.
inline void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state) {
  require(parameter_count(params) == parameter_count(grads) && parameter_count(params) == parameter_count(state.m),
          "adam_step: parameter, gradient and state shapes differ");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for_each_tensor(
      [&](const std::string& name, auto& p, const auto& g, auto& m, auto& v) {
        require(p.rows() == g.rows() && p.cols() == g.cols(), "adam_step: gradient shape differs for " + name);
        m = state.beta1 * m + (1.0 - state.beta1) * g;
        v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseProduct(g);
        p.array() -= state.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + state.epsilon);
      },
      params, grads, state.m, state.v);
}

struct TrainConfig {
  int batch_size = 32;
  int phase1_steps = 500;
  int phase2_steps = 100;
  SamplingScheme sampling = SamplingScheme::random(120);
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 1;

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (phase1_steps < 0 || phase2_steps < 0) throw ConfigError("step counts must be >= 0");
    if (!(lr >= 0.0)) throw ConfigError("lr must be >= 0");
  }

  /// Batch size and step counts reported for the full-scale runs.
  static TrainConfig full_scale() {
    TrainConfig c;
    c.batch_size = 128;
    c.phase1_steps = 60000;
    c.phase2_steps = 2500;
    return c;
  }
};

struct TrainResult {
  ModelParams model;
  AdamState adam;
  std::vector<double> loss_trace;  // mean batch loss before each update
};

namespace detail {

struct Example {
  const Matrix* frames;
  Vector labels;
};

using FrameSelector = std::function<Matrix(std::size_t item, long long step, std::size_t slot)>;

inline TrainResult run_loop(ModelParams model, AdamState adam, const std::vector<Example>& items,
                            const Vector& class_weights, int steps, const TrainConfig& cfg,
                            const FrameSelector& select, const char* phase) {
  TrainResult out;
  out.loss_trace.reserve(static_cast<std::size_t>(steps));
  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
  std::vector<double> losses(batch);
  std::vector<ModelParams> grads(batch);
  for (int step = 0; step < steps; ++step) {
    Rng rng(derive_seed(cfg.seed, 0xBA7C4ULL, static_cast<std::uint64_t>(step)));
    std::vector<std::size_t> picks(batch);
    for (auto& p : picks) p = rng.index(items.size());

    parallel_for(batch, [&](std::size_t b) {
      const Matrix frames = select(picks[b], step, b);
      auto lg = loss_and_gradient(model, frames, items[picks[b]].labels, class_weights);
      losses[b] = lg.loss;
      grads[b] = std::move(lg.grad);
    });

    // Fixed-order reduction keeps results independent of the thread count.
    double loss = 0.0;
    ModelParams total = zeros_like(model);
    for (std::size_t b = 0; b < batch; ++b) {
      loss += losses[b];
      for_each_tensor([](const std::string&, auto& acc, const auto& g) { acc += g; }, total, grads[b]);
    }
    const double scale = 1.0 / static_cast<double>(batch);
    loss *= scale;
    if (!std::isfinite(loss))
      throw NumericError(std::string(phase) + ": non-finite loss at step " + std::to_string(step));
    for_each_tensor([&](const std::string&, auto& acc) { acc *= scale; }, total);
    adam_step(model, total, adam);
    if (!all_finite(model))
      throw NumericError(std::string(phase) + ": non-finite parameters after step " + std::to_string(step));
    out.loss_trace.push_back(loss);
  }
  out.model = std::move(model);
  out.adam = std::move(adam);
  return out;
}

inline AdamState make_adam(const ModelParams& model, const TrainConfig& cfg) {
  AdamState s = AdamState::fresh(model, cfg.lr);
  s.beta1 = cfg.beta1;
  s.beta2 = cfg.beta2;
  s.epsilon = cfg.adam_epsilon;
  return s;
}

}  // namespace detail

/// Phase 1: whole-video bags with bag-level labels; frames are subsampled per
/// cfg.sampling with a stream derived from (seed, step, batch slot).
inline TrainResult train_phase1(const ModelParams& model, const std::vector<Bag>& bags, const Vocabulary& vocab,
                                const TrainConfig& cfg) {
  cfg.validate();
  if (bags.empty()) throw ConfigError("train_phase1: empty corpus");
  require(vocab.class_count == model.config.class_count, "train_phase1: vocabulary size differs from model");
  std::vector<detail::Example> items;
  for (const auto& b : bags) items.push_back({&b.frames, multi_hot(b.labels, vocab.class_count)});
  auto select = [&](std::size_t item, long long step, std::size_t slot) {
    const auto idx = sample_frames(bags[item], cfg.sampling,
                                   derive_seed(cfg.seed, static_cast<std::uint64_t>(step) + 1, slot));
    return gather_rows(bags[item].frames, idx);
  };
  return detail::run_loop(model, detail::make_adam(model, cfg), items, vocab.class_weights, cfg.phase1_steps, cfg,
                          select, "phase 1");
}

/// Phase 2: fine-tune on labeled 5-frame segments, all frames used. Continues
/// from `resume` (the phase-1 optimizer state) when given, with cfg's
/// hyperparameters; otherwise starts a fresh Adam state.
inline TrainResult finetune_phase2(const ModelParams& model, const std::vector<Segment>& segments,
                                   const Vocabulary& vocab, const TrainConfig& cfg,
                                   const AdamState* resume = nullptr) {
  cfg.validate();
  if (segments.empty()) throw ConfigError("finetune_phase2: no labeled segments");
  require(vocab.class_count == model.config.class_count, "finetune_phase2: vocabulary size differs from model");
  std::vector<detail::Example> items;
  for (const auto& s : segments) items.push_back({&s.frames, multi_hot(s.labels, vocab.class_count)});
  auto select = [&](std::size_t item, long long, std::size_t) { return *items[item].frames; };
  AdamState adam = detail::make_adam(model, cfg);
  if (resume) {
    require(parameter_count(resume->m) == parameter_count(model), "finetune_phase2: optimizer state does not match model");
    adam.m = resume->m;
    adam.v = resume->v;
    adam.step = resume->step;
  }
  return detail::run_loop(model, std::move(adam), items, vocab.class_weights, cfg.phase2_steps, cfg,
                          select, "phase 2");
}

struct GradientGroupReport {
  std::string name;
  std::size_t entries = 0;
  double max_rel_error = 0.0;
};

struct GradientReport {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::vector<GradientGroupReport> groups;
  double tolerance = 0.0;
  bool passed = false;
};

/// |analytic - numeric| / max(|analytic|, |numeric|, floor). The floor keeps
/// near-zero gradients from turning round-off into large relative errors.
inline double relative_error(double analytic, double numeric, double floor = 1e-4) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares `analytic` against central differences of `loss` on every entry
/// of every active tensor of `model`. The model is perturbed in place and
/// restored.
inline GradientReport check_gradients(ModelParams& model, const std::function<double(const ModelParams&)>& loss,
                                      const ModelParams& analytic, double tolerance, double step = 1e-5) {
  GradientReport report;
  report.tolerance = tolerance;
  for_each_tensor(
      [&](const std::string& name, auto& p, const auto& g) {
        GradientGroupReport group{name, static_cast<std::size_t>(p.size()), 0.0};
        for (Eigen::Index i = 0; i < p.rows(); ++i)
          for (Eigen::Index j = 0; j < p.cols(); ++j) {
            const double orig = p(i, j);
            p(i, j) = orig + step;
            const double up = loss(model);
            p(i, j) = orig - step;
            const double down = loss(model);
            p(i, j) = orig;
            const double err = relative_error(g(i, j), (up - down) / (2.0 * step));
            group.max_rel_error = std::max(group.max_rel_error, err);
            if (err > report.max_rel_error || report.worst_parameter.empty()) {
              report.max_rel_error = std::max(report.max_rel_error, err);
              report.worst_parameter = name + "[" + std::to_string(i) + "," + std::to_string(j) + "]";
            }
          }
        report.groups.push_back(std::move(group));
      },
      model, analytic);
  report.passed = report.max_rel_error < tolerance;
  return report;
}

/// Full-model check of the weighted cross-entropy gradient on one bag.
/// `tamper` edits the analytic gradient before comparison (fault injection).
inline GradientReport gradient_check(const ModelParams& model, const Matrix& frames, const Vector& labels,
                                     const Vector& class_weights, double tolerance,
                                     const std::function<void(ModelParams&)>& tamper = {}) {
  auto lg = loss_and_gradient(model, frames, labels, class_weights);
  if (tamper) tamper(lg.grad);
  ModelParams probe = model;
  return check_gradients(
      probe, [&](const ModelParams& m) { return model_loss(m, frames, labels, class_weights); }, lg.grad, tolerance);
}

}  // namespace milattn
