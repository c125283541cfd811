#include "test_util.hpp"

using namespace milattn;
using testutil::random_matrix;

namespace {

double sig(double z) { return 1.0 / (1.0 + std::exp(-z)); }

ModelConfig tiny_config(PoolingKind pooling, ClassifierKind classifier = ClassifierKind::Logistic,
                        Normalization norm = Normalization::Softmax) {
  ModelConfig c;
  c.feature_dim = 4;
  c.hidden_dim = 3;
  c.attention_dim = 2;
  c.heads = 2;
  c.class_count = 3;
  c.pooling = pooling;
  c.classifier = classifier;
  c.normalization = norm;
  return c;
}

// Scalar-by-scalar evaluation of the gated multi-attention + context gate +
// logistic model, written without the library's vector helpers.
std::vector<double> straight_line_scores(const ModelParams& p, const Matrix& x) {
  const int k = static_cast<int>(x.rows()), d = p.config.feature_dim, h = p.config.hidden_dim;
  const int l = p.config.attention_dim, n = p.config.class_count;
  std::vector<std::vector<double>> hid(k, std::vector<double>(h));
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < h; ++j) {
      double s = p.proj_b(j);
      for (int q = 0; q < d; ++q) s += x(i, q) * p.proj_W(q, j);
      hid[i][j] = s > 0 ? s : 0.0;
    }
  std::vector<double> best(n, -1.0);
  for (const auto& head : p.attention.heads) {
    std::vector<double> logit(k);
    for (int i = 0; i < k; ++i) {
      double z = 0;
      for (int r = 0; r < l; ++r) {
        double v = 0, u = 0;
        for (int j = 0; j < h; ++j) {
          v += head.V(r, j) * hid[i][j];
          u += head.U(r, j) * hid[i][j];
        }
        z += head.a(r) * std::tanh(v) * sig(u);
      }
      logit[i] = z;
    }
    double mx = logit[0], denom = 0;
    for (double z : logit) mx = std::max(mx, z);
    for (double z : logit) denom += std::exp(z - mx);
    std::vector<double> pooled(h, 0.0);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < h; ++j) pooled[j] += std::exp(logit[i] - mx) / denom * hid[i][j];
    std::vector<double> gated(h);
    for (int j = 0; j < h; ++j) {
      double z = p.gate.b(j);
      for (int q = 0; q < h; ++q) z += p.gate.W(j, q) * pooled[q];
      gated[j] = sig(z) * pooled[j];
    }
    for (int c = 0; c < n; ++c) {
      double z = p.logistic.b(c);
      for (int j = 0; j < h; ++j) z += p.logistic.W(c, j) * gated[j];
      best[c] = std::max(best[c], sig(z));
    }
  }
  return best;
}

void perturb(ModelParams& m, Rng& rng, double scale = 0.3) {
  for_each_tensor(
      [&](const std::string&, auto& t) {
        for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] += scale * rng.normal();
      },
      m);
}

}  // namespace

TEST(Forward, MatchesStraightLineOracle) {
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    auto model = init_model(tiny_config(PoolingKind::MultiAttention), rng.next());
    perturb(model, rng);
    const Matrix x = random_matrix(rng, 2 + static_cast<Eigen::Index>(rng.index(6)), 4);
    const Vector s = forward(model, x).scores;
    const auto want = straight_line_scores(model, x);
    for (int c = 0; c < 3; ++c) {
      EXPECT_NEAR(s(c), want[c], 1e-12);
      EXPECT_GE(s(c), 0.0);
      EXPECT_LE(s(c), 1.0);
    }
  }
}

TEST(Forward, ForcedUniformAttentionEqualsMeanPooling) {
  for (auto kind : {PoolingKind::Attention, PoolingKind::GatedAttention}) {
    auto attn = init_model(tiny_config(kind), 3);
    for (auto& h : attn.attention.heads) h.a.setZero();
    auto mean = attn;
    mean.config.pooling = PoolingKind::Mean;
    mean.attention.heads.clear();
    Rng rng(4);
    const Matrix x = random_matrix(rng, 7, 4);
    const auto fa = forward(attn, x);
    EXPECT_LT((fa.scores - forward(mean, x).scores).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((fa.head_weights[0].array() - 1.0 / 7).abs().maxCoeff(), 1e-15);
  }
}

TEST(Forward, SingleFrameGivesSameScoresForEveryPooling) {
  Rng rng(5);
  const Matrix x = random_matrix(rng, 1, 4);
  auto base = init_model(tiny_config(PoolingKind::MultiAttention), 6);
  perturb(base, rng);
  Vector reference;
  for (auto kind : {PoolingKind::Mean, PoolingKind::Max, PoolingKind::Attention, PoolingKind::GatedAttention,
                    PoolingKind::MultiAttention}) {
    auto m = init_model(tiny_config(kind), 99);
    m.proj_W = base.proj_W;
    m.proj_b = base.proj_b;
    m.gate = base.gate;
    m.logistic = base.logistic;
    const Vector s = forward(m, x).scores;
    if (reference.size() == 0) reference = s;
    EXPECT_LT((s - reference).cwiseAbs().maxCoeff(), 1e-15) << to_string(kind);
  }
}

TEST(Forward, OneHeadMultiAttentionEqualsGatedAttentionBitForBit) {
  Rng rng(7);
  auto multi_cfg = tiny_config(PoolingKind::MultiAttention);
  multi_cfg.heads = 1;
  auto multi = init_model(multi_cfg, 8);
  perturb(multi, rng);
  auto single = multi;
  single.config = tiny_config(PoolingKind::GatedAttention);
  for (int t = 0; t < 20; ++t) {
    const Matrix x = random_matrix(rng, 3 + t % 5, 4);
    EXPECT_TRUE(same_tensor(forward(multi, x).scores, forward(single, x).scores));
  }
}

TEST(Forward, DuplicatingFramesLeavesSoftmaxAttentionScoresUnchanged) {
  Rng rng(9);
  for (auto kind : {PoolingKind::Attention, PoolingKind::GatedAttention, PoolingKind::MultiAttention,
                    PoolingKind::Mean}) {
    auto m = init_model(tiny_config(kind), 10);
    perturb(m, rng);
    const Matrix x = random_matrix(rng, 5, 4);
    Matrix twice(10, 4);
    twice << x, x;
    EXPECT_LT((forward(m, x).scores - forward(m, twice).scores).cwiseAbs().maxCoeff(), 1e-12) << to_string(kind);
  }
}

TEST(Forward, ReportsWeightsPerHead) {
  Rng rng(11);
  const Matrix x = random_matrix(rng, 6, 4);
  const auto multi = forward(init_model(tiny_config(PoolingKind::MultiAttention), 1), x);
  ASSERT_EQ(multi.head_weights.size(), 2u);
  for (const auto& w : multi.head_weights) EXPECT_NEAR(w.sum(), 1.0, 1e-12);
  EXPECT_TRUE(forward(init_model(tiny_config(PoolingKind::Max), 1), x).head_weights[0].size() == 0);
  EXPECT_THROW(forward(init_model(tiny_config(PoolingKind::Mean), 1), random_matrix(rng, 3, 5)), ShapeError);
  EXPECT_THROW(forward(init_model(tiny_config(PoolingKind::Mean), 1), Matrix(0, 4)), ShapeError);
}

TEST(Model, ParameterLayout) {
  auto cfg = tiny_config(PoolingKind::MultiAttention, ClassifierKind::MixtureOfExperts);
  const auto m = init_model(cfg, 1);
  std::vector<std::string> names;
  for_each_tensor([&](const std::string& name, const auto&) { names.push_back(name); }, m);
  const std::vector<std::string> want{"projection.W", "projection.b", "attention.0.a", "attention.0.V",
                                      "attention.0.U", "attention.1.a", "attention.1.V", "attention.1.U",
                                      "context_gate.W", "context_gate.b", "moe.expert_W", "moe.expert_b",
                                      "moe.gate_W", "moe.gate_b"};
  EXPECT_EQ(names, want);
  // 4*3+3 + 2*(2+6+6) + 9+3 + 6*3+6 + 9*3+9
  EXPECT_EQ(parameter_count(m), 15u + 28u + 12u + 24u + 36u);
  cfg.context_gate = false;
  cfg.pooling = PoolingKind::Mean;
  cfg.classifier = ClassifierKind::Logistic;
  EXPECT_EQ(parameter_count(init_model(cfg, 1)), 15u + 12u);
  EXPECT_EQ(init_model(cfg, 5), init_model(cfg, 5));
  EXPECT_FALSE(init_model(cfg, 5) == init_model(cfg, 6));
}

TEST(GradientCheck, ExactForLinearModelWithQuadraticLoss) {
  // Only the logistic tensors are read by this loss: sum of squares of W x + b.
  auto cfg = tiny_config(PoolingKind::Mean);
  cfg.context_gate = false;
  auto model = init_model(cfg, 2);
  Rng rng(3);
  const Vector x = testutil::random_vector(rng, 3);
  auto loss = [&](const ModelParams& m) { return (m.logistic.W * x + m.logistic.b).squaredNorm(); };
  ModelParams grad = zeros_like(model);
  const Vector r = model.logistic.W * x + model.logistic.b;
  grad.logistic.W = 2.0 * r * x.transpose();
  grad.logistic.b = 2.0 * r;
  const auto report = check_gradients(model, loss, grad, 1e-4);
  EXPECT_LT(report.max_rel_error, 1e-10);
  EXPECT_TRUE(report.passed);
}

TEST(GradientCheck, GatedMultiAttentionWithMoEPasses) {
  auto cfg = tiny_config(PoolingKind::MultiAttention, ClassifierKind::MixtureOfExperts);
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto [model, frames, labels] = cli::tiny_instance(cfg, seed);
    const auto report = gradient_check(model, frames, labels, Vector::Constant(3, 2.0), 1e-4);
    EXPECT_LT(report.max_rel_error, 1e-4) << "seed " << seed << " worst " << report.worst_parameter;
  }
}

TEST(GradientCheck, CorruptedEntryIsFlagged) {
  auto cfg = tiny_config(PoolingKind::MultiAttention, ClassifierKind::MixtureOfExperts);
  auto [model, frames, labels] = cli::tiny_instance(cfg, 4);
  const auto clean = loss_and_gradient(model, frames, labels, Vector::Ones(3));
  ASSERT_NE(clean.grad.attention.heads[1].V(1, 2), 0.0);
  const auto report = gradient_check(model, frames, labels, Vector::Ones(3), 1e-4,
                                     [](ModelParams& g) { g.attention.heads[1].V(1, 2) *= 2.0; });
  EXPECT_FALSE(report.passed);
  EXPECT_EQ(report.worst_parameter, "attention.1.V[1,2]");
  for (const auto& g : report.groups)
    if (g.name != "attention.1.V") EXPECT_LT(g.max_rel_error, 1e-4) << g.name;
}

TEST(GradientCheck, EveryPoolingClassifierNormalization) {
  for (auto kind : {PoolingKind::Mean, PoolingKind::Max, PoolingKind::Attention, PoolingKind::GatedAttention,
                    PoolingKind::MultiAttention})
    for (auto cls : {ClassifierKind::Logistic, ClassifierKind::MixtureOfExperts})
      for (auto norm : {Normalization::Softmax, Normalization::Sparsemax}) {
        const auto cfg = tiny_config(kind, cls, norm);
        for (std::uint64_t seed = 1; seed <= 3; ++seed) {
          auto [model, frames, labels] = cli::tiny_instance(cfg, seed);
          const auto report = gradient_check(model, frames, labels, Vector::Ones(3), 1e-4);
          EXPECT_TRUE(report.passed) << to_string(kind) << "/" << to_string(cls) << "/" << to_string(norm)
                                     << " worst " << report.worst_parameter << " " << report.max_rel_error;
        }
      }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  testutil::TempDir dir("ckpt");
  Rng rng(12);
  auto model = init_model(tiny_config(PoolingKind::MultiAttention, ClassifierKind::MixtureOfExperts), 13);
  perturb(model, rng, 1.0 / 3.0);
  auto adam = AdamState::fresh(model, 3e-4);
  adam.step = 17;
  adam.m = model;
  perturb(adam.m, rng);
  adam.v = zeros_like(model);
  save_checkpoint(dir / "m.json", {model, adam});
  const auto back = load_checkpoint(dir / "m.json");
  EXPECT_TRUE(back.model == model);
  EXPECT_TRUE(back.adam.m == adam.m);
  EXPECT_TRUE(back.adam.v == adam.v);
  EXPECT_EQ(back.adam.step, 17);
  EXPECT_EQ(back.adam.lr, 3e-4);
  save_checkpoint(dir / "again.json", back);
  EXPECT_EQ(read_file(dir / "m.json"), read_file(dir / "again.json"));
}

TEST(Checkpoint, CorruptFilesAreParseErrors) {
  testutil::TempDir dir("ckpt_bad");
  write_file_atomic(dir / "a.json", "{");
  EXPECT_THROW(load_checkpoint(dir / "a.json"), ParseError);
  const auto model = init_model(tiny_config(PoolingKind::Mean), 1);
  auto j = to_json(Checkpoint{model, AdamState::fresh(model)});
  j["params"].erase("projection.b");
  write_file_atomic(dir / "b.json", j.dump());
  EXPECT_THROW(load_checkpoint(dir / "b.json"), ParseError);
}
