#include "caseq/train.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

using namespace caseq;

namespace {

CaseqConfig model(int m, Backbone bb = Backbone::Gru) {
  CaseqConfig c;
  c.num_event_types = m;
  c.dim = 8;
  c.units = 2;
  c.layers = 1;
  c.backbone = bb;
  c.max_len = 20;
  return c;
}

Dataset alternating(int n, int length) {
  Dataset d;
  d.num_event_types = 2;
  for (int i = 0; i < n; ++i) {
    EventSequence s;
    for (int t = 0; t < length; ++t) s.push_back(1 + (t + i) % 2);
    d.sequences.push_back(s);
  }
  return d;
}

}  // namespace

TEST(RunConfig, ParsesAndRejects) {
  const RunConfig rc = run_config_from_json(
      R"({"model": {"M": 3, "d": 4, "K": 2, "D": 1}, "train": {"lr": 0.01, "epochs": 2, "R": 4}})");
  EXPECT_EQ(rc.model.num_event_types, 3);
  EXPECT_EQ(rc.train.learning_rate, 0.01);
  EXPECT_EQ(rc.train.pseudo_count, 4);
  EXPECT_EQ(run_config_from_json(run_config_to_json(rc)).train.epochs, 2);
  EXPECT_THROW(run_config_from_json(R"({"train": {"lr": "fast"}})"), ConfigError);
  EXPECT_THROW(run_config_from_json(R"({"train": {"learning": 1}})"), ConfigError);
  EXPECT_THROW(run_config_from_json("{"), ConfigError);
}

TEST(InitParams, DeterministicAndXavierRange) {
  CaseqConfig c = model(5);
  c.dim = 16;
  const CaseqParams a = init_params(c, 3);
  const CaseqParams b = init_params(c, 3);
  const auto fa = flatten(a), fb = flatten(b);
  for (std::size_t i = 0; i < fa.size(); ++i) EXPECT_EQ(fa[i], fb[i]);
  EXPECT_NE(flatten(init_params(c, 4))[0], fa[0]);

  const auto names = unit_tensor_names(c.backbone);
  a.visit([&](const std::string& name, const Matrix& m) {
    const bool bias = name.find(".unit") != std::string::npos &&
                      is_bias(c.backbone, std::stoul(name.substr(name.rfind('.') + 1)));
    if (bias) {
      EXPECT_TRUE(m.isZero(0.0)) << name;
      return;
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
    EXPECT_LE(m.cwiseAbs().maxCoeff(), bound) << name;
  });
}

TEST(InitParams, XavierVariance) {
  // Uniform on +-sqrt(6/(r+c)) has variance 2/(r+c), i.e. 0.25 for a 4 x 4 H_x.
  CaseqConfig c = model(4);
  c.dim = 4;
  double sum = 0, sq = 0;
  std::size_t n = 0;
  for (std::uint64_t s = 0; s < 2000; ++s) {
    const Matrix h = init_params(c, s).event_embedding;
    for (Index i = 0; i < h.size(); ++i) {
      sum += h.data()[i];
      sq += h.data()[i] * h.data()[i];
      ++n;
    }
  }
  const double mean = sum / static_cast<double>(n);
  const double var = sq / static_cast<double>(n) - mean * mean;
  EXPECT_NEAR(var, 0.25, 0.25 * 0.05);
}

TEST(Adam, ZeroGradientLeavesParams) {
  const CaseqConfig c = model(3);
  CaseqParams p = init_params(c, 1);
  const CaseqParams before = p;
  AdamState s = adam_init(p);
  std::vector<Matrix> grads;
  for (const Matrix& m : flatten(p)) grads.push_back(Matrix::Zero(m.rows(), m.cols()));
  TrainConfig tc;
  adam_step(p, grads, s, 1, tc);
  for (std::size_t i = 0; i < grads.size(); ++i) EXPECT_EQ(flatten(p)[i], flatten(before)[i]);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  const CaseqConfig c = model(3);
  CaseqParams p = init_params(c, 1);
  const auto before = flatten(p);
  AdamState s = adam_init(p);
  std::vector<Matrix> grads;
  Rng rng(2);
  std::normal_distribution<double> nd;
  for (const Matrix& m : before) {
    Matrix g(m.rows(), m.cols());
    for (Index i = 0; i < g.size(); ++i) g.data()[i] = nd(rng);
    grads.push_back(g);
  }
  TrainConfig tc;
  tc.learning_rate = 0.01;
  adam_step(p, grads, s, 1, tc);
  const auto after = flatten(p);
  for (std::size_t k = 0; k < after.size(); ++k)
    for (Index i = 0; i < after[k].size(); ++i) {
      const double g = grads[k].data()[i];
      // m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps).
      EXPECT_NEAR(after[k].data()[i] - before[k].data()[i], -0.01 * g / (std::abs(g) + 1e-8), 1e-15);
    }
}

TEST(Adam, ConstantGradientSteadyStep) {
  const CaseqConfig c = model(3);
  CaseqParams p = zero_params(c);
  AdamState s = adam_init(p);
  std::vector<Matrix> grads;
  for (const Matrix& m : flatten(p)) grads.push_back(Matrix::Constant(m.rows(), m.cols(), 0.5));
  TrainConfig tc;
  tc.learning_rate = 0.001;
  for (long t = 1; t <= 100; ++t) adam_step(p, grads, s, t, tc);
  // Bias-corrected moments of a constant gradient are exact, so every step is
  // -lr * g / (|g| + eps).
  EXPECT_NEAR(flatten(p)[0](0, 0), -100 * 0.001 * 0.5 / (0.5 + 1e-8), 1e-14);
}

TEST(Adam, NonFiniteGradientThrowsWithoutUpdating) {
  const CaseqConfig c = model(3);
  CaseqParams p = init_params(c, 1);
  const auto before = flatten(p);
  AdamState s = adam_init(p);
  std::vector<Matrix> grads;
  for (const Matrix& m : before) grads.push_back(Matrix::Ones(m.rows(), m.cols()));
  grads.back()(0, 0) = std::nan("");
  TrainConfig tc;
  EXPECT_THROW(adam_step(p, grads, s, 1, tc), NumericError);
  EXPECT_EQ(flatten(p)[0], before[0]);
  EXPECT_TRUE(s.first[0].isZero(0.0));
}

TEST(Train, ZeroEpochsReturnsInitialParams) {
  const Dataset d = alternating(4, 8);
  const CaseqConfig c = model(2);
  TrainConfig tc;
  tc.epochs = 0;
  tc.seed = 5;
  const TrainResult r = train(d, build_splits(d, 1), c, tc);
  EXPECT_TRUE(r.history.epochs.empty());
  EXPECT_EQ(r.history.best_epoch, 0);
  EXPECT_EQ(flatten(r.params)[0], flatten(init_params(c, 5))[0]);
}

TEST(Train, LearnsAlternatingSequence) {
  for (Backbone bb : {Backbone::Gru, Backbone::Attention}) {
    const Dataset d = alternating(16, 12);
    const GapSplit split = build_splits(d, 0);
    const CaseqConfig c = model(2, bb);
    TrainConfig tc;
    tc.epochs = 50;
    tc.learning_rate = 0.01;
    tc.batch_size = 4;
    tc.seed = 1;
    const TrainResult r = train(d, split, c, tc);
    const double acc = validation_metric(r.params, c, split, ValidMetric::Accuracy).value();
    EXPECT_GT(acc, 0.95) << to_string(bb);
  }
}

TEST(Train, DeterministicHistory) {
  const Dataset d = alternating(6, 9);
  const GapSplit split = build_splits(d, 1);
  CaseqConfig c = model(2);
  c.routing = Routing::Gumbel;
  TrainConfig tc;
  tc.epochs = 3;
  tc.seed = 11;
  tc.batch_size = 2;
  const TrainResult a = train(d, split, c, tc);
  const TrainResult b = train(d, split, c, tc);
  ASSERT_EQ(a.history.epochs.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.history.epochs[i].loss.total, b.history.epochs[i].loss.total);
    EXPECT_EQ(a.history.epochs[i].loss.kl, b.history.epochs[i].loss.kl);
    EXPECT_EQ(a.history.epochs[i].valid_metric, b.history.epochs[i].valid_metric);
  }
  for (std::size_t i = 0; i < flatten(a.params).size(); ++i)
    EXPECT_EQ(flatten(a.params)[i], flatten(b.params)[i]);
}

TEST(Train, RejectsMismatchedVocabulary) {
  const Dataset d = alternating(3, 6);
  TrainConfig tc;
  EXPECT_THROW(train(d, build_splits(d, 0), model(3), tc), ConfigError);
}

TEST(Train, HistoryCsvHasOneRowPerEpoch) {
  const Dataset d = alternating(3, 6);
  CaseqConfig c = model(2);
  c.baseline = BaselineMode::Single;
  TrainConfig tc;
  tc.epochs = 2;
  const TrainResult r = train(d, build_splits(d, 0), c, tc);
  std::ostringstream out;
  write_history_csv(out, r.history);
  const std::string csv = out.str();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_EQ(r.history.epochs[0].loss.kl, 0.0);
}
