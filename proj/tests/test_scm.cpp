#include "caseq/scm.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

using namespace caseq;
using namespace caseq::scm;

namespace {

Matrix row_stochastic(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index r = 0;
  for (const auto& row : rows) {
    Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<Index>(xs.size()));
  Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

ScmSpec two_context_spec(double lambda, double rho) {
  ScmSpec s;
  s.num_contexts = 2;
  s.num_event_types = 3;
  s.transitions = {row_stochastic({{0.7, 0.2, 0.1}, {0.1, 0.8, 0.1}, {0.3, 0.3, 0.4}}),
                   row_stochastic({{0.1, 0.1, 0.8}, {0.5, 0.1, 0.4}, {0.05, 0.9, 0.05}})};
  s.invariant = row_stochastic({{0.2, 0.5, 0.3}, {0.3, 0.3, 0.4}, {0.6, 0.2, 0.2}});
  s.init_dist = vec({0.5, 0.3, 0.2});
  s.schedule = {{2, vec({0.8, 0.2})}, {6, vec({0.3, 0.7})}};
  s.interpolate = true;
  s.lambda_inv = lambda;
  s.stickiness = rho;
  s.min_length = 3;
  s.max_length = 8;
  s.validate();
  return s;
}

// Enumerates every context path c_2..c_t: returns P(x_2..x_{t-1}, c_t = c)
// and, through `y_joint`, P(x_2..x_{t-1}, c_t = c, x_t = y) summed over c.
struct Enumeration {
  Vector joint_ct;  // unnormalised P(events, c_t)
};

Enumeration enumerate_paths(const ScmSpec& s, const EventSequence& prefix, int t) {
  const int c_count = s.num_contexts;
  Enumeration out;
  out.joint_ct = Vector::Zero(c_count);
  std::vector<int> path(static_cast<std::size_t>(t - 1), 0);  // path[s-2] = c_s
  std::function<void(int, double)> rec = [&](int pos, double weight) {
    if (pos > t) {
      out.joint_ct(path[static_cast<std::size_t>(t - 2)]) += weight;
      return;
    }
    const Vector pi = s.schedule_at(pos);
    for (int c = 0; c < c_count; ++c) {
      double p_c = (1.0 - s.stickiness) * pi(c);
      if (pos == 2) p_c = pi(c);
      else if (c == path[static_cast<std::size_t>(pos - 3)]) p_c += s.stickiness;
      path[static_cast<std::size_t>(pos - 2)] = c;
      double w = weight * p_c;
      if (pos < t) {
        const int prev = prefix[static_cast<std::size_t>(pos - 2)];
        const int cur = prefix[static_cast<std::size_t>(pos - 1)];
        w *= s.kernel_row(c, prev)(cur - 1);
      }
      rec(pos + 1, w);
    }
  };
  rec(2, 1.0);
  return out;
}

Vector brute_context_prior(const ScmSpec& s, int t) {
  // Enumerating with an event-free prefix of matching length yields the
  // chain marginal once kernel factors are removed.
  ScmSpec free = s;
  free.lambda_inv = 1.0;
  free.invariant = Matrix::Ones(s.num_event_types, s.num_event_types);
  EventSequence dummy(static_cast<std::size_t>(t - 1), 1);
  return enumerate_paths(free, dummy, t).joint_ct;
}

}  // namespace

TEST(ScmSpec, ValidateNamesOffendingKey) {
  ScmSpec s = two_context_spec(0.5, 0.0);
  s.transitions[1](0, 0) = 0.5;
  try {
    s.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("transitions"), std::string::npos) << e.what();
  }
  s = two_context_spec(0.5, 0.0);
  s.lambda_inv = 1.5;
  try {
    s.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("lambda_inv"), std::string::npos) << e.what();
  }
}

TEST(ScmSpec, JsonRoundTripAndMissingKey) {
  const ScmSpec s = two_context_spec(0.3, 0.4);
  const ScmSpec r = parse_spec(spec_to_json(s));
  EXPECT_EQ(r.num_contexts, 2);
  EXPECT_EQ(r.transitions[1], s.transitions[1]);
  EXPECT_EQ(r.schedule_at(4), s.schedule_at(4));
  EXPECT_EQ(r.stickiness, 0.4);
  EXPECT_EQ(r.max_length, 8);
  try {
    parse_spec(R"({"C_true": 1, "M": 2})");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("transitions"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_spec("{not json"), ConfigError);
}

TEST(ScmSpec, ScheduleInterpolatesAndClamps) {
  const ScmSpec s = two_context_spec(0.5, 0.0);
  EXPECT_TRUE(s.schedule_at(1).isApprox(vec({0.8, 0.2})));
  EXPECT_TRUE(s.schedule_at(4).isApprox(vec({0.55, 0.45})));
  EXPECT_TRUE(s.schedule_at(100).isApprox(vec({0.3, 0.7})));
  ScmSpec step = s;
  step.interpolate = false;
  EXPECT_TRUE(step.schedule_at(5).isApprox(vec({0.8, 0.2})));
  EXPECT_TRUE(step.schedule_at(6).isApprox(vec({0.3, 0.7})));
}

TEST(ScmSpec, ContextPriorMatchesPathEnumeration) {
  for (double rho : {0.0, 0.6}) {
    const ScmSpec s = two_context_spec(0.5, rho);
    for (int t = 2; t <= 7; ++t)
      EXPECT_TRUE(s.context_prior(t).isApprox(brute_context_prior(s, t), 1e-13)) << "t=" << t;
  }
}

TEST(SampleDataset, DeterministicAndWithinLengths) {
  const ScmSpec s = two_context_spec(0.5, 0.5);
  const Dataset a = sample_dataset(s, 50, 9);
  const Dataset b = sample_dataset(s, 50, 9);
  EXPECT_EQ(a.sequences, b.sequences);
  EXPECT_EQ(a.context_labels, b.context_labels);
  for (std::size_t i = 0; i < a.sequences.size(); ++i) {
    EXPECT_GE(a.sequences[i].size(), 3u);
    EXPECT_LE(a.sequences[i].size(), 8u);
    EXPECT_EQ(a.context_labels[i].size(), a.sequences[i].size());
    EXPECT_EQ(a.context_labels[i][0], 0);
  }
  EXPECT_NE(sample_dataset(s, 50, 10).sequences, a.sequences);
}

TEST(SampleDataset, SingleContextBigramsMatchKernel) {
  ScmSpec s = two_context_spec(0.0, 0.0);
  s.num_contexts = 1;
  s.transitions.resize(1);
  s.schedule = {{2, vec({1.0})}};
  s.min_length = 20;
  s.max_length = 30;
  const Dataset d = sample_dataset(s, 5000, 1);
  Matrix counts = Matrix::Zero(3, 3);
  for (const auto& seq : d.sequences)
    for (std::size_t i = 1; i < seq.size(); ++i) counts(seq[i - 1] - 1, seq[i] - 1) += 1;
  ASSERT_GE(counts.sum(), 1e5);
  double chi2 = 0.0;
  for (Index r = 0; r < 3; ++r) {
    const double n = counts.row(r).sum();
    for (Index c = 0; c < 3; ++c) {
      const double e = n * s.transitions[0](r, c);
      chi2 += (counts(r, c) - e) * (counts(r, c) - e) / e;
    }
  }
  // 6 degrees of freedom; mean + 5 sd.
  EXPECT_LT(chi2, 6.0 + 5.0 * std::sqrt(12.0));
}

TEST(SampleDataset, InvariantOnlyIgnoresSchedule) {
  ScmSpec a = two_context_spec(1.0, 0.0);
  ScmSpec b = a;
  b.schedule = {{2, vec({0.0, 1.0})}};
  a.min_length = b.min_length = 20;
  a.max_length = b.max_length = 20;
  auto bigrams = [](const Dataset& d) {
    Matrix c = Matrix::Zero(3, 3);
    for (const auto& seq : d.sequences)
      for (std::size_t i = 1; i < seq.size(); ++i) c(seq[i - 1] - 1, seq[i] - 1) += 1;
    return c;
  };
  const Matrix ca = bigrams(sample_dataset(a, 3000, 1));
  const Matrix cb = bigrams(sample_dataset(b, 3000, 2));
  // Two-sample chi-square on the 9 bigram cells: 8 degrees of freedom.
  double chi2 = 0.0;
  const double na = ca.sum(), nb = cb.sum();
  for (Index i = 0; i < 9; ++i) {
    const double oa = ca.data()[i], ob = cb.data()[i];
    const double pooled = (oa + ob) / (na + nb);
    chi2 += std::pow(oa - na * pooled, 2) / (na * pooled) + std::pow(ob - nb * pooled, 2) / (nb * pooled);
  }
  EXPECT_LT(chi2, 8.0 + 5.0 * std::sqrt(16.0));
}

TEST(SampleDataset, ContextLabelsFollowStepSchedule) {
  ScmSpec s = two_context_spec(0.5, 0.0);
  s.schedule = {{2, vec({0.9, 0.1})}, {20, vec({0.2, 0.8})}};
  s.interpolate = false;
  s.min_length = 30;
  s.max_length = 30;
  const Dataset d = sample_dataset(s, 2000, 4);
  double before = 0, n_before = 0, after = 0, n_after = 0;
  for (const auto& labels : d.context_labels)
    for (int t = 2; t <= 30; ++t) {
      const bool second = labels[static_cast<std::size_t>(t - 1)] == 2;
      if (t < 20) {
        before += second;
        ++n_before;
      } else {
        after += second;
        ++n_after;
      }
    }
  EXPECT_NEAR(before / n_before, 0.1, 3.0 * std::sqrt(0.1 * 0.9 / n_before));
  EXPECT_NEAR(after / n_after, 0.8, 3.0 * std::sqrt(0.8 * 0.2 / n_after));
}

TEST(Interventional, SingleContextAndInvariantOnly) {
  ScmSpec s = two_context_spec(0.0, 0.0);
  s.num_contexts = 1;
  s.transitions.resize(1);
  s.schedule = {{2, vec({1.0})}};
  const std::size_t n = 200000;
  const Vector mc = interventional_dist_mutilated(s, {2, 1}, 3, n, 3);
  for (Index j = 0; j < 3; ++j) {
    const double p = s.transitions[0](0, j);
    EXPECT_NEAR(mc(j), p, 4.0 * std::sqrt(p * (1 - p) / n));
  }
  const ScmSpec inv = two_context_spec(1.0, 0.5);
  const Vector mc2 = interventional_dist_mutilated(inv, {1, 3}, 3, n, 4);
  for (Index j = 0; j < 3; ++j) {
    const double p = inv.invariant(2, j);
    EXPECT_NEAR(mc2(j), p, 4.0 * std::sqrt(p * (1 - p) / n));
  }
}

TEST(Interventional, TwoContextMonteCarloMatchesBackdoor) {
  for (double rho : {0.0, 0.7}) {
    const ScmSpec s = two_context_spec(0.4, rho);
    const EventSequence prefix = {1, 3, 2, 2};
    const std::size_t n = 1000000;
    const Vector mc = interventional_dist_mutilated(s, prefix, 5, n, 12);
    const Vector exact = backdoor_sum(s, prefix, 5);
    for (Index j = 0; j < 3; ++j)
      EXPECT_NEAR(mc(j), exact(j), 3.0 * std::sqrt(exact(j) * (1 - exact(j)) / n)) << "rho " << rho;
  }
}

TEST(BackdoorSum, PointMassAndUniform) {
  ScmSpec s = two_context_spec(0.3, 0.0);
  s.schedule = {{2, vec({0.0, 1.0})}};
  EXPECT_TRUE(backdoor_sum(s, {3, 1}, 3).isApprox(s.kernel_row(1, 1).transpose(), 1e-15));
  s.schedule = {{2, vec({0.5, 0.5})}};
  const Vector expected = 0.5 * (s.kernel_row(0, 2) + s.kernel_row(1, 2)).transpose();
  EXPECT_TRUE(backdoor_sum(s, {2}, 2).isApprox(expected, 1e-15));
}

TEST(BackdoorSum, RequiresTargetAfterPrefix) {
  const ScmSpec s = two_context_spec(0.3, 0.0);
  EXPECT_THROW(backdoor_sum(s, {1, 2}, 4), Error);
  EXPECT_THROW(observational_conditional(s, {}, 1), Error);
}

TEST(ObservationalConditional, MatchesPathEnumeration) {
  for (double rho : {0.0, 0.5, 0.9}) {
    const ScmSpec s = two_context_spec(0.3, rho);
    const EventSequence prefix = {2, 1, 1, 3, 2};
    const int t = 6;
    Vector post = enumerate_paths(s, prefix, t).joint_ct;
    post /= post.sum();
    EXPECT_TRUE(context_filter(s, prefix, t).isApprox(post, 1e-13)) << "rho " << rho;
    Vector y = Vector::Zero(3);
    for (int c = 0; c < 2; ++c) y += post(c) * s.kernel_row(c, prefix.back()).transpose();
    EXPECT_TRUE(observational_conditional(s, prefix, t).isApprox(y, 1e-13));
  }
}

TEST(ObservationalConditional, EqualsBackdoorWithoutStickiness) {
  const ScmSpec s = two_context_spec(0.3, 0.0);
  const EventSequence prefix = {2, 1, 1, 3};
  EXPECT_TRUE(observational_conditional(s, prefix, 5).isApprox(backdoor_sum(s, prefix, 5), 1e-14));
}

TEST(TruePosterior, IdenticalKernelsGivePrior) {
  ScmSpec s = two_context_spec(0.3, 0.2);
  s.transitions[1] = s.transitions[0];
  const Vector post = true_posterior(s, {1, 2}, 3, 3);
  EXPECT_TRUE(post.isApprox(s.context_prior(3), 1e-14));
}

TEST(TruePosterior, DeterministicEvidence) {
  ScmSpec s = two_context_spec(0.0, 0.0);
  s.transitions[0] = row_stochastic({{1, 0, 0}, {1, 0, 0}, {1, 0, 0}});
  s.transitions[1] = row_stochastic({{0, 0, 1}, {0, 0, 1}, {0, 0, 1}});
  const Vector post = true_posterior(s, {1}, 2, 3);
  EXPECT_EQ(post(0), 0.0);
  EXPECT_EQ(post(1), 1.0);
}

TEST(TruePosterior, MatchesJointEnumeration) {
  const ScmSpec s = two_context_spec(0.4, 0.3);
  const EventSequence prefix = {3, 3, 1};
  const int t = 4;
  const Vector prior = s.context_prior(t);
  for (int y = 1; y <= 3; ++y) {
    Vector joint(2);
    for (int c = 0; c < 2; ++c) joint(c) = prior(c) * s.kernel_row(c, prefix.back())(y - 1);
    EXPECT_TRUE(true_posterior(s, prefix, t, y).isApprox(joint / joint.sum(), 1e-14));
    EXPECT_NEAR(log_marginal(s, prefix, t, y), std::log(joint.sum()), 1e-14);
  }
}

TEST(Elbo, SymmetricCaseIsExact) {
  ScmSpec s = two_context_spec(0.3, 0.0);
  s.transitions[1] = s.transitions[0];
  const Vector q = s.context_prior(3);
  EXPECT_NEAR(elbo_enumerate(s, {1, 2}, 3, 2, q), log_marginal(s, {1, 2}, 3, 2), 1e-15);
}

TEST(Elbo, TightAtPosteriorAndBoundedElsewhere) {
  Rng rng(21);
  const ScmSpec s = two_context_spec(0.4, 0.3);
  const EventSequence prefix = {1, 2, 3};
  for (int y = 1; y <= 3; ++y) {
    const double logm = log_marginal(s, prefix, 4, y);
    EXPECT_NEAR(elbo_enumerate(s, prefix, 4, y, true_posterior(s, prefix, 4, y)), logm, 1e-12);
    for (int i = 0; i < 1000; ++i)
      EXPECT_LE(elbo_enumerate(s, prefix, 4, y, dirichlet(2, 0.5, rng)), logm + 1e-12);
  }
}

TEST(Elbo, ImpossibleSupportIsNegativeInfinity) {
  ScmSpec s = two_context_spec(0.0, 0.0);
  s.transitions[1] = row_stochastic({{0, 0, 1}, {0, 0, 1}, {0, 0, 1}});
  // y=1 is impossible under context 2; any mass there makes the ELBO -inf.
  EXPECT_EQ(elbo_enumerate(s, {1}, 2, 1, vec({0.5, 0.5})), kNegInf);
  EXPECT_TRUE(std::isfinite(elbo_enumerate(s, {1}, 2, 1, vec({1.0, 0.0}))));
}

TEST(Dirichlet, OnSimplex) {
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const Vector v = dirichlet(5, 0.1, rng);
    EXPECT_NEAR(v.sum(), 1.0, 1e-12);
    EXPECT_GE(v.minCoeff(), 0.0);
  }
}

TEST(DriftingSpec, FirstHalfEarlySecondHalfLate) {
  const ScmSpec s = drifting_spec(4, 6, 0.5, 0.9, 0.3, 40, 1);
  const Vector early = s.schedule_at(2), late = s.schedule_at(40);
  EXPECT_GT(early(0) + early(1), 0.9);
  EXPECT_GT(late(2) + late(3), 0.9);
  EXPECT_EQ(s.min_length, 32);
  EXPECT_EQ(s.max_length, 40);
  EXPECT_EQ(s.stickiness, 0.9);
}
