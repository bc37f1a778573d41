#pragma once

// Ground-truth confounded event generator and its exact oracles.
//
// Generative process for one sequence of length L:
//   x_1 ~ init_dist
//   for t = 2..L:
//     c_t = c_{t-1}          with probability `stickiness` (t >= 3)
//     c_t ~ schedule(t)      otherwise
//     x_t ~ (1 - lambda_inv) T_{c_t}[x_{t-1}] + lambda_inv T_inv[x_{t-1}]
//
// With stickiness = 0 contexts are drawn independently per position and the
// context prior at step t is schedule(t). With stickiness > 0 the prefix
// carries information about c_t; the prior P(C_t) used by the backdoor sum
// is then the chain marginal m_t = stickiness m_{t-1} + (1 - stickiness) pi_t.

#include "caseq/core.hpp"
#include "caseq/data.hpp"

#include <filesystem>
#include <iosfwd>
#include <limits>
#include <vector>

namespace caseq::scm {

struct Breakpoint {
  int position = 1;  // first position this simplex applies to
  Vector probs;
};

struct ScmSpec {
  int num_contexts = 1;    // C_true
  int num_event_types = 2;  // M
  std::vector<Matrix> transitions;  // per context, M x M row-stochastic
  Matrix invariant;                 // T_inv, M x M
  Vector init_dist;                 // length M
  std::vector<Breakpoint> schedule;  // sorted by position
  bool interpolate = false;          // linear interpolation between breakpoints
  double lambda_inv = 0.5;
  double stickiness = 0.0;
  int min_length = 10;
  int max_length = 20;

  /// Throws ConfigError naming the offending field.
  void validate() const;

  /// pi_t, the schedule simplex at 1-based position t.
  Vector schedule_at(int t) const;
  /// P(C_t): marginal of the context chain at position t >= 2.
  Vector context_prior(int t) const;
  /// Mixed next-event kernel row for context c (0-based) after event `last` (1-based).
  RowVector kernel_row(int context, int last) const;
};

ScmSpec load_spec(const std::filesystem::path& path);
ScmSpec parse_spec(const std::string& json_text);
std::string spec_to_json(const ScmSpec& spec);

/// Random spec: Dirichlet(concentration) kernel rows, uniform init, and a
/// schedule that moves linearly from one Dirichlet draw at position 2 to
/// another at `horizon`.
ScmSpec random_spec(int num_contexts, int num_event_types, double lambda_inv,
                    double concentration, int horizon, Rng& rng);

/// Confounded benchmark spec: contexts drift from the first half of the
/// context set being dominant at position 2 to the second half dominant at
/// `horizon`.
ScmSpec drifting_spec(int num_contexts, int num_event_types, double lambda_inv,
                      double stickiness, double concentration, int horizon, std::uint64_t seed);

/// Context labels are stored per position (index t-1); position 1 holds 0.
Dataset sample_dataset(const ScmSpec& spec, std::size_t n, std::uint64_t seed);

void write_context_labels(std::ostream& out, const Dataset& data);

/// Monte Carlo P(Y | do(S = prefix)) at target position t = |prefix| + 1:
/// contexts are drawn from the context process alone, independent of the prefix.
Vector interventional_dist_mutilated(const ScmSpec& spec, const EventSequence& prefix, int t,
                                     std::size_t samples, std::uint64_t seed);

/// Exact sum_c P(Y | S, c) P(C_t = c).
Vector backdoor_sum(const ScmSpec& spec, const EventSequence& prefix, int t);

/// Exact observational P(Y | S) with the context posterior P(c_t | S)
/// obtained by forward filtering over the prefix.
Vector observational_conditional(const ScmSpec& spec, const EventSequence& prefix, int t);

/// P(c_t | S) by forward filtering.
Vector context_filter(const ScmSpec& spec, const EventSequence& prefix, int t);

/// P(c | S, y) proportional to P(C_t = c) P(y | S, c).
Vector true_posterior(const ScmSpec& spec, const EventSequence& prefix, int t, int y);

/// log sum_c P(C_t = c) P(y | S, c).
double log_marginal(const ScmSpec& spec, const EventSequence& prefix, int t, int y);

/// sum_c Q(c) log P(y | S, c) - KL(Q || P(C_t)). Returns -infinity when Q
/// puts mass on a context under which y is impossible or which the prior
/// excludes.
double elbo_enumerate(const ScmSpec& spec, const EventSequence& prefix, int t, int y,
                      const Vector& q);

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Draw from a symmetric Dirichlet.
Vector dirichlet(int n, double concentration, Rng& rng);

}  // namespace caseq::scm
