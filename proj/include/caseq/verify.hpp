#pragma once

// Self-checks run by `caseq verify`: each suite compares the implementation
// against an independent oracle and reports one line per invariant.

#include <cstdint>
#include <string>
#include <vector>

namespace caseq {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string details;
};

/// Finite differences (eps 1e-5) of the full loss with soft routing, d=4,
/// K=2, D=2, M=6 and a length-5 input sequence, prior path included.
std::vector<CheckResult> verify_grads(std::uint64_t seed = 7);

/// ELBO <= log marginal over random draws, equality at the true posterior.
std::vector<CheckResult> verify_elbo(std::uint64_t seed = 11, int draws = 1000);

/// Exact backdoor sum against mutilated-graph Monte Carlo on random
/// 3-context specs, and observational != interventional on a confounded spec.
std::vector<CheckResult> verify_backdoor(std::uint64_t seed = 13, int specs = 20,
                                         std::size_t samples = 1000000);

/// K=1, D=1 forward equals the bare backbone bit for bit; KL is exactly 0.
std::vector<CheckResult> verify_reduction(std::uint64_t seed = 17);

/// Suite names: grads, elbo, backdoor, reduction, all.
std::vector<CheckResult> run_suite(const std::string& suite);
const std::vector<std::string>& suite_names();

}  // namespace caseq
