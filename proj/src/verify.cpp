#include "caseq/verify.hpp"

#include "caseq/objective.hpp"
#include "caseq/scm.hpp"
#include "caseq/train.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace caseq {

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

EventSequence random_sequence(int length, int m, Rng& rng) {
  std::uniform_int_distribution<int> pick(1, m);
  EventSequence s(static_cast<std::size_t>(length));
  for (int& e : s) e = pick(rng);
  return s;
}

CheckResult grads_for(Backbone backbone, std::uint64_t seed) {
  CaseqConfig cfg;
  cfg.num_event_types = 6;
  cfg.dim = 4;
  cfg.units = 2;
  cfg.layers = 2;
  cfg.backbone = backbone;
  cfg.max_len = 8;
  cfg.routing = Routing::Soft;
  const CaseqParams layout = init_params(cfg, seed);

  Rng rng(derive_seed(seed, 1));
  const std::vector<TrainingWindow> batch = {{random_sequence(6, cfg.num_event_types, rng), 0}};
  const std::vector<EventSequence> pseudo =
      sample_pseudo_sequences(3, cfg.num_event_types, {2, 5}, rng);
  const double alpha = 0.5;

  auto loss = [&](ad::Tape& tape, std::span<const ad::Tensor> flat) {
    const BoundParams bound = assemble(layout, flat);
    const PriorEstimate prior = prior_estimate(tape, bound, cfg, pseudo, 1);
    Rng unused(0);
    return caseq_loss(tape, bound, cfg, batch, alpha, prior, unused).total;
  };
  const ad::FiniteDiffReport r = ad::finite_diff_check(loss, flatten(layout), 1e-5);
  CheckResult out;
  out.name = "grads/" + to_string(backbone);
  out.passed = r.max_rel_error < 1e-4;
  out.details = "max rel err " + fmt(r.max_rel_error) + " over " + std::to_string(r.coordinates) +
                " coordinates (tolerance 1e-4, floor " + fmt(ad::kFiniteDiffFloor) +
                "), max abs err " + fmt(r.max_abs_error);
  return out;
}

}  // namespace

std::vector<CheckResult> verify_grads(std::uint64_t seed) {
  return {grads_for(Backbone::Gru, seed), grads_for(Backbone::Attention, seed)};
}

std::vector<CheckResult> verify_elbo(std::uint64_t seed, int draws) {
  Rng rng(seed);
  double worst_gap = -std::numeric_limits<double>::infinity();  // max(elbo - log marginal)
  double worst_eq = 0.0;
  int valid = 0;
  for (int i = 0; i < draws; ++i) {
    const int c = std::uniform_int_distribution<int>(2, 5)(rng);
    const int m = std::uniform_int_distribution<int>(2, 8)(rng);
    const int len = std::uniform_int_distribution<int>(1, 8)(rng);
    const double lambda = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const scm::ScmSpec spec = scm::random_spec(c, m, lambda, 1.0, len + 1, rng);
    const EventSequence prefix = random_sequence(len, m, rng);
    const int y = std::uniform_int_distribution<int>(1, m)(rng);
    const Vector q = scm::dirichlet(c, 1.0, rng);
    const int t = len + 1;
    const double logm = scm::log_marginal(spec, prefix, t, y);
    const double elbo = scm::elbo_enumerate(spec, prefix, t, y, q);
    const double at_post = scm::elbo_enumerate(spec, prefix, t, y, scm::true_posterior(spec, prefix, t, y));
    if (!std::isfinite(logm)) continue;
    ++valid;
    worst_gap = std::max(worst_gap, elbo - logm);
    worst_eq = std::max(worst_eq, std::abs(at_post - logm));
  }
  return {
      {"elbo/bound", valid == draws && worst_gap <= 1e-12,
       std::to_string(valid) + " draws, max(ELBO - log p) = " + fmt(worst_gap) + " (tolerance 1e-12)"},
      {"elbo/tight", valid == draws && worst_eq <= 1e-12,
       "max |ELBO(true posterior) - log p| = " + fmt(worst_eq) + " (tolerance 1e-12)"},
  };
}

std::vector<CheckResult> verify_backdoor(std::uint64_t seed, int specs, std::size_t samples) {
  Rng rng(seed);
  double worst_z = 0.0;
  int entries = 0;
  for (int i = 0; i < specs; ++i) {
    const int m = 4;
    const int len = std::uniform_int_distribution<int>(2, 10)(rng);
    const scm::ScmSpec spec = scm::random_spec(3, m, 0.5, 1.0, len + 1, rng);
    const EventSequence prefix = random_sequence(len, m, rng);
    const Vector exact = scm::backdoor_sum(spec, prefix, len + 1);
    const Vector mc = scm::interventional_dist_mutilated(spec, prefix, len + 1, samples,
                                                         derive_seed(seed, static_cast<std::uint64_t>(i)));
    for (Index j = 0; j < exact.size(); ++j) {
      const double sigma = std::sqrt(exact(j) * (1.0 - exact(j)) / static_cast<double>(samples));
      const double diff = std::abs(mc(j) - exact(j));
      const double z = sigma > 0.0 ? diff / sigma : (diff == 0.0 ? 0.0 : INFINITY);
      worst_z = std::max(worst_z, z);
      ++entries;
    }
  }

  // Confounded case: sticky contexts drifting over time make the prefix
  // informative about the current context.
  const int horizon = 20;
  const scm::ScmSpec conf = scm::drifting_spec(4, 6, 0.5, 0.9, 0.3, horizon, derive_seed(seed, 1000));
  const Dataset data = scm::sample_dataset(conf, 50, derive_seed(seed, 1001));
  double best_tv = 0.0;
  for (const auto& s : data.sequences)
    for (std::size_t len = 1; len < s.size(); ++len) {
      const EventSequence prefix(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(len));
      const int t = static_cast<int>(len) + 1;
      const Vector obs = scm::observational_conditional(conf, prefix, t);
      const Vector itv = scm::backdoor_sum(conf, prefix, t);
      best_tv = std::max(best_tv, 0.5 * (obs - itv).cwiseAbs().sum());
    }
  return {
      {"backdoor/monte-carlo", worst_z <= 3.0,
       std::to_string(entries) + " entries over " + std::to_string(specs) + " specs, " +
           std::to_string(samples) + " samples, max |z| = " + fmt(worst_z) + " (bound 3)"},
      {"backdoor/confounded", best_tv > 0.05,
       "max TV(observational, interventional) = " + fmt(best_tv) + " (needs > 0.05)"},
  };
}

std::vector<CheckResult> verify_reduction(std::uint64_t seed) {
  std::vector<CheckResult> out;
  for (Backbone backbone : {Backbone::Gru, Backbone::Attention}) {
    CaseqConfig cfg;
    cfg.num_event_types = 7;
    cfg.dim = 6;
    cfg.units = 1;
    cfg.layers = 1;
    cfg.backbone = backbone;
    cfg.max_len = 12;
    cfg.routing = Routing::Gumbel;
    const CaseqParams params = init_params(cfg, seed);
    Rng rng(derive_seed(seed, 1));
    const std::vector<TrainingWindow> batch = {{random_sequence(10, cfg.num_event_types, rng), 0}};
    const EventSequence inputs(batch[0].events.begin(), batch[0].events.end() - 1);

    ad::Tape tape;
    const BoundParams bound = bind(tape, params, false);
    Rng gumbel_rng(derive_seed(seed, 2));
    const ForwardResult full = forward(tape, bound, cfg, inputs, Routing::Gumbel, &gumbel_rng);
    const ad::Tensor bare = backbone_forward(bound, cfg, inputs);
    const Matrix& a = full.logits.value();
    const Matrix& b = bare.value();
    const bool same = a.rows() == b.rows() && a.cols() == b.cols() &&
                      std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;

    const std::vector<EventSequence> pseudo = sample_pseudo_sequences(4, cfg.num_event_types, {1, 6}, rng);
    const PriorEstimate prior = prior_estimate(tape, bound, cfg, pseudo, 1);
    const LossResult loss = caseq_loss(tape, bound, cfg, batch, 0.7, prior, gumbel_rng);
    out.push_back({"reduction/" + to_string(backbone) + "/logits", same,
                   same ? "bitwise equal" : "max |diff| = " + fmt((a - b).cwiseAbs().maxCoeff())});
    out.push_back({"reduction/" + to_string(backbone) + "/kl", loss.breakdown.kl == 0.0,
                   "KL = " + fmt(loss.breakdown.kl)});
  }
  return out;
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names = {"grads", "elbo", "backdoor", "reduction", "all"};
  return names;
}

std::vector<CheckResult> run_suite(const std::string& suite) {
  std::vector<CheckResult> out;
  auto append = [&out](std::vector<CheckResult> r) { out.insert(out.end(), r.begin(), r.end()); };
  if (suite == "grads" || suite == "all") append(verify_grads());
  if (suite == "elbo" || suite == "all") append(verify_elbo());
  if (suite == "backdoor" || suite == "all") append(verify_backdoor());
  if (suite == "reduction" || suite == "all") append(verify_reduction());
  if (out.empty()) throw ConfigError("unknown suite '" + suite + "'; expected grads|elbo|backdoor|reduction|all");
  return out;
}

}  // namespace caseq
