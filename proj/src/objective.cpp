#include "caseq/objective.hpp"

#include "caseq/simplex.hpp"

#include <algorithm>

namespace caseq {

std::vector<EventSequence> sample_pseudo_sequences(int count, int num_event_types,
                                                   PseudoLengths lengths, Rng& rng) {
  if (count < 1) throw ParameterError("sample_pseudo_sequences: R must be >= 1");
  if (num_event_types < 1) throw ParameterError("sample_pseudo_sequences: M must be >= 1");
  if (lengths.min < 1 || lengths.max < lengths.min)
    throw ParameterError("sample_pseudo_sequences: need 1 <= min length <= max length");
  std::uniform_int_distribution<int> length(lengths.min, lengths.max);
  std::uniform_int_distribution<int> event(1, num_event_types);
  std::vector<EventSequence> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int j = 0; j < count; ++j) {
    EventSequence s(static_cast<std::size_t>(length(rng)));
    for (int& e : s) e = event(rng);
    out.push_back(std::move(s));
  }
  return out;
}

PseudoLengths default_pseudo_lengths(std::span<const TrainingWindow> windows, int max_len) {
  if (windows.empty()) return {1, 1};
  std::vector<int> lens;
  lens.reserve(windows.size());
  for (const auto& w : windows) lens.push_back(static_cast<int>(w.events.size()));
  auto mid = lens.begin() + static_cast<std::ptrdiff_t>(lens.size() / 2);
  std::nth_element(lens.begin(), mid, lens.end());
  return {1, std::clamp(*mid, 1, max_len)};
}

PriorEstimate prior_estimate(ad::Tape& tape, const BoundParams& params, const CaseqConfig& config,
                             std::span<const EventSequence> pseudo, int epoch) {
  if (pseudo.empty()) throw ParameterError("prior_estimate: no pseudo sequences");
  std::vector<ad::Tensor> finals;
  finals.reserve(pseudo.size());
  for (const auto& s : pseudo) {
    const EventSequence seq = truncate_prefix(s, config.max_len);
    ForwardResult res = forward(tape, params, config, seq, Routing::Soft, nullptr);
    finals.push_back(ad::slice(res.posterior, res.posterior.rows() - 1, 0, 1, res.posterior.cols()));
  }
  ad::Tensor acc = finals[0];
  for (std::size_t j = 1; j < finals.size(); ++j) acc = ad::add(acc, finals[j]);
  PriorEstimate p;
  p.probs = ad::scale(acc, 1.0 / static_cast<double>(finals.size()));
  p.count = static_cast<int>(finals.size());
  p.epoch = epoch;
  return p;
}

namespace {

std::vector<int> next_targets(const EventSequence& events) {
  std::vector<int> y(events.size() - 1);
  for (std::size_t i = 1; i < events.size(); ++i) y[i - 1] = events[i] - 1;
  return y;
}

void check_window(const TrainingWindow& w) {
  if (w.events.size() < 2) throw ParameterError("loss: training window needs at least 2 events");
}

}  // namespace

LossResult caseq_loss(ad::Tape& tape, const BoundParams& params, const CaseqConfig& config,
                      std::span<const TrainingWindow> batch, double alpha,
                      const PriorEstimate& prior, Rng& rng) {
  if (batch.empty()) throw ParameterError("caseq_loss: empty batch");
  if (!(alpha >= 0.0)) throw ParameterError("caseq_loss: alpha must be >= 0");
  if (!prior.probs.valid()) throw ParameterError("caseq_loss: prior estimate missing");

  LossBreakdown bd;
  bd.alpha = alpha;
  ad::Tensor ce_sum, kl_sum;
  for (const auto& w : batch) {
    check_window(w);
    const EventSequence inputs(w.events.begin(), w.events.end() - 1);
    const std::vector<int> targets = next_targets(w.events);
    ForwardResult res = forward(tape, params, config, inputs, config.routing, &rng);
    ad::Tensor ce = ad::sum(ad::cross_entropy_rows(res.logits, targets));
    ad::Tensor kl = ad::sum(ad::kl_rows(res.posterior, prior.probs, kPriorFloor, &bd.prior_floor_hit));
    ce_sum = ce_sum.valid() ? ad::add(ce_sum, ce) : ce;
    kl_sum = kl_sum.valid() ? ad::add(kl_sum, kl) : kl;
    bd.positions += targets.size();
  }
  const double inv = 1.0 / static_cast<double>(bd.positions);
  ad::Tensor pred = ad::scale(ce_sum, inv);
  ad::Tensor kl = ad::scale(kl_sum, inv);
  ad::Tensor total = ad::add(pred, ad::scale(kl, alpha));
  bd.prediction = pred.scalar();
  bd.kl = kl.scalar();
  bd.total = total.scalar();
  return {total, bd};
}

LossResult mle_loss(ad::Tape& tape, const BoundParams& params, const CaseqConfig& config,
                    std::span<const TrainingWindow> batch) {
  if (batch.empty()) throw ParameterError("mle_loss: empty batch");
  if (config.baseline == BaselineMode::None)
    throw ParameterError("mle_loss: requires a baseline mode (single, ensemble or gated)");
  LossBreakdown bd;
  ad::Tensor ce_sum;
  for (const auto& w : batch) {
    check_window(w);
    const EventSequence inputs(w.events.begin(), w.events.end() - 1);
    const std::vector<int> targets = next_targets(w.events);
    ForwardResult res = forward(tape, params, config, inputs, Routing::Soft, nullptr);
    ad::Tensor ce = ad::sum(ad::cross_entropy_rows(res.logits, targets));
    ce_sum = ce_sum.valid() ? ad::add(ce_sum, ce) : ce;
    bd.positions += targets.size();
  }
  ad::Tensor total = ad::scale(ce_sum, 1.0 / static_cast<double>(bd.positions));
  bd.prediction = total.scalar();
  bd.total = bd.prediction;
  return {total, bd};
}

}  // namespace caseq
