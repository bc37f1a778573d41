#pragma once

// Training objectives: the context-adjusted variational loss
//   mean_t [ CE(logits_t, x_{t+1}) + alpha * KL(q_t || p_hat) ],
// with p_hat the average final-position posterior over R pseudo sequences,
// and the plain maximum-likelihood loss for the baseline modes.

#include "caseq/model.hpp"

#include <span>
#include <vector>

namespace caseq {

struct PseudoLengths {
  int min = 1;
  int max = 1;
};

/// R sequences, lengths uniform in [lengths.min, lengths.max], events i.i.d.
/// uniform over [1, M].
std::vector<EventSequence> sample_pseudo_sequences(int count, int num_event_types,
                                                   PseudoLengths lengths, Rng& rng);

/// Default pseudo length range: [1, median training length] capped at max_len.
PseudoLengths default_pseudo_lengths(std::span<const TrainingWindow> windows, int max_len);

struct PriorEstimate {
  ad::Tensor probs;  // 1 x K^D, differentiable
  int count = 0;     // R
  int epoch = 0;
};

/// Mean of the soft-routing flattened posterior at the final position of each
/// pseudo sequence, recorded on the same tape as the parameters.
PriorEstimate prior_estimate(ad::Tape& tape, const BoundParams& params, const CaseqConfig& config,
                             std::span<const EventSequence> pseudo, int epoch = 0);

struct LossBreakdown {
  double total = 0.0;
  double prediction = 0.0;
  double kl = 0.0;
  double alpha = 0.0;
  std::size_t positions = 0;
  bool prior_floor_hit = false;
};

struct LossResult {
  ad::Tensor total;  // 1 x 1, differentiable
  LossBreakdown breakdown;
};

/// Loss over every position of every window, averaged over positions.
/// Routing follows config.routing.
LossResult caseq_loss(ad::Tape& tape, const BoundParams& params, const CaseqConfig& config,
                      std::span<const TrainingWindow> batch, double alpha,
                      const PriorEstimate& prior, Rng& rng);

/// Mean per-position cross-entropy for a baseline-mode model.
LossResult mle_loss(ad::Tape& tape, const BoundParams& params, const CaseqConfig& config,
                    std::span<const TrainingWindow> batch);

}  // namespace caseq
