#pragma once

// Ranking/classification metrics, gap-wise evaluation and diagnostic dumps.

#include "caseq/model.hpp"

#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace caseq {

/// 1 + number of candidates scoring strictly higher than the target, with
/// ties counted against the target. Candidate and target ids are 1-based;
/// without candidates the full vocabulary is ranked.
int rank_of_target(const Eigen::Ref<const RowVector>& logits, int target,
                   std::span<const int> candidates = {});

/// 1-based id of the highest logit; the lowest id wins ties.
int argmax_event(const Eigen::Ref<const RowVector>& logits);

double hr_at_k(std::span<const int> ranks, int k = 10);
double ndcg_at_k(std::span<const int> ranks, int k = 10);
double accuracy(std::span<const int> predictions, std::span<const int> targets);

/// 100 * (first - last) / first.
double drop_percent(double first, double last);

enum class Task { Ranking, Classification };

struct MetricValue {
  double value = 0.0;
  std::size_t count = 0;
};

struct GapRow {
  int gap = 0;
  bool present = false;  // false when no test example has this gap
  std::map<std::string, MetricValue> metrics;
};

struct MetricsReport {
  int max_gap = 0;
  std::vector<GapRow> rows;

  const GapRow* find(int gap) const;
};

struct EvalOptions {
  Task task = Task::Classification;
  int negatives = 0;  // 0 = rank against the full vocabulary
  std::uint64_t seed = 0;
  std::vector<int> gaps;  // empty = every gap in [0, G]
  int threads = 1;
  int k = 10;
};

/// One soft-routing forward per test example; every gap uses the same
/// parameters. Classification reports "accuracy"; ranking adds "hr@K" and
/// "ndcg@K".
MetricsReport evaluate_gaps(const CaseqParams& params, const CaseqConfig& config,
                            const GapSplit& split, const EvalOptions& options);

/// Per-metric drop from the smallest to the largest present gap. Metrics
/// whose first value is zero are omitted.
std::map<std::string, double> drop_percent(const MetricsReport& report);

/// Columns gap,metric,value,n; absent gaps get value "absent"; drop rows
/// carry gap "drop".
void write_report_csv(std::ostream& out, const MetricsReport& report);

/// Rows (sequence, position, path, probability) of the flattened posterior.
void dump_context_probs(const CaseqParams& params, const CaseqConfig& config,
                        std::span<const EventSequence> sequences, std::ostream& out);

/// Rows (layer, unit, d(d+1) floats) of every context embedding.
void dump_context_embeddings(const CaseqParams& params, const CaseqConfig& config,
                             std::ostream& out);

struct TimingRow {
  int batch_size = 0;
  Index paths = 0;
  double seconds = 0.0;
};

/// Wall-clock for soft-routing forward passes over `batch_size` sequences.
std::vector<TimingRow> time_forward(const CaseqParams& params, const CaseqConfig& config,
                                    std::span<const EventSequence> sequences,
                                    std::span<const int> batch_sizes, int repeats = 3);
void write_timing_csv(std::ostream& out, std::span<const TimingRow> rows);

}  // namespace caseq
