#include "caseq/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <ostream>
#include <thread>
#include <unordered_set>

namespace caseq {

int rank_of_target(const Eigen::Ref<const RowVector>& logits, int target,
                   std::span<const int> candidates) {
  const Index m = logits.size();
  if (target < 1 || target > m) throw RangeError("rank_of_target: target outside vocabulary");
  const double score = logits(target - 1);
  int rank = 1;
  if (candidates.empty()) {
    for (Index i = 0; i < m; ++i)
      if (i != target - 1 && logits(i) >= score) ++rank;
    return rank;
  }
  bool found = false;
  for (int c : candidates) {
    if (c < 1 || c > m) throw RangeError("rank_of_target: candidate outside vocabulary");
    if (c == target) {
      found = true;
      continue;
    }
    if (logits(c - 1) >= score) ++rank;
  }
  if (!found) throw ParameterError("rank_of_target: target absent from candidates");
  return rank;
}

int argmax_event(const Eigen::Ref<const RowVector>& logits) {
  Index best = 0;
  logits.maxCoeff(&best);
  return static_cast<int>(best) + 1;
}

double hr_at_k(std::span<const int> ranks, int k) {
  if (ranks.empty()) throw ParameterError("hr_at_k: empty input");
  double hits = 0.0;
  for (int r : ranks) {
    if (r < 1) throw ParameterError("hr_at_k: ranks must be >= 1");
    if (r <= k) hits += 1.0;
  }
  return hits / static_cast<double>(ranks.size());
}

double ndcg_at_k(std::span<const int> ranks, int k) {
  if (ranks.empty()) throw ParameterError("ndcg_at_k: empty input");
  double total = 0.0;
  for (int r : ranks) {
    if (r < 1) throw ParameterError("ndcg_at_k: ranks must be >= 1");
    if (r <= k) total += 1.0 / std::log2(static_cast<double>(r) + 1.0);
  }
  return total / static_cast<double>(ranks.size());
}

double accuracy(std::span<const int> predictions, std::span<const int> targets) {
  if (predictions.empty()) throw ParameterError("accuracy: empty input");
  if (predictions.size() != targets.size()) throw DimensionError("accuracy: length mismatch");
  double hits = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i)
    if (predictions[i] == targets[i]) hits += 1.0;
  return hits / static_cast<double>(predictions.size());
}

double drop_percent(double first, double last) {
  if (!(first > 0.0)) throw DomainError("drop_percent: baseline value must be positive");
  return 100.0 * (first - last) / first;
}

const GapRow* MetricsReport::find(int gap) const {
  for (const auto& r : rows)
    if (r.gap == gap) return &r;
  return nullptr;
}

namespace {

struct Outcome {
  int gap = 0;
  int rank = 0;
  int prediction = 0;
  int target = 0;
};

std::vector<int> sample_candidates(int target, int m, int negatives, std::uint64_t seed) {
  std::vector<int> cands;
  if (negatives >= m - 1) {
    for (int i = 1; i <= m; ++i) cands.push_back(i);
    return cands;
  }
  Rng rng(seed);
  std::uniform_int_distribution<int> pick(1, m);
  std::unordered_set<int> chosen;
  cands.push_back(target);
  while (static_cast<int>(chosen.size()) < negatives) {
    const int c = pick(rng);
    if (c == target || !chosen.insert(c).second) continue;
    cands.push_back(c);
  }
  return cands;
}

}  // namespace

MetricsReport evaluate_gaps(const CaseqParams& params, const CaseqConfig& config,
                            const GapSplit& split, const EvalOptions& options) {
  if (options.negatives < 0) throw ParameterError("evaluate_gaps: negatives must be >= 0");
  std::vector<int> gaps = options.gaps;
  if (gaps.empty())
    for (int g = 0; g <= split.max_gap; ++g) gaps.push_back(g);
  for (int g : gaps)
    if (g < 0 || g > split.max_gap)
      throw RangeError("evaluate_gaps: gap " + std::to_string(g) + " outside [0, " +
                       std::to_string(split.max_gap) + "]");
  const std::unordered_set<int> wanted(gaps.begin(), gaps.end());

  // Examples of one sequence share a forward pass when the longest prefix
  // fits max_len; causality makes row t-2 of that pass the prediction for t.
  std::map<std::size_t, std::vector<std::size_t>> by_sequence;
  for (std::size_t i = 0; i < split.test.size(); ++i)
    if (wanted.count(split.test[i].gap)) by_sequence[split.test[i].sequence].push_back(i);
  std::vector<std::vector<std::size_t>> groups;
  for (auto& [_, idx] : by_sequence) groups.push_back(std::move(idx));

  std::vector<Outcome> outcomes(split.test.size());
  auto run = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t gi = begin; gi < groups.size(); gi += stride) {
      const auto& idx = groups[gi];
      const Example* longest = &split.test[idx[0]];
      for (std::size_t i : idx)
        if (split.test[i].position > longest->position) longest = &split.test[i];
      std::optional<Prediction> shared;
      if (static_cast<int>(longest->prefix.size()) <= config.max_len)
        shared = predict(params, config, longest->prefix);
      for (std::size_t i : idx) {
        const Example& e = split.test[i];
        RowVector logits;
        if (shared) {
          logits = shared->logits.row(e.position - 2);
        } else {
          const Prediction p = predict(params, config, truncate_prefix(e.prefix, config.max_len));
          logits = p.logits.row(p.logits.rows() - 1);
        }
        Outcome o;
        o.gap = e.gap;
        o.target = e.target;
        o.prediction = argmax_event(logits);
        if (options.task == Task::Ranking) {
          if (options.negatives > 0) {
            const auto cands = sample_candidates(e.target, config.num_event_types,
                                                 options.negatives, derive_seed(options.seed, i));
            o.rank = rank_of_target(logits, e.target, cands);
          } else {
            o.rank = rank_of_target(logits, e.target);
          }
        }
        outcomes[i] = o;
      }
    }
  };
  const int threads = std::max(1, options.threads);
  if (threads == 1) {
    run(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < threads; ++w)
      pool.emplace_back(run, static_cast<std::size_t>(w), static_cast<std::size_t>(threads));
  }

  MetricsReport report;
  report.max_gap = split.max_gap;
  std::vector<int> sorted = gaps;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  const std::string hr_name = "hr@" + std::to_string(options.k);
  const std::string ndcg_name = "ndcg@" + std::to_string(options.k);
  for (int g : sorted) {
    GapRow row;
    row.gap = g;
    std::vector<int> preds, targets, ranks;
    for (const auto& idx : groups)
      for (std::size_t i : idx)
        if (outcomes[i].gap == g) {
          preds.push_back(outcomes[i].prediction);
          targets.push_back(outcomes[i].target);
          ranks.push_back(outcomes[i].rank);
        }
    row.present = !preds.empty();
    if (row.present) {
      row.metrics["accuracy"] = {accuracy(preds, targets), preds.size()};
      if (options.task == Task::Ranking) {
        row.metrics[hr_name] = {hr_at_k(ranks, options.k), ranks.size()};
        row.metrics[ndcg_name] = {ndcg_at_k(ranks, options.k), ranks.size()};
      }
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::map<std::string, double> drop_percent(const MetricsReport& report) {
  std::map<std::string, double> out;
  const GapRow* first = nullptr;
  const GapRow* last = nullptr;
  for (const auto& r : report.rows) {
    if (!r.present) continue;
    if (!first) first = &r;
    last = &r;
  }
  if (!first || first == last) return out;
  for (const auto& [name, v] : first->metrics) {
    auto it = last->metrics.find(name);
    if (it == last->metrics.end() || !(v.value > 0.0)) continue;
    out[name] = drop_percent(v.value, it->second.value);
  }
  return out;
}

void write_report_csv(std::ostream& out, const MetricsReport& report) {
  out << "gap,metric,value,n\n";
  out.precision(10);
  for (const auto& r : report.rows) {
    if (!r.present) {
      out << r.gap << ",all,absent,0\n";
      continue;
    }
    for (const auto& [name, v] : r.metrics) out << r.gap << ',' << name << ',' << v.value << ',' << v.count << '\n';
  }
  for (const auto& [name, d] : drop_percent(report)) out << "drop," << name << ',' << d << ",\n";
}

void dump_context_probs(const CaseqParams& params, const CaseqConfig& config,
                        std::span<const EventSequence> sequences, std::ostream& out) {
  out << "sequence,position,path,probability\n";
  out.precision(17);
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    const Prediction p = predict(params, config, truncate_prefix(sequences[s], config.max_len));
    for (Index t = 0; t < p.posterior.rows(); ++t)
      for (Index i = 0; i < p.posterior.cols(); ++i)
        out << s << ',' << (t + 1) << ',' << i << ',' << p.posterior(t, i) << '\n';
  }
}

void dump_context_embeddings(const CaseqParams& params, const CaseqConfig& config,
                             std::ostream& out) {
  check_params(config, params);
  out << "layer,unit";
  for (int j = 0; j < config.context_dim(); ++j) out << ",w" << j;
  out << '\n';
  out.precision(17);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const Matrix& hc = params.layers[l].context_embedding;
    for (Index k = 0; k < hc.rows(); ++k) {
      out << l << ',' << k;
      for (Index j = 0; j < hc.cols(); ++j) out << ',' << hc(k, j);
      out << '\n';
    }
  }
}

std::vector<TimingRow> time_forward(const CaseqParams& params, const CaseqConfig& config,
                                    std::span<const EventSequence> sequences,
                                    std::span<const int> batch_sizes, int repeats) {
  if (sequences.empty()) throw ParameterError("time_forward: no sequences");
  std::vector<TimingRow> rows;
  for (int b : batch_sizes) {
    if (b < 1) throw ParameterError("time_forward: batch sizes must be >= 1");
    double best = std::numeric_limits<double>::infinity();
    for (int r = 0; r < std::max(1, repeats); ++r) {
      const auto start = std::chrono::steady_clock::now();
      for (int i = 0; i < b; ++i) {
        const auto& s = sequences[static_cast<std::size_t>(i) % sequences.size()];
        (void)predict(params, config, truncate_prefix(s, config.max_len));
      }
      best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    }
    rows.push_back({b, config.num_paths(), best});
  }
  return rows;
}

void write_timing_csv(std::ostream& out, std::span<const TimingRow> rows) {
  out << "batch_size,paths,seconds\n";
  out.precision(10);
  for (const auto& r : rows) out << r.batch_size << ',' << r.paths << ',' << r.seconds << '\n';
}

}  // namespace caseq
