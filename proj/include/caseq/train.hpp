#pragma once

#include "caseq/objective.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace caseq {

enum class ValidMetric { Accuracy, Ndcg };

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int batch_size = 128;  // windows (sequences) per step
  int epochs = 10;
  std::uint64_t seed = 0;
  double alpha = 0.1;
  int pseudo_count = 16;  // R
  int patience = 0;       // epochs without validation improvement; 0 disables
  ValidMetric valid_metric = ValidMetric::Accuracy;

  void validate() const;
};

/// Reads {"model": {...}, "train": {...}} from one JSON document. Missing
/// keys keep their defaults.
struct RunConfig {
  CaseqConfig model;
  TrainConfig train;
};
RunConfig run_config_from_json(const std::string& text);
std::string run_config_to_json(const RunConfig& config);

/// Xavier-uniform weights in +-sqrt(6 / (rows + cols)), zero biases.
CaseqParams init_params(const CaseqConfig& config, std::uint64_t seed);

struct AdamState {
  std::vector<Matrix> first;
  std::vector<Matrix> second;
};

AdamState adam_init(const CaseqParams& params);

/// Bias-corrected Adam update at step t >= 1. Throws NumericError (leaving
/// params and state untouched) on a non-finite gradient.
void adam_step(CaseqParams& params, const std::vector<Matrix>& grads, AdamState& state, long t,
               const TrainConfig& config);

struct EpochRecord {
  int epoch = 0;
  LossBreakdown loss;  // position-weighted mean over the epoch
  double valid_metric = 0.0;
  double seconds = 0.0;
};

struct StepRecord {
  int epoch = 0;
  long step = 0;
  LossBreakdown loss;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;  // 0 = initial parameters
};

struct TrainResult {
  CaseqParams params;  // best validation epoch
  TrainHistory history;
};

struct TrainingDiverged : NumericError {
  TrainingDiverged(const std::string& what, CaseqParams last_good, int epoch)
      : NumericError(what), last_good(std::move(last_good)), epoch(epoch) {}
  CaseqParams last_good;
  int epoch;
};

using StepCallback = std::function<void(const StepRecord&)>;

TrainResult train(const Dataset& data, const GapSplit& split, const CaseqConfig& model,
                  const TrainConfig& config, const StepCallback& on_step = {});

/// Validation metric of params on split.valid (soft routing). Empty
/// validation set yields nullopt.
std::optional<double> validation_metric(const CaseqParams& params, const CaseqConfig& model,
                                        const GapSplit& split, ValidMetric metric);

void write_history_csv(std::ostream& out, const TrainHistory& history);

}  // namespace caseq
