#include "caseq/train.hpp"

#include "caseq/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>

namespace caseq {

using json = nlohmann::json;

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("lr: must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1: must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2: must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("eps: must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size: must be >= 1");
  if (epochs < 0) throw ConfigError("epochs: must be >= 0");
  if (!(alpha >= 0.0)) throw ConfigError("alpha: must be >= 0");
  if (pseudo_count < 1) throw ConfigError("R: must be >= 1");
  if (patience < 0) throw ConfigError("patience: must be >= 0");
}

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig rc;
  if (j.contains("model")) rc.model = config_from_json(j["model"].dump());
  if (j.contains("train")) {
    const json& t = j["train"];
    auto get = [&t](const char* key, auto& field) {
      if (!t.contains(key)) return;
      try {
        field = t.at(key).get<std::decay_t<decltype(field)>>();
      } catch (const json::exception&) {
        throw ConfigError(std::string("train.") + key + ": wrong type");
      }
    };
    get("lr", rc.train.learning_rate);
    get("beta1", rc.train.beta1);
    get("beta2", rc.train.beta2);
    get("eps", rc.train.epsilon);
    get("batch_size", rc.train.batch_size);
    get("epochs", rc.train.epochs);
    get("seed", rc.train.seed);
    get("alpha", rc.train.alpha);
    get("R", rc.train.pseudo_count);
    get("patience", rc.train.patience);
    if (t.contains("valid_metric")) {
      const std::string m = t["valid_metric"].get<std::string>();
      if (m == "acc" || m == "accuracy") rc.train.valid_metric = ValidMetric::Accuracy;
      else if (m == "ndcg") rc.train.valid_metric = ValidMetric::Ndcg;
      else throw ConfigError("train.valid_metric: expected acc|ndcg");
    }
    for (const auto& [key, _] : t.items()) {
      static const std::vector<std::string> known = {"lr", "beta1", "beta2", "eps", "batch_size",
                                                     "epochs", "seed", "alpha", "R", "patience",
                                                     "valid_metric"};
      if (std::find(known.begin(), known.end(), key) == known.end())
        throw ConfigError("train: unknown key '" + key + "'");
    }
  }
  rc.model.validate();
  rc.train.validate();
  return rc;
}

std::string run_config_to_json(const RunConfig& rc) {
  json j;
  j["model"] = json::parse(config_to_json(rc.model));
  const TrainConfig& t = rc.train;
  j["train"] = {{"lr", t.learning_rate}, {"beta1", t.beta1},       {"beta2", t.beta2},
                {"eps", t.epsilon},      {"batch_size", t.batch_size}, {"epochs", t.epochs},
                {"seed", t.seed},        {"alpha", t.alpha},       {"R", t.pseudo_count},
                {"patience", t.patience},
                {"valid_metric", t.valid_metric == ValidMetric::Accuracy ? "acc" : "ndcg"}};
  return j.dump(2);
}

CaseqParams init_params(const CaseqConfig& config, std::uint64_t seed) {
  CaseqParams params = zero_params(config);
  Rng rng(seed);
  const std::size_t per_unit = unit_tensor_names(config.backbone).size();
  std::size_t unit_slot = 0;
  params.visit([&](const std::string& name, Matrix& m) {
    const bool in_unit = name.find(".unit") != std::string::npos;
    if (in_unit) {
      const std::size_t idx = unit_slot++ % per_unit;
      if (is_bias(config.backbone, idx)) return;
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  });
  return params;
}

AdamState adam_init(const CaseqParams& params) {
  AdamState s;
  params.visit([&s](const std::string&, const Matrix& m) {
    s.first.push_back(Matrix::Zero(m.rows(), m.cols()));
    s.second.push_back(Matrix::Zero(m.rows(), m.cols()));
  });
  return s;
}

void adam_step(CaseqParams& params, const std::vector<Matrix>& grads, AdamState& state, long t,
               const TrainConfig& config) {
  if (t < 1) throw ParameterError("adam_step: step index must be >= 1");
  if (grads.size() != state.first.size())
    throw DimensionError("adam_step: gradient count does not match parameters");
  for (const Matrix& g : grads)
    if (!g.allFinite()) throw NumericError("adam_step: non-finite gradient, step aborted");
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
  std::size_t i = 0;
  params.visit([&](const std::string& name, Matrix& p) {
    const Matrix& g = grads[i];
    if (g.rows() != p.rows() || g.cols() != p.cols())
      throw DimensionError("adam_step: gradient shape mismatch for " + name);
    Matrix& m = state.first[i];
    Matrix& v = state.second[i];
    m = config.beta1 * m + (1.0 - config.beta1) * g;
    v = config.beta2 * v + (1.0 - config.beta2) * g.cwiseProduct(g);
    p.array() -= config.learning_rate * (m.array() / c1) /
                 ((v.array() / c2).sqrt() + config.epsilon);
    ++i;
  });
}

std::optional<double> validation_metric(const CaseqParams& params, const CaseqConfig& model,
                                        const GapSplit& split, ValidMetric metric) {
  if (split.valid.empty()) return std::nullopt;
  std::vector<int> ranks;
  std::vector<int> preds, targets;
  for (const auto& e : split.valid) {
    const EventSequence prefix = truncate_prefix(e.prefix, model.max_len);
    const Prediction p = predict(params, model, prefix);
    const RowVector last = p.logits.row(p.logits.rows() - 1);
    if (metric == ValidMetric::Accuracy) {
      preds.push_back(argmax_event(last));
      targets.push_back(e.target);
    } else {
      ranks.push_back(rank_of_target(last, e.target));
    }
  }
  return metric == ValidMetric::Accuracy ? accuracy(preds, targets) : ndcg_at_k(ranks, 10);
}

namespace {

bool finite_loss(const LossBreakdown& b) { return std::isfinite(b.total); }

}  // namespace

TrainResult train(const Dataset& data, const GapSplit& split, const CaseqConfig& model,
                  const TrainConfig& config, const StepCallback& on_step) {
  model.validate();
  config.validate();
  if (model.num_event_types != data.num_event_types)
    throw ConfigError("train: model M=" + std::to_string(model.num_event_types) +
                      " but dataset M=" + std::to_string(data.num_event_types));
  if (split.train.empty()) throw ParameterError("train: empty training split");

  const std::vector<TrainingWindow> windows = training_windows(split, model.max_len);
  const PseudoLengths pseudo_lengths = default_pseudo_lengths(windows, model.max_len);
  const bool variational = model.baseline == BaselineMode::None;

  TrainResult result;
  result.params = init_params(model, config.seed);
  CaseqParams params = result.params;
  AdamState adam = adam_init(params);
  double best = validation_metric(params, model, split, config.valid_metric).value_or(-1.0);
  int since_best = 0;
  long step = 0;

  std::vector<std::size_t> order(windows.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    const std::vector<EventSequence> pseudo =
        variational ? sample_pseudo_sequences(config.pseudo_count, model.num_event_types,
                                              pseudo_lengths, rng)
                    : std::vector<EventSequence>{};

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss.alpha = variational ? config.alpha : 0.0;
    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(config.batch_size));
      std::vector<TrainingWindow> batch;
      batch.reserve(end - begin);
      for (std::size_t i = begin; i < end; ++i) batch.push_back(windows[order[i]]);

      ad::Tape tape;
      const BoundParams bound = bind(tape, params);
      LossResult loss;
      if (variational) {
        const PriorEstimate prior = prior_estimate(tape, bound, model, pseudo, epoch);
        loss = caseq_loss(tape, bound, model, batch, config.alpha, prior, rng);
      } else {
        loss = mle_loss(tape, bound, model, batch);
      }
      if (!finite_loss(loss.breakdown))
        throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) +
                                   " (non-finite loss)",
                               result.params, epoch);
      tape.backward(loss.total);
      std::vector<Matrix> grads;
      for (const ad::Tensor& t : flatten(bound)) grads.push_back(t.grad());
      try {
        adam_step(params, grads, adam, ++step, config);
      } catch (const NumericError& e) {
        throw TrainingDiverged(e.what(), result.params, epoch);
      }

      const double w = static_cast<double>(loss.breakdown.positions);
      rec.loss.total += w * loss.breakdown.total;
      rec.loss.prediction += w * loss.breakdown.prediction;
      rec.loss.kl += w * loss.breakdown.kl;
      rec.loss.positions += loss.breakdown.positions;
      rec.loss.prior_floor_hit = rec.loss.prior_floor_hit || loss.breakdown.prior_floor_hit;
      if (on_step) on_step({epoch, step, loss.breakdown});
    }
    if (rec.loss.positions > 0) {
      const double inv = 1.0 / static_cast<double>(rec.loss.positions);
      rec.loss.total *= inv;
      rec.loss.prediction *= inv;
      rec.loss.kl *= inv;
    }

    const std::optional<double> metric = validation_metric(params, model, split, config.valid_metric);
    rec.valid_metric = metric.value_or(0.0);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.history.epochs.push_back(rec);

    // Without a validation set the latest epoch is retained.
    if (!metric || *metric > best) {
      best = metric.value_or(best);
      result.params = params;
      result.history.best_epoch = epoch;
      since_best = 0;
    } else if (config.patience > 0 && ++since_best >= config.patience) {
      break;
    }
  }
  return result;
}

void write_history_csv(std::ostream& out, const TrainHistory& history) {
  out << "epoch,total,prediction,kl,alpha,valid_metric,seconds\n";
  out.precision(10);
  for (const auto& e : history.epochs)
    out << e.epoch << ',' << e.loss.total << ',' << e.loss.prediction << ',' << e.loss.kl << ','
        << e.loss.alpha << ',' << e.valid_metric << ',' << e.seconds << '\n';
}

}  // namespace caseq
