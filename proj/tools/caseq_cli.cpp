// caseq: simulate, split, train, eval, verify and dump.

#include "caseq/checkpoint.hpp"
#include "caseq/eval.hpp"
#include "caseq/scm.hpp"
#include "caseq/train.hpp"
#include "caseq/verify.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace caseq;

namespace {

constexpr const char* kVersion = "0.1.0";

enum Exit { kOk = 0, kIo = 1, kUsage = 2, kNumeric = 3 };

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Writes to a sibling temp file and renames it into place.
void write_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << content;
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

template <typename F>
void write_with(const fs::path& path, F&& body) {
  std::ostringstream os;
  body(os);
  write_atomic(path, os.str());
}

struct Manifest {
  std::string command;
  json config = json::object();
  json seeds = json::object();
  json inputs = json::object();
  json outputs = json::object();
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void write(const fs::path& artifact) const {
    json j;
    j["command"] = command;
    j["tool_version"] = kVersion;
    j["checkpoint_format"] = kCheckpointVersion;
    j["config"] = config;
    j["seeds"] = seeds;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["wall_clock_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_atomic(artifact.string() + ".manifest.json", j.dump(2) + "\n");
  }
};

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size()) throw ConfigError("not an integer list: '" + text + "'");
    out.push_back(v);
  }
  return out;
}

int resolve_threads(int flag) {
  if (flag > 0) return flag;
  if (const char* env = std::getenv("CASEQ_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"caseq: causally-adjusted sequential event prediction"};
  app.require_subcommand(1);
  int threads_flag = 0;
  app.add_option("--threads", threads_flag, "Worker threads (default: CASEQ_THREADS or 1)")
      ->check(CLI::NonNegativeNumber);
  app.set_version_flag("--version",
                       std::string("caseq ") + kVersion + " (checkpoint format " +
                           std::to_string(kCheckpointVersion) + ")");

  // simulate
  auto* sim = app.add_subcommand("simulate", "Sample a dataset from a structural causal model spec");
  std::string sim_spec, sim_out, sim_labels;
  std::size_t sim_n = 0;
  std::uint64_t sim_seed = 0;
  sim->add_option("--spec", sim_spec, "Spec JSON")->required();
  sim->add_option("--n", sim_n, "Number of sequences")->required();
  sim->add_option("--seed", sim_seed, "Seed");
  sim->add_option("--out", sim_out, "Dataset output")->required();
  sim->add_option("--labels", sim_labels, "Optional context label CSV");

  // split
  auto* spl = app.add_subcommand("split", "Write the gap split index sets as CSV");
  std::string spl_data, spl_out;
  int spl_gap = 0;
  spl->add_option("--data", spl_data)->required();
  spl->add_option("--gap-max", spl_gap)->required()->check(CLI::NonNegativeNumber);
  spl->add_option("--out", spl_out)->required();

  // train
  auto* trn = app.add_subcommand("train", "Train CaseQ or an MLE baseline");
  std::string trn_data, trn_config, trn_out, trn_log, trn_baseline;
  int trn_gap = 0;
  std::optional<std::uint64_t> trn_seed;
  trn->add_option("--data", trn_data)->required();
  trn->add_option("--config", trn_config, "Run config JSON {model, train}")->required();
  trn->add_option("--gap-max", trn_gap)->required()->check(CLI::NonNegativeNumber);
  trn->add_option("--seed", trn_seed, "Overrides train.seed");
  trn->add_option("--out", trn_out, "Checkpoint output")->required();
  trn->add_option("--log", trn_log, "History CSV")->required();
  trn->add_option("--baseline", trn_baseline, "none|single|ensemble|gated (overrides model.baseline)")
      ->check(CLI::IsMember({"none", "single", "ensemble", "gated"}));

  // eval
  auto* evl = app.add_subcommand("eval", "Gap-wise evaluation of a checkpoint");
  std::string evl_model, evl_data, evl_gaps, evl_metric, evl_out;
  int evl_gap = 0;
  std::optional<int> evl_negatives;
  std::uint64_t evl_seed = 0;
  evl->add_option("--model", evl_model)->required();
  evl->add_option("--data", evl_data)->required();
  evl->add_option("--gap-max", evl_gap)->required()->check(CLI::NonNegativeNumber);
  evl->add_option("--gaps", evl_gaps, "Comma-separated gap sizes (default: all)");
  evl->add_option("--metric", evl_metric)->required()->check(CLI::IsMember({"acc", "hr", "ndcg"}));
  evl->add_option("--negatives", evl_negatives, "Sampled negatives for hr/ndcg (default 100; 0 = full ranking)")
      ->check(CLI::NonNegativeNumber);
  evl->add_option("--seed", evl_seed, "Negative sampling seed");
  evl->add_option("--out", evl_out)->required();

  // verify
  auto* ver = app.add_subcommand("verify", "Run oracle self-checks");
  std::string ver_suite = "all";
  ver->add_option("--suite", ver_suite)->check(CLI::IsMember(suite_names()));

  // dump
  auto* dmp = app.add_subcommand("dump", "Diagnostic CSV dumps");
  std::string dmp_model, dmp_data, dmp_what, dmp_out, dmp_batches = "1,8,32,128";
  dmp->add_option("--model", dmp_model)->required();
  dmp->add_option("--data", dmp_data);
  dmp->add_option("--what", dmp_what)->required()->check(CLI::IsMember({"contexts", "embeddings", "timing"}));
  dmp->add_option("--out", dmp_out)->required();
  dmp->add_option("--batch-sizes", dmp_batches, "Batch sizes for timing");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  const int threads = resolve_threads(threads_flag);
  try {
    Manifest man;
    if (*sim) {
      man.command = "simulate";
      const scm::ScmSpec spec = scm::load_spec(sim_spec);
      const Dataset data = scm::sample_dataset(spec, sim_n, sim_seed);
      write_with(sim_out, [&](std::ostream& os) { write_dataset(os, data); });
      if (!sim_labels.empty()) {
        write_with(sim_labels, [&](std::ostream& os) { scm::write_context_labels(os, data); });
        man.outputs["labels"] = sim_labels;
      }
      man.config = json::parse(scm::spec_to_json(spec));
      man.config["n"] = sim_n;
      man.seeds["simulate"] = sim_seed;
      man.inputs["spec"] = sim_spec;
      man.outputs["data"] = sim_out;
      man.write(sim_out);
    } else if (*spl) {
      man.command = "split";
      const Dataset data = parse_dataset(fs::path(spl_data));
      const GapSplit split = build_splits(data, spl_gap);
      write_with(spl_out, [&](std::ostream& os) { write_split_csv(os, split); });
      man.config["gap_max"] = spl_gap;
      man.inputs["data"] = spl_data;
      man.outputs["split"] = spl_out;
      man.write(spl_out);
    } else if (*trn) {
      man.command = "train";
      json cfg;
      try {
        cfg = json::parse(read_text(trn_config));
      } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
      }
      const bool has_m = cfg.contains("model") && cfg["model"].contains("M");
      const Dataset data = has_m ? parse_dataset(fs::path(trn_data), cfg["model"]["M"].get<int>())
                                 : parse_dataset(fs::path(trn_data));
      if (!has_m) cfg["model"]["M"] = data.num_event_types;
      if (!trn_baseline.empty()) cfg["model"]["baseline"] = trn_baseline;
      if (trn_seed) cfg["train"]["seed"] = *trn_seed;
      RunConfig rc = run_config_from_json(cfg.dump());
      const GapSplit split = build_splits(data, trn_gap);
      TrainResult result;
      try {
        result = train(data, split, rc.model, rc.train);
      } catch (const TrainingDiverged& e) {
        std::cerr << "caseq: " << e.what() << "; last good parameters written to "
                  << trn_out << ".diverged\n";
        write_with(trn_out + ".diverged",
                   [&](std::ostream& os) { save_checkpoint(os, rc.model, e.last_good); });
        return kNumeric;
      }
      write_with(trn_out, [&](std::ostream& os) { save_checkpoint(os, rc.model, result.params); });
      write_with(trn_log, [&](std::ostream& os) { write_history_csv(os, result.history); });
      man.config = json::parse(run_config_to_json(rc));
      man.config["gap_max"] = trn_gap;
      man.config["best_epoch"] = result.history.best_epoch;
      man.seeds["train"] = rc.train.seed;
      man.inputs = {{"data", trn_data}, {"config", trn_config}};
      man.outputs = {{"checkpoint", trn_out}, {"log", trn_log}};
      man.write(trn_out);
    } else if (*evl) {
      man.command = "eval";
      const Checkpoint ck = load_checkpoint(fs::path(evl_model));
      const Dataset data = parse_dataset(fs::path(evl_data), ck.config.num_event_types);
      const GapSplit split = build_splits(data, evl_gap);
      EvalOptions opt;
      opt.task = evl_metric == "acc" ? Task::Classification : Task::Ranking;
      opt.negatives = opt.task == Task::Ranking ? evl_negatives.value_or(100) : 0;
      opt.seed = evl_seed;
      opt.gaps = parse_int_list(evl_gaps);
      opt.threads = threads;
      MetricsReport report = evaluate_gaps(ck.params, ck.config, split, opt);
      const std::string keep = evl_metric == "acc" ? "accuracy" : evl_metric + "@" + std::to_string(opt.k);
      for (auto& row : report.rows)
        std::erase_if(row.metrics, [&keep](const auto& kv) { return kv.first != keep; });
      write_with(evl_out, [&](std::ostream& os) { write_report_csv(os, report); });
      man.config = {{"gap_max", evl_gap}, {"metric", evl_metric}, {"negatives", opt.negatives},
                    {"gaps", opt.gaps}, {"threads", threads}};
      man.seeds["negatives"] = evl_seed;
      man.inputs = {{"model", evl_model}, {"data", evl_data}};
      man.outputs["report"] = evl_out;
      man.write(evl_out);
    } else if (*ver) {
      bool ok = true;
      for (const CheckResult& r : run_suite(ver_suite)) {
        std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.details << '\n';
        ok = ok && r.passed;
      }
      return ok ? kOk : kNumeric;
    } else if (*dmp) {
      man.command = "dump";
      const Checkpoint ck = load_checkpoint(fs::path(dmp_model));
      auto sequences = [&] {
        if (dmp_data.empty()) throw ConfigError("--data is required for --what " + dmp_what);
        return parse_dataset(fs::path(dmp_data), ck.config.num_event_types).sequences;
      };
      if (dmp_what == "contexts") {
        const auto seqs = sequences();
        write_with(dmp_out, [&](std::ostream& os) { dump_context_probs(ck.params, ck.config, seqs, os); });
      } else if (dmp_what == "embeddings") {
        write_with(dmp_out, [&](std::ostream& os) { dump_context_embeddings(ck.params, ck.config, os); });
      } else {
        const auto seqs = sequences();
        const std::vector<int> sizes = parse_int_list(dmp_batches);
        const auto rows = time_forward(ck.params, ck.config, seqs, sizes);
        write_with(dmp_out, [&](std::ostream& os) { write_timing_csv(os, rows); });
      }
      man.config["what"] = dmp_what;
      man.inputs = {{"model", dmp_model}, {"data", dmp_data}};
      man.outputs["dump"] = dmp_out;
      man.write(dmp_out);
    }
  } catch (const IoError& e) {
    std::cerr << "caseq: " << e.what() << '\n';
    return kIo;
  } catch (const NumericError& e) {
    std::cerr << "caseq: " << e.what() << '\n';
    return kNumeric;
  } catch (const Error& e) {
    std::cerr << "caseq: " << e.what() << '\n';
    return kUsage;
  } catch (const json::exception& e) {
    std::cerr << "caseq: config: " << e.what() << '\n';
    return kUsage;
  }
  return kOk;
}
