#include "caseq/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace caseq {

void Dataset::validate() const {
  if (num_event_types < 2) throw ConfigError("dataset: need at least 2 event types");
  for (const auto& s : sequences) {
    if (s.empty()) throw ParseError("dataset: empty sequence");
    for (int id : s)
      if (id < 1 || id > num_event_types)
        throw RangeError("dataset: event id " + std::to_string(id) + " outside [1, " +
                         std::to_string(num_event_types) + "]");
  }
}

Dataset parse_dataset(std::istream& in, std::optional<int> num_event_types) {
  Dataset data;
  std::string line;
  int line_no = 0;
  int max_id = 0;
  std::size_t dropped = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream tokens(line);
    std::string tok;
    EventSequence seq;
    while (tokens >> tok) {
      int id = 0;
      const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), id);
      if (ec != std::errc() || ptr != tok.data() + tok.size())
        throw ParseError("line " + std::to_string(line_no) + ": non-integer token '" + tok + "'");
      if (id < 1)
        throw ParseError("line " + std::to_string(line_no) + ": event id " + std::to_string(id) +
                         " < 1");
      if (num_event_types && id > *num_event_types)
        throw ParseError("line " + std::to_string(line_no) + ": event id " + std::to_string(id) +
                         " exceeds M=" + std::to_string(*num_event_types));
      max_id = std::max(max_id, id);
      seq.push_back(id);
    }
    if (seq.empty()) continue;
    if (seq.size() < 2) {
      ++dropped;
      continue;
    }
    data.sequences.push_back(std::move(seq));
  }
  if (dropped > 0)
    std::cerr << "warning: dropped " << dropped << " single-event sequence(s)\n";
  if (data.sequences.empty()) throw ParseError("no sequences");
  data.num_event_types = num_event_types.value_or(max_id);
  if (data.num_event_types < 2) data.num_event_types = 2;
  return data;
}

Dataset parse_dataset(const std::filesystem::path& path, std::optional<int> num_event_types) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read dataset " + path.string());
  return parse_dataset(in, num_event_types);
}

void write_dataset(std::ostream& out, const Dataset& data) {
  for (const auto& s : data.sequences) {
    for (std::size_t i = 0; i < s.size(); ++i) out << (i ? " " : "") << s[i];
    out << '\n';
  }
}

void write_dataset(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write dataset " + path.string());
  write_dataset(out, data);
}

namespace {

Example make_example(const EventSequence& s, std::size_t seq_index, int t, int gap) {
  Example e;
  e.prefix.assign(s.begin(), s.begin() + (t - 1));
  e.target = s[static_cast<std::size_t>(t - 1)];
  e.sequence = seq_index;
  e.position = t;
  e.gap = gap;
  return e;
}

}  // namespace

GapSplit build_splits(const Dataset& data, int max_gap) {
  if (max_gap < 0) throw ParameterError("build_splits: G must be non-negative");
  GapSplit split;
  split.max_gap = max_gap;
  for (std::size_t i = 0; i < data.sequences.size(); ++i) {
    const auto& s = data.sequences[i];
    const int len = static_cast<int>(s.size());
    if (len <= max_gap + 3) {
      for (int t = 2; t <= len; ++t) split.train.push_back(make_example(s, i, t, -1));
      continue;
    }
    for (int t = 2; t <= len - max_gap - 2; ++t) split.train.push_back(make_example(s, i, t, -1));
    split.valid.push_back(make_example(s, i, len - max_gap - 1, -1));
    for (int t = len - max_gap; t <= len; ++t)
      split.test.push_back(make_example(s, i, t, t - (len - max_gap)));
  }
  return split;
}

std::vector<Example> test_subset(const GapSplit& split, int gap) {
  if (gap < 0 || gap > split.max_gap)
    throw RangeError("test_subset: gap " + std::to_string(gap) + " outside [0, " +
                     std::to_string(split.max_gap) + "]");
  std::vector<Example> out;
  for (const auto& e : split.test)
    if (e.gap == gap) out.push_back(e);
  return out;
}

EventSequence truncate_prefix(const EventSequence& seq, int max_len) {
  if (max_len < 1) throw ParameterError("truncate_prefix: max_len must be >= 1");
  const std::size_t keep = std::min(seq.size(), static_cast<std::size_t>(max_len));
  return EventSequence(seq.end() - static_cast<std::ptrdiff_t>(keep), seq.end());
}

void write_split_csv(std::ostream& out, const GapSplit& split) {
  out << "sequence,position,role,gap\n";
  auto rows = [&out](const std::vector<Example>& xs, const char* role) {
    for (const auto& e : xs) {
      out << e.sequence << ',' << e.position << ',' << role << ',';
      if (e.gap >= 0) out << e.gap;
      out << '\n';
    }
  };
  rows(split.train, "train");
  rows(split.valid, "valid");
  rows(split.test, "test");
}

std::vector<TrainingWindow> training_windows(const GapSplit& split, int max_len) {
  if (max_len < 1) throw ParameterError("training_windows: max_len must be >= 1");
  // Train targets of one sequence are contiguous from t = 2, so the example
  // with the largest t carries the whole window.
  std::map<std::size_t, const Example*> last;
  for (const auto& e : split.train) {
    auto [it, inserted] = last.emplace(e.sequence, &e);
    if (!inserted && e.position > it->second->position) it->second = &e;
  }
  std::vector<TrainingWindow> windows;
  windows.reserve(last.size());
  for (const auto& [seq, e] : last) {
    EventSequence full = e->prefix;
    full.push_back(e->target);
    windows.push_back({truncate_prefix(full, max_len + 1), seq});
  }
  return windows;
}

}  // namespace caseq
