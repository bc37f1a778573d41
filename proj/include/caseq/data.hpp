#pragma once

// Event-sequence datasets and the gap-size split protocol.
//
// Event ids are 1-based on disk and in EventSequence. Target positions t are
// 1-based as well: an Example at position t predicts events[t-1] from the
// first t-1 events.

#include "caseq/core.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace caseq {

using EventSequence = std::vector<int>;

struct Dataset {
  std::vector<EventSequence> sequences;
  int num_event_types = 0;  // M
  /// Optional latent context per (sequence, position); 0 where undefined.
  std::vector<std::vector<int>> context_labels;

  void validate() const;
};

struct Example {
  EventSequence prefix;
  int target = 0;
  std::size_t sequence = 0;  // index into Dataset::sequences
  int position = 0;          // t, 1-based
  int gap = -1;              // g for test examples, -1 otherwise
};

struct GapSplit {
  int max_gap = 0;  // G
  std::vector<Example> train;
  std::vector<Example> valid;
  std::vector<Example> test;
};

Dataset parse_dataset(std::istream& in, std::optional<int> num_event_types = std::nullopt);
Dataset parse_dataset(const std::filesystem::path& path,
                      std::optional<int> num_event_types = std::nullopt);
void write_dataset(std::ostream& out, const Dataset& data);
void write_dataset(const std::filesystem::path& path, const Dataset& data);

GapSplit build_splits(const Dataset& data, int max_gap);

/// Test examples whose gap equals g.
std::vector<Example> test_subset(const GapSplit& split, int gap);

/// Last min(|seq|, max_len) events.
EventSequence truncate_prefix(const EventSequence& seq, int max_len);

/// CSV rows (sequence, position, role, gap) for every example of the split.
void write_split_csv(std::ostream& out, const GapSplit& split);

/// A training example group: one forward pass over `events` yields
/// predictions for every position 2..|events|.
struct TrainingWindow {
  EventSequence events;
  std::size_t sequence = 0;
};

/// Groups train examples by sequence into contiguous windows, keeping the
/// most recent `max_len` + 1 events (max_len prefix events + final target).
std::vector<TrainingWindow> training_windows(const GapSplit& split, int max_len);

}  // namespace caseq
