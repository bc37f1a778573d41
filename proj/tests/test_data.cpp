#include "caseq/data.hpp"

#include <gtest/gtest.h>

#include <numeric>
#include <random>
#include <set>
#include <sstream>

using namespace caseq;

namespace {

Dataset parse(const std::string& text, std::optional<int> m = std::nullopt) {
  std::istringstream in(text);
  return parse_dataset(in, m);
}

Dataset single(int length) {
  Dataset d;
  d.num_event_types = 5;
  EventSequence s(static_cast<std::size_t>(length));
  for (int i = 0; i < length; ++i) s[static_cast<std::size_t>(i)] = 1 + i % 5;
  d.sequences.push_back(s);
  return d;
}

std::vector<int> positions(const std::vector<Example>& ex) {
  std::vector<int> out;
  for (const auto& e : ex) out.push_back(e.position);
  return out;
}

std::vector<int> range(int lo, int hi) {
  std::vector<int> out;
  for (int t = lo; t <= hi; ++t) out.push_back(t);
  return out;
}

}  // namespace

TEST(ParseDataset, DirectParse) {
  const Dataset d = parse("1 2 3\n2 2\n");
  ASSERT_EQ(d.sequences.size(), 2u);
  EXPECT_EQ(d.num_event_types, 3);
  EXPECT_EQ(d.sequences[0], (EventSequence{1, 2, 3}));
  EXPECT_EQ(d.sequences[1], (EventSequence{2, 2}));
}

TEST(ParseDataset, MalformedTokenCitesLine) {
  try {
    parse("1 2\n3 x 4\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
}

TEST(ParseDataset, EmptyInput) {
  try {
    parse("");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("no sequences"), std::string::npos);
  }
}

TEST(ParseDataset, RejectsZeroAndOutOfVocabulary) {
  EXPECT_THROW(parse("1 0 2\n"), ParseError);
  EXPECT_THROW(parse("1 4 2\n", 3), ParseError);
  EXPECT_NO_THROW(parse("1 3 2\n", 3));
}

TEST(ParseDataset, DropsSingleEventSequencesAndBlankLines) {
  const Dataset d = parse("4\n\n1 2\n");
  ASSERT_EQ(d.sequences.size(), 1u);
  EXPECT_EQ(d.sequences[0], (EventSequence{1, 2}));
}

TEST(ParseDataset, RoundTripsThroughWrite) {
  const Dataset d = parse("3 1 2 5\n2 2 2\n");
  std::ostringstream out;
  write_dataset(out, d);
  EXPECT_EQ(out.str(), "3 1 2 5\n2 2 2\n");
}

TEST(BuildSplits, LeaveOneOutAtGapZero) {
  const GapSplit s = build_splits(single(10), 0);
  EXPECT_EQ(positions(s.train), range(2, 8));
  EXPECT_EQ(positions(s.valid), std::vector<int>{9});
  EXPECT_EQ(positions(s.test), std::vector<int>{10});
  EXPECT_EQ(s.test[0].gap, 0);
}

TEST(BuildSplits, GapThree) {
  const GapSplit s = build_splits(single(10), 3);
  EXPECT_EQ(positions(s.train), range(2, 5));
  EXPECT_EQ(positions(s.valid), std::vector<int>{6});
  EXPECT_EQ(positions(s.test), range(7, 10));
  for (std::size_t i = 0; i < s.test.size(); ++i) EXPECT_EQ(s.test[i].gap, static_cast<int>(i));
}

TEST(BuildSplits, ShortSequenceGoesToTraining) {
  const GapSplit s = build_splits(single(5), 3);
  EXPECT_EQ(positions(s.train), range(2, 5));
  EXPECT_TRUE(s.valid.empty());
  EXPECT_TRUE(s.test.empty());
}

TEST(BuildSplits, ExamplesCarryPrefixAndTarget) {
  const Dataset d = parse("4 1 3 2 5 2 1\n");
  const GapSplit s = build_splits(d, 1);
  for (const auto* part : {&s.train, &s.valid, &s.test})
    for (const Example& e : *part) {
      EXPECT_EQ(static_cast<int>(e.prefix.size()), e.position - 1);
      EXPECT_EQ(e.target, d.sequences[0][static_cast<std::size_t>(e.position - 1)]);
    }
}

TEST(BuildSplits, NegativeGapRejected) { EXPECT_THROW(build_splits(single(6), -1), ParameterError); }

TEST(BuildSplits, PartitionPropertyOnRandomDatasets) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Dataset d;
    d.num_event_types = 4;
    const int n = 1 + static_cast<int>(rng() % 6);
    for (int i = 0; i < n; ++i) d.sequences.push_back(EventSequence(2 + rng() % 15, 1));
    const int g = static_cast<int>(rng() % 6);
    const GapSplit s = build_splits(d, g);
    for (std::size_t i = 0; i < d.sequences.size(); ++i) {
      std::multiset<int> seen;
      for (const auto* part : {&s.train, &s.valid, &s.test})
        for (const Example& e : *part)
          if (e.sequence == i) seen.insert(e.position);
      const int len = static_cast<int>(d.sequences[i].size());
      // Every target position 2..|S| appears exactly once across the split,
      // except the validation position which is never trained on.
      EXPECT_EQ(seen.size(), static_cast<std::size_t>(len - 1));
      for (int t = 2; t <= len; ++t) EXPECT_EQ(seen.count(t), 1u);
    }
  }
}

TEST(TestSubset, SelectsGapAndChecksRange) {
  Dataset d = single(10);
  d.sequences.push_back(EventSequence{1, 2, 3, 4, 5, 1, 2, 3, 4, 5, 1, 2});
  const GapSplit s = build_splits(d, 3);
  const auto g0 = test_subset(s, 0);
  ASSERT_EQ(g0.size(), 2u);
  EXPECT_EQ(g0[0].position, 7);
  EXPECT_EQ(g0[1].position, 9);
  const auto gG = test_subset(s, 3);
  EXPECT_EQ(gG[0].position, 10);
  EXPECT_EQ(gG[1].position, 12);
  EXPECT_THROW(test_subset(s, 4), RangeError);
  EXPECT_THROW(test_subset(s, -1), RangeError);
}

TEST(TruncatePrefix, KeepsMostRecentEvents) {
  EventSequence s(150);
  std::iota(s.begin(), s.end(), 1);
  const EventSequence t = truncate_prefix(s, 100);
  ASSERT_EQ(t.size(), 100u);
  EXPECT_EQ(t.front(), 51);
  EXPECT_EQ(t.back(), 150);
  EXPECT_EQ(truncate_prefix({1, 2, 3}, 100), (EventSequence{1, 2, 3}));
  EXPECT_EQ(truncate_prefix({1, 2, 3}, 1), (EventSequence{3}));
  EXPECT_THROW(truncate_prefix({1}, 0), ParameterError);
}

TEST(TrainingWindows, CoverTrainPositionsAndTruncate) {
  const GapSplit s = build_splits(single(12), 2);
  const auto w = training_windows(s, 100);
  ASSERT_EQ(w.size(), 1u);
  // Train positions 2..8 need events 1..8.
  EXPECT_EQ(w[0].events.size(), 8u);
  const auto short_w = training_windows(s, 3);
  EXPECT_EQ(short_w[0].events.size(), 4u);
  EXPECT_EQ(short_w[0].events.back(), single(12).sequences[0][7]);
}

TEST(WriteSplitCsv, HeaderAndRoles) {
  std::ostringstream out;
  write_split_csv(out, build_splits(single(6), 1));
  const std::string csv = out.str();
  EXPECT_EQ(csv.rfind("sequence,position,role,gap\n", 0), 0u);
  EXPECT_NE(csv.find(",valid,"), std::string::npos);
  EXPECT_NE(csv.find("0,6,test,1"), std::string::npos);
}
