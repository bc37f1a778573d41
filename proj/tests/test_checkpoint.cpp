#include "caseq/checkpoint.hpp"
#include "caseq/train.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <sstream>

using namespace caseq;

namespace {

CaseqConfig config(Backbone bb) {
  CaseqConfig c;
  c.num_event_types = 6;
  c.dim = 4;
  c.units = 3;
  c.layers = 2;
  c.backbone = bb;
  c.max_len = 9;
  c.tau = 0.37;
  return c;
}

std::string save(const CaseqConfig& c, const CaseqParams& p) {
  std::ostringstream out;
  save_checkpoint(out, c, p);
  return out.str();
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitwise) {
  for (Backbone bb : {Backbone::Gru, Backbone::Attention}) {
    const CaseqConfig c = config(bb);
    const CaseqParams p = init_params(c, 42);
    const std::string bytes = save(c, p);
    std::istringstream in(bytes);
    const Checkpoint loaded = load_checkpoint(in);
    EXPECT_EQ(config_to_json(loaded.config), config_to_json(c));
    EXPECT_EQ(save(loaded.config, loaded.params), bytes);
    const EventSequence seq = {1, 6, 2, 2, 5};
    const Matrix a = predict(p, c, seq).logits;
    const Matrix b = predict(loaded.params, loaded.config, seq).logits;
    ASSERT_EQ(a.size(), b.size());
    EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())), 0);
  }
}

TEST(Checkpoint, SameParamsSameBytes) {
  const CaseqConfig c = config(Backbone::Gru);
  EXPECT_EQ(save(c, init_params(c, 1)), save(c, init_params(c, 1)));
  EXPECT_NE(save(c, init_params(c, 1)), save(c, init_params(c, 2)));
}

TEST(Checkpoint, FileRoundTrip) {
  const CaseqConfig c = config(Backbone::Attention);
  const CaseqParams p = init_params(c, 3);
  const auto path = std::filesystem::temp_directory_path() / "caseq_test_checkpoint.bin";
  save_checkpoint(path, c, p);
  const Checkpoint loaded = load_checkpoint(path);
  EXPECT_EQ(save(loaded.config, loaded.params), save(c, p));
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), IoError);
}

TEST(Checkpoint, CorruptionIsRejected) {
  const CaseqConfig c = config(Backbone::Gru);
  const std::string bytes = save(c, init_params(c, 5));
  auto load = [](const std::string& s) {
    std::istringstream in(s);
    return load_checkpoint(in);
  };
  EXPECT_THROW(load(bytes.substr(0, bytes.size() / 2)), ParseError);
  EXPECT_THROW(load("not-a-checkpoint 1\n"), ParseError);
  std::string wrong_version = bytes;
  wrong_version.replace(wrong_version.find(' ') + 1, 1, "9");
  EXPECT_THROW(load(wrong_version), ParseError);
  std::string renamed = bytes;
  renamed.replace(renamed.find("H_x"), 3, "H_y");
  EXPECT_THROW(load(renamed), ParseError);
}
