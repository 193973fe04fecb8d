#include <gtest/gtest.h>

#include <filesystem>
#include <unistd.h>
#include <fstream>
#include <map>

#include "xplain/corpus.hpp"
#include "xplain/errors.hpp"

using namespace xplain;
using namespace xplain::corpus;

namespace {

const LabelSet kPolarity({"negative", "positive"});

std::filesystem::path temp_file(const std::string& name, const std::string& content) {
  const auto p = std::filesystem::temp_directory_path() / ("xplain_corpus_" + std::to_string(::getpid()) + "_" + name);
  std::ofstream(p, std::ios::binary) << content;
  return p;
}

}  // namespace

TEST(LoadJsonl, MapsFields) {
  const auto recs =
      parse_jsonl(R"({"id":"a","text":"bad film","label":"negative","spans":[[0,3]]})" "\n", kPolarity);
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0].id, "a");
  EXPECT_EQ(recs[0].label, "negative");
  ASSERT_EQ(recs[0].spans.size(), 1u);
  EXPECT_EQ(recs[0].text.substr(recs[0].spans[0].start, recs[0].spans[0].end - recs[0].spans[0].start), "bad");
}

TEST(LoadJsonl, EmptyFileGivesEmptyList) {
  EXPECT_TRUE(load_jsonl(temp_file("empty.jsonl", ""), kPolarity).empty());
  EXPECT_TRUE(parse_jsonl("\n\n", kPolarity).empty());
}

TEST(LoadJsonl, SpanOutOfBoundsNamesRecord) {
  try {
    parse_jsonl(R"({"id":"r17","text":"bad film","label":"negative","spans":[[5,99]]})", kPolarity);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("r17"), std::string::npos);
  }
}

TEST(LoadJsonl, Errors) {
  EXPECT_THROW(parse_jsonl(R"({"id":"a","text":"x","label":"meh","spans":[]})", kPolarity), ValidationError);
  EXPECT_THROW(parse_jsonl(R"({"id":"a","text":"abcdef","label":"negative","spans":[[0,3],[2,4]]})", kPolarity),
               ValidationError);
  EXPECT_THROW(parse_jsonl(R"({"id":"a","text":"abc","label":"negative","spans":[[2,2]]})", kPolarity),
               ValidationError);
  try {
    parse_jsonl("{\"id\":\"a\",\"text\":\"x\",\"label\":\"negative\",\"spans\":[]}\n{broken\n", kPolarity);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  EXPECT_THROW(parse_jsonl(R"({"id":"a","text":"x","label":"negative"})", kPolarity), ParseError);
}

TEST(LabelSet, TokensAreInjective) {
  const auto labels = labels_for(Task::hazard);
  EXPECT_EQ(labels.size(), 6u);
  EXPECT_EQ(labels.token_of("foreign bodies"), "<label:foreign_bodies>");
  EXPECT_THROW(LabelSet(std::vector<std::string>{}), ValidationError);
  EXPECT_THROW(LabelSet({"a", "a"}), ValidationError);
  EXPECT_THROW(LabelSet({"a b", "a_b"}), ValidationError);
}

TEST(GenSynthetic, HazardEveryTextHasOneDecisiveKeyword) {
  const auto recs = gen_synthetic(Task::hazard, 200, 7);
  ASSERT_EQ(recs.size(), 200u);
  for (const auto& r : recs) {
    ASSERT_EQ(r.spans.size(), 1u) << r.id;
    const auto word = r.text.substr(r.spans[0].start, r.spans[0].end - r.spans[0].start);
    EXPECT_EQ(lexicon_label(Task::hazard, word), r.label) << r.id;
    // No other lexicon word anywhere in the text.
    std::size_t hits = 0;
    for (const auto& tok : tokenize(r.text).tokens) hits += lexicon_label(Task::hazard, tok).has_value();
    EXPECT_EQ(hits, 1u) << r.text;
  }
}

TEST(GenSynthetic, HazardClassImbalance) {
  std::map<std::string, int> counts;
  for (const auto& r : gen_synthetic(Task::hazard, 200, 7)) ++counts[r.label];
  EXPECT_EQ(counts["biological"], 77);
  EXPECT_EQ(counts["allergens"], 53);
  EXPECT_EQ(counts["chemical"], 29);
  EXPECT_EQ(counts["foreign bodies"], 20);
  EXPECT_EQ(counts["organoleptic aspects"], 12);
  EXPECT_EQ(counts["fraud"], 9);
}

TEST(GenSynthetic, Deterministic) {
  EXPECT_EQ(gen_synthetic(Task::polarity, 10, 1), gen_synthetic(Task::polarity, 10, 1));
  EXPECT_NE(gen_synthetic(Task::polarity, 10, 1), gen_synthetic(Task::polarity, 10, 2));
}

TEST(GenSynthetic, ZeroCountThrows) { EXPECT_THROW(gen_synthetic(Task::hazard, 0, 1), std::invalid_argument); }

// Labels are recoverable from the annotated span contents alone.
TEST(GenSynthetic, LabelFromSpansOracle) {
  for (auto task : {Task::hazard, Task::polarity})
    for (std::uint64_t seed : {1u, 2u, 3u})
      for (const auto& r : gen_synthetic(task, 150, seed)) {
        ASSERT_FALSE(r.spans.empty()) << r.id;
        EXPECT_EQ(label_from_spans(task, r), r.label) << r.id;
        validate(r, labels_for(task));
      }
}

TEST(GenSynthetic, PolaritySpreadsSentimentWords) {
  std::size_t multi = 0;
  for (const auto& r : gen_synthetic(Task::polarity, 200, 5)) multi += r.spans.size() > 1;
  EXPECT_GT(multi, 50u);
}

TEST(Jsonl, RoundTripIsIdentity) {
  for (auto task : {Task::hazard, Task::polarity}) {
    const auto recs = gen_synthetic(task, 60, 9);
    const auto path = temp_file("roundtrip.jsonl", "");
    save_jsonl(path, recs);
    EXPECT_EQ(load_jsonl(path, labels_for(task)), recs);
    EXPECT_EQ(parse_jsonl(to_jsonl(recs), labels_for(task)), recs);
  }
}
