#include <gtest/gtest.h>

#include "oracles.hpp"
#include "xplain/textsim.hpp"

using namespace xplain;
using namespace xplain::textsim;

namespace {

std::vector<std::string> words(const std::string& s) { return tokenize(s).tokens; }

}  // namespace

TEST(Bleu1, Examples) {
  EXPECT_NEAR(bleu1(words("the cat sat"), words("the cat")), 0.6065, 1e-4);
  EXPECT_NEAR(bleu1(words("the cat sat"), words("the cat")), std::exp(-0.5), 1e-15);
  EXPECT_EQ(bleu1(words("the cat sat"), words("the cat sat")), 1.0);
  EXPECT_EQ(bleu1(words("the cat sat"), words("")), 0.0);
  EXPECT_EQ(bleu1(words("a b"), words("c d")), 0.0);
  // Clipping: "the" appears once in the reference.
  EXPECT_NEAR(bleu1(words("the cat"), words("the the the")), 1.0 / 3, 1e-15);
  // Longer candidate: no brevity penalty.
  EXPECT_NEAR(bleu1(words("a b"), words("a b c d")), 0.5, 1e-15);
}

TEST(Rouge1, Examples) {
  EXPECT_NEAR(rouge1(words("the cat sat"), words("the cat")), 2.0 / 3, 1e-9);
  EXPECT_EQ(rouge1(words("x y"), words("x y")), 1.0);
  EXPECT_EQ(rouge1(words("x y"), words("z")), 0.0);
  EXPECT_EQ(rouge1(words(""), words("")), 1.0);  // two empty sequences count as identical
  EXPECT_NEAR(rouge1(words("a a b"), words("a b b")), 2.0 / 3, 1e-15);
}

TEST(Rouge1, AppendingNonMatchingTokenNeverHelps) {
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    std::vector<std::string> ref, cand;
    for (std::size_t i = 0, n = 1 + uniform_index(rng, 8); i < n; ++i) ref.push_back("t" + std::to_string(uniform_index(rng, 5)));
    for (std::size_t i = 0, n = uniform_index(rng, 8); i < n; ++i) cand.push_back("t" + std::to_string(uniform_index(rng, 5)));
    const double before = rouge1(ref, cand);
    cand.push_back("zz");
    EXPECT_LE(rouge1(ref, cand), before);
  }
}

TEST(RougeL, Examples) {
  EXPECT_EQ(rouge_l(words("a b c d"), words("a c")), 0.5);
  EXPECT_EQ(rouge_l(words("a b c d"), words("a b c d")), 1.0);
  EXPECT_EQ(rouge_l(words("a b c d"), words("")), 0.0);
}

TEST(MatchRatio, Examples) {
  EXPECT_EQ(match_ratio(words("the cat sat"), words("the cat")), 0.8);
  EXPECT_EQ(match_ratio(words("a b"), words("a b")), 1.0);
  EXPECT_EQ(match_ratio(words("a b"), words("c d")), 0.0);
  EXPECT_EQ(match_ratio(words(""), words("")), 1.0);
}

// Values computed with Python's difflib.SequenceMatcher(None, a, b,
// autojunk=False) on the whitespace-split words, then frozen.
TEST(MatchRatio, FrozenReferenceValues) {
  struct Case {
    const char* a;
    const char* b;
    double ratio;
  };
  const Case cases[] = {
      {"the cat sat on the mat", "the cat sat", 0.6666666666666666},
      {"a b c a b", "b a c b a", 0.6},
      {"x y z", "z y x", 0.3333333333333333},
      {"a a a b", "a b a a", 0.5},
      {"one two three four five", "one three five two four", 0.6},
  };
  for (const auto& c : cases) EXPECT_DOUBLE_EQ(match_ratio(words(c.a), words(c.b)), c.ratio) << c.a << " | " << c.b;
}

TEST(MatchingBlocks, EarliestLongestBlock) {
  const auto blocks = matching_blocks(words("a a a b"), words("a b a a"));
  ASSERT_EQ(blocks.size(), 1u);
  EXPECT_EQ(blocks[0].a, 0u);
  EXPECT_EQ(blocks[0].b, 2u);
  EXPECT_EQ(blocks[0].size, 2u);
  const auto b2 = matching_blocks(words("a b c a b"), words("b a c b a"));
  ASSERT_EQ(b2.size(), 3u);
  EXPECT_EQ(b2[0].a, 0u);
  EXPECT_EQ(b2[0].b, 1u);
  EXPECT_EQ(b2[1].a, 1u);
  EXPECT_EQ(b2[1].b, 3u);
  EXPECT_EQ(b2[2].a, 3u);
  EXPECT_EQ(b2[2].b, 4u);
}

TEST(Oracles, ThousandRandomPairs) {
  Rng rng(1000);
  for (int t = 0; t < 1000; ++t) {
    std::vector<std::string> a, b;
    const auto alphabet = 2 + uniform_index(rng, 6);
    for (std::size_t i = 0, n = uniform_index(rng, 15); i < n; ++i) a.push_back("w" + std::to_string(uniform_index(rng, alphabet)));
    for (std::size_t i = 0, n = uniform_index(rng, 15); i < n; ++i) b.push_back("w" + std::to_string(uniform_index(rng, alphabet)));
    const auto lcs = oracle::lcs_dp(a, b);
    EXPECT_EQ(lcs_length(a, b), lcs);
    if (!a.empty()) {
      EXPECT_DOUBLE_EQ(rouge_l(a, b), static_cast<double>(lcs) / static_cast<double>(a.size()));
    }
    const auto m = oracle::ratcliff_matches(a, b);
    const double expect = a.empty() && b.empty() ? 1.0 : 2.0 * static_cast<double>(m) / static_cast<double>(a.size() + b.size());
    EXPECT_DOUBLE_EQ(match_ratio(a, b), expect);
    EXPECT_LE(m, lcs);
    for (double s : {bleu1(a, b), rouge1(a, b), rouge_l(a, b), match_ratio(a, b)}) {
      EXPECT_GE(s, 0.0);
      EXPECT_LE(s, 1.0);
    }
    const bool equal = a == b;
    if (!a.empty()) {
      EXPECT_EQ(rouge_l(a, b) == 1.0 && a.size() == b.size(), equal);
    }
    EXPECT_EQ(match_ratio(a, b) == 1.0, equal);
  }
}

TEST(Compare, LowercasedTokens) {
  const auto s = compare("The Cat sat", "the cat");
  EXPECT_EQ(s.match_ratio, 0.8);
  EXPECT_NEAR(s.rouge1, 2.0 / 3, 1e-12);
  EXPECT_NEAR(s.bleu1, std::exp(-0.5), 1e-12);
  EXPECT_NEAR(s.rouge_l, 2.0 / 3, 1e-12);
}
