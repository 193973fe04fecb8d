#pragma once

// Token-level similarity between an original (reference) text and its
// counterfactual (candidate). All scores lie in [0, 1].

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "xplain/tokenizer.hpp"

namespace xplain::textsim {

using Tokens = std::span<const std::string>;

/// Clipped unigram precision times brevity penalty exp(1 - r/c) for c <= r. Empty candidate -> 0.
double bleu1(Tokens reference, Tokens candidate);
/// Clipped unigram overlap over the reference length.
double rouge1(Tokens reference, Tokens candidate);
/// LCS length over the reference length.
double rouge_l(Tokens reference, Tokens candidate);
/// 2 M / (|reference| + |candidate|), M from the recursive longest-matching-block
/// decomposition (Ratcliff/Obershelp, as difflib.SequenceMatcher without junk
/// heuristics). Two empty sequences score 1.
double match_ratio(Tokens reference, Tokens candidate);

std::size_t lcs_length(Tokens a, Tokens b);

struct Block {
  std::size_t a = 0;
  std::size_t b = 0;
  std::size_t size = 0;
};

/// Matching blocks in increasing order of position in `a`.
std::vector<Block> matching_blocks(Tokens a, Tokens b);

struct Scores {
  double match_ratio = 0.0;
  double rouge1 = 0.0;
  double bleu1 = 0.0;
  double rouge_l = 0.0;
};

/// All four scores on the corpus tokenizer's lowercased tokens.
Scores compare(const std::string& reference, const std::string& candidate);

}  // namespace xplain::textsim
