#pragma once

// Conversion of span-shaped explanations (human spans, extracted phrases,
// counterfactual edits) into SaliencyMaps, and per-text map correlation.

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xplain/errors.hpp"
#include "xplain/saliency_map.hpp"
#include "xplain/tokenizer.hpp"

namespace xplain::saliency {

/// Tokens whose character range overlaps any span get raw weight 1, all others the floor.
SaliencyMap spans_to_saliency(const TokenSequence& seq, std::span<const CharSpan> spans,
                              std::string method = "human");

struct PhraseMatch {
  bool found = false;
  bool fuzzy = false;  // matched only after case/whitespace normalisation
  CharSpan span;
};

/// First occurrence of `phrase` in `text`: exact byte match first, then
/// case-insensitive with whitespace runs collapsed.
PhraseMatch find_phrase(std::string_view text, std::string_view phrase);

struct PhraseConversion {
  SaliencyMap map;
  std::vector<PhraseMatch> matches;  // one per phrase; not-found phrases contribute nothing
};

PhraseConversion phrases_to_saliency(std::string_view text, const TokenSequence& seq,
                                     const std::vector<std::string>& phrases, std::string method = "extractive");

struct CounterfactualConversion {
  SaliencyMap map;
  std::size_t changed = 0;   // original tokens outside the alignment
  std::size_t inserted = 0;  // counterfactual tokens outside the alignment
};

/// LCS alignment over token strings. Backtracking prefers a diagonal match,
/// then dropping the original token, so the earliest original occurrences are
/// the ones reported as changed.
std::vector<bool> aligned_tokens(std::span<const std::string> original, std::span<const std::string> edited);

CounterfactualConversion counterfactual_to_saliency(const TokenSequence& original, std::string_view counterfactual,
                                                    std::string method = "counterfactual");

class UndefinedCorrelation : public NumericError {
 public:
  using NumericError::NumericError;
};

/// True when every weight equals the first (zero variance).
bool is_constant(std::span<const double> weights);

/// Pearson's r. Throws UndefinedCorrelation when either vector is constant,
/// std::invalid_argument on a length mismatch.
double pearson(std::span<const double> a, std::span<const double> b);
double pearson(const SaliencyMap& a, const SaliencyMap& b);

}  // namespace xplain::saliency
