#pragma once

#include <span>
#include <string>
#include <vector>

#include "xplain/tokenizer.hpp"

namespace xplain {

/// Weight assigned to tokens an explanation does not mark (and the floor for
/// negative attributions).
inline constexpr double kSaliencyFloor = 1e-9;

/// One non-negative importance weight per token.
struct SaliencyMap {
  TokenSequence token_seq;
  std::vector<double> weights;
  std::string method;
  bool normalized = false;

  /// Floors every raw weight at kSaliencyFloor (NaN counts as the floor), then
  /// divides by the sum.
  static SaliencyMap from_raw(TokenSequence seq, std::span<const double> raw, std::string method);

  std::size_t size() const { return weights.size(); }
  /// Sum within tol of 1, every weight > 0, one weight per token.
  bool satisfies_invariants(double tol = 1e-9) const;
};

std::vector<double> floor_and_normalize(std::span<const double> raw);

}  // namespace xplain
