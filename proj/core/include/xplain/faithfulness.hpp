#pragma once

// Perturbation test: mask tokens cumulatively in saliency order, in batches
// of ceil(0.2 * n), and record whether the predicted label moves away from
// the unmasked prediction.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "xplain/rng.hpp"
#include "xplain/saliency_map.hpp"

namespace xplain::faithfulness {

enum class Direction { high_to_low, low_to_high };

std::string_view direction_name(Direction d);
Direction parse_direction(std::string_view name);

inline constexpr std::size_t kSteps = 5;  // masking steps after the unmasked one

/// Fractions 0.0, 0.2, ..., 1.0.
double step_fraction(std::size_t step);

/// Token indices in masking order, chunked into batches of ceil(0.2 * n).
/// Ties are broken by a seeded uniform permutation.
std::vector<std::vector<std::size_t>> mask_order(const SaliencyMap& map, Direction direction, Rng& rng);

/// Classifies a (possibly masked) text. Throws on failure.
using TextClassifier = std::function<std::string(const std::string& text)>;

struct CurveStep {
  double fraction = 0.0;
  std::string label;
  bool flipped = false;
};

struct PerturbationCurve {
  std::string text_id;
  std::string method;
  Direction direction = Direction::high_to_low;
  std::vector<CurveStep> steps;
  std::string mask_token;
  std::uint64_t rng_seed = 0;
  bool complete = true;
  std::string error;
};

struct CurveOptions {
  std::string mask_token = "<unk>";
  bool sticky = false;  // once flipped, stay flipped
};

PerturbationCurve run_curve(const TextClassifier& classify, std::string_view text, const SaliencyMap& map,
                            Direction direction, const CurveOptions& options, std::uint64_t seed,
                            std::string text_id = {});

/// Seed for one (text, method, direction) curve derived from a run-level seed.
std::uint64_t curve_seed(std::uint64_t base, std::string_view text_id, std::string_view method, Direction direction);

struct AggregateRow {
  std::string method;
  Direction direction = Direction::high_to_low;
  double fraction = 0.0;
  double flip_fraction = 0.0;
  std::size_t curves = 0;
};

struct Aggregate {
  std::vector<AggregateRow> rows;  // sorted by (method, direction, fraction)
  /// Label at full masking per method (taken from the high_to_low curves).
  std::map<std::string, std::map<std::string, std::size_t>> occluded;
  std::size_t incomplete = 0;  // curves skipped because a step failed
};

/// Throws std::invalid_argument on an empty input (or when no curve is complete).
Aggregate aggregate(const std::vector<PerturbationCurve>& curves);

/// Trapezoidal area under the flip-fraction curve over fractions [0, 1].
double curve_area(const std::vector<double>& flip_fractions);

}  // namespace xplain::faithfulness
