#include "xplain/faithfulness.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <tuple>

#include "xplain/errors.hpp"
#include "xplain/tokenizer.hpp"

namespace xplain::faithfulness {

std::string_view direction_name(Direction d) { return d == Direction::high_to_low ? "high_to_low" : "low_to_high"; }

Direction parse_direction(std::string_view name) {
  if (name == "high_to_low") return Direction::high_to_low;
  if (name == "low_to_high") return Direction::low_to_high;
  throw ParseError("unknown direction '" + std::string(name) + "'");
}

double step_fraction(std::size_t step) { return static_cast<double>(step) / static_cast<double>(kSteps); }

std::vector<std::vector<std::size_t>> mask_order(const SaliencyMap& map, Direction direction, Rng& rng) {
  const std::size_t n = map.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle(std::span(order), rng);
  const auto& w = map.weights;
  if (direction == Direction::high_to_low)
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
  else
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return w[a] < w[b]; });

  const std::size_t batch = (n + kSteps - 1) / kSteps;  // ceil(0.2 * n)
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += batch)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch)));
  return batches;
}

PerturbationCurve run_curve(const TextClassifier& classify, std::string_view text, const SaliencyMap& map,
                            Direction direction, const CurveOptions& options, std::uint64_t seed,
                            std::string text_id) {
  PerturbationCurve curve;
  curve.text_id = std::move(text_id);
  curve.method = map.method;
  curve.direction = direction;
  curve.mask_token = options.mask_token;
  curve.rng_seed = seed;

  Rng rng(seed);
  const auto batches = mask_order(map, direction, rng);
  std::vector<bool> masked(map.size(), false);
  std::string original_label;
  bool flipped_once = false;
  try {
    for (std::size_t step = 0; step <= kSteps; ++step) {
      if (step > 0 && step - 1 < batches.size())
        for (auto t : batches[step - 1]) masked[t] = true;
      const auto label = classify(mask_text(text, map.token_seq, masked, options.mask_token));
      if (step == 0) original_label = label;
      bool flipped = label != original_label;
      if (options.sticky) {
        flipped_once = flipped_once || flipped;
        flipped = flipped_once;
      }
      curve.steps.push_back({step_fraction(step), label, flipped});
    }
  } catch (const std::exception& e) {
    curve.complete = false;
    curve.error = e.what();
  }
  return curve;
}

std::uint64_t curve_seed(std::uint64_t base, std::string_view text_id, std::string_view method, Direction direction) {
  std::string key(text_id);
  key += '\x1f';
  key += method;
  key += '\x1f';
  key += direction_name(direction);
  return derive_seed(base, key);
}

Aggregate aggregate(const std::vector<PerturbationCurve>& curves) {
  if (curves.empty()) throw std::invalid_argument("aggregate: no curves");
  Aggregate out;
  // (method, direction) -> per-step flip counts, curve count
  std::map<std::pair<std::string, int>, std::pair<std::vector<std::size_t>, std::size_t>> acc;
  for (const auto& c : curves) {
    if (!c.complete || c.steps.size() != kSteps + 1) {
      ++out.incomplete;
      continue;
    }
    auto& [flips, count] = acc[{c.method, static_cast<int>(c.direction)}];
    flips.resize(kSteps + 1, 0);
    ++count;
    for (std::size_t s = 0; s <= kSteps; ++s) flips[s] += c.steps[s].flipped ? 1 : 0;
    if (c.direction == Direction::high_to_low) ++out.occluded[c.method][c.steps.back().label];
  }
  if (acc.empty()) throw std::invalid_argument("aggregate: no complete curves");
  for (const auto& [key, value] : acc) {
    const auto& [flips, count] = value;
    for (std::size_t s = 0; s <= kSteps; ++s)
      out.rows.push_back({key.first, static_cast<Direction>(key.second), step_fraction(s),
                          static_cast<double>(flips[s]) / static_cast<double>(count), count});
  }
  return out;
}

double curve_area(const std::vector<double>& flip_fractions) {
  if (flip_fractions.size() < 2) return 0.0;
  const double h = 1.0 / static_cast<double>(flip_fractions.size() - 1);
  double area = 0.0;
  for (std::size_t i = 1; i < flip_fractions.size(); ++i) area += 0.5 * h * (flip_fractions[i - 1] + flip_fractions[i]);
  return area;
}

}  // namespace xplain::faithfulness
