#include "xplain/saliency_map.hpp"

#include <cmath>
#include <stdexcept>

namespace xplain {

std::vector<double> floor_and_normalize(std::span<const double> raw) {
  std::vector<double> out(raw.begin(), raw.end());
  double sum = 0.0;
  for (double& w : out) {
    if (!(w >= kSaliencyFloor)) w = kSaliencyFloor;
    sum += w;
  }
  for (double& w : out) w /= sum;
  return out;
}

SaliencyMap SaliencyMap::from_raw(TokenSequence seq, std::span<const double> raw, std::string method) {
  if (raw.size() != seq.size()) throw std::invalid_argument("saliency: weight count != token count");
  SaliencyMap m;
  m.weights = floor_and_normalize(raw);
  m.token_seq = std::move(seq);
  m.method = std::move(method);
  m.normalized = true;
  return m;
}

bool SaliencyMap::satisfies_invariants(double tol) const {
  if (weights.size() != token_seq.size()) return false;
  if (weights.empty()) return true;
  double sum = 0.0;
  for (double w : weights) {
    if (!(w > 0.0) || !std::isfinite(w)) return false;
    sum += w;
  }
  return !normalized || std::abs(sum - 1.0) <= tol;
}

}  // namespace xplain
