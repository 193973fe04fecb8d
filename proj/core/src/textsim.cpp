#include "xplain/textsim.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <unordered_map>

namespace xplain::textsim {

namespace {

std::size_t clipped_overlap(Tokens reference, Tokens candidate) {
  std::map<std::string_view, std::size_t> ref_counts;
  for (const auto& t : reference) ++ref_counts[t];
  std::size_t overlap = 0;
  for (const auto& t : candidate) {
    auto it = ref_counts.find(t);
    if (it != ref_counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  return overlap;
}

// Longest block a[i:i+k] == b[j:j+k] inside the window; ties resolve to the
// smallest i, then the smallest j.
Block longest_match(Tokens a, Tokens b, std::size_t alo, std::size_t ahi, std::size_t blo, std::size_t bhi) {
  Block best{alo, blo, 0};
  std::vector<std::size_t> prev(bhi - blo + 1, 0), cur(bhi - blo + 1, 0);
  for (std::size_t i = alo; i < ahi; ++i) {
    for (std::size_t j = blo; j < bhi; ++j) {
      const std::size_t jj = j - blo + 1;
      cur[jj] = a[i] == b[j] ? prev[jj - 1] + 1 : 0;
      if (cur[jj] > best.size) best = {i + 1 - cur[jj], j + 1 - cur[jj], cur[jj]};
    }
    std::swap(prev, cur);
    std::fill(cur.begin(), cur.end(), 0);
  }
  return best;
}

void collect_blocks(Tokens a, Tokens b, std::size_t alo, std::size_t ahi, std::size_t blo, std::size_t bhi,
                    std::vector<Block>& out) {
  if (alo >= ahi || blo >= bhi) return;
  const Block m = longest_match(a, b, alo, ahi, blo, bhi);
  if (m.size == 0) return;
  collect_blocks(a, b, alo, m.a, blo, m.b, out);
  out.push_back(m);
  collect_blocks(a, b, m.a + m.size, ahi, m.b + m.size, bhi, out);
}

}  // namespace

double bleu1(Tokens reference, Tokens candidate) {
  if (candidate.empty()) return 0.0;
  const double c = static_cast<double>(candidate.size());
  const double r = static_cast<double>(reference.size());
  const double precision = static_cast<double>(clipped_overlap(reference, candidate)) / c;
  const double penalty = c <= r ? std::exp(1.0 - r / c) : 1.0;
  return precision * penalty;
}

double rouge1(Tokens reference, Tokens candidate) {
  if (reference.empty()) return candidate.empty() ? 1.0 : 0.0;
  return static_cast<double>(clipped_overlap(reference, candidate)) / static_cast<double>(reference.size());
}

std::size_t lcs_length(Tokens a, Tokens b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j)
      cur[j + 1] = a[i] == b[j] ? prev[j] + 1 : std::max(prev[j + 1], cur[j]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(Tokens reference, Tokens candidate) {
  if (reference.empty()) return candidate.empty() ? 1.0 : 0.0;
  return static_cast<double>(lcs_length(reference, candidate)) / static_cast<double>(reference.size());
}

std::vector<Block> matching_blocks(Tokens a, Tokens b) {
  std::vector<Block> out;
  collect_blocks(a, b, 0, a.size(), 0, b.size(), out);
  return out;
}

double match_ratio(Tokens reference, Tokens candidate) {
  const std::size_t total = reference.size() + candidate.size();
  if (total == 0) return 1.0;
  std::size_t matched = 0;
  for (const auto& blk : matching_blocks(reference, candidate)) matched += blk.size;
  return 2.0 * static_cast<double>(matched) / static_cast<double>(total);
}

Scores compare(const std::string& reference, const std::string& candidate) {
  const auto r = tokenize(reference);
  const auto c = tokenize(candidate);
  return {match_ratio(r.tokens, c.tokens), rouge1(r.tokens, c.tokens), bleu1(r.tokens, c.tokens),
          rouge_l(r.tokens, c.tokens)};
}

}  // namespace xplain::textsim
