#include "xplain/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace xplain::saliency {

SaliencyMap spans_to_saliency(const TokenSequence& seq, std::span<const CharSpan> spans, std::string method) {
  std::vector<double> raw(seq.size(), kSaliencyFloor);
  for (std::size_t t = 0; t < seq.size(); ++t)
    for (const auto& s : spans)
      if (seq.offsets[t].overlaps(s)) {
        raw[t] = 1.0;
        break;
      }
  return SaliencyMap::from_raw(seq, raw, std::move(method));
}

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

char lower(char c) { return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c; }

// Lowercased, whitespace runs collapsed to one space, ends trimmed. `origin`
// maps each output byte back to its source byte.
std::string normalize(std::string_view s, std::vector<std::size_t>* origin) {
  std::string out;
  bool pending_space = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (is_space(s[i])) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out += ' ';
      if (origin) origin->push_back(i - 1);
      pending_space = false;
    }
    out += lower(s[i]);
    if (origin) origin->push_back(i);
  }
  return out;
}

}  // namespace

PhraseMatch find_phrase(std::string_view text, std::string_view phrase) {
  PhraseMatch m;
  const auto trimmed_norm = normalize(phrase, nullptr);
  if (trimmed_norm.empty()) return m;
  if (auto pos = text.find(phrase); pos != std::string_view::npos && !phrase.empty()) {
    m.found = true;
    m.span = {pos, pos + phrase.size()};
    return m;
  }
  std::vector<std::size_t> origin;
  const auto norm_text = normalize(text, &origin);
  const auto pos = norm_text.find(trimmed_norm);
  if (pos == std::string::npos) return m;
  m.found = true;
  m.fuzzy = true;
  m.span = {origin[pos], origin[pos + trimmed_norm.size() - 1] + 1};
  return m;
}

PhraseConversion phrases_to_saliency(std::string_view text, const TokenSequence& seq,
                                     const std::vector<std::string>& phrases, std::string method) {
  PhraseConversion out;
  std::vector<CharSpan> spans;
  for (const auto& p : phrases) {
    auto m = find_phrase(text, p);
    if (m.found) spans.push_back(m.span);
    out.matches.push_back(m);
  }
  out.map = spans_to_saliency(seq, spans, std::move(method));
  return out;
}

std::vector<bool> aligned_tokens(std::span<const std::string> original, std::span<const std::string> edited) {
  const std::size_t n = original.size();
  const std::size_t m = edited.size();
  // dp[i][j] = LCS of original[i:] and edited[j:]
  std::vector<std::vector<std::size_t>> dp(n + 1, std::vector<std::size_t>(m + 1, 0));
  for (std::size_t i = n; i-- > 0;)
    for (std::size_t j = m; j-- > 0;)
      dp[i][j] = original[i] == edited[j] ? dp[i + 1][j + 1] + 1 : std::max(dp[i + 1][j], dp[i][j + 1]);
  std::vector<bool> aligned(n, false);
  std::size_t i = 0, j = 0;
  while (i < n && j < m) {
    if (original[i] == edited[j] && dp[i][j] == dp[i + 1][j + 1] + 1) {
      aligned[i] = true;
      ++i;
      ++j;
    } else if (dp[i + 1][j] >= dp[i][j + 1]) {
      ++i;
    } else {
      ++j;
    }
  }
  return aligned;
}

CounterfactualConversion counterfactual_to_saliency(const TokenSequence& original, std::string_view counterfactual,
                                                    std::string method) {
  const auto edited = tokenize(counterfactual);
  const auto aligned = aligned_tokens(original.tokens, edited.tokens);
  CounterfactualConversion out;
  std::vector<double> raw(original.size(), kSaliencyFloor);
  std::size_t matched = 0;
  for (std::size_t t = 0; t < aligned.size(); ++t) {
    if (aligned[t]) {
      ++matched;
    } else {
      raw[t] = 1.0;
      ++out.changed;
    }
  }
  out.inserted = edited.size() - matched;
  out.map = SaliencyMap::from_raw(original, raw, std::move(method));
  return out;
}

bool is_constant(std::span<const double> weights) {
  return std::all_of(weights.begin(), weights.end(), [&](double w) { return w == weights.front(); });
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("pearson: maps have different lengths");
  if (is_constant(a) || is_constant(b)) throw UndefinedCorrelation("pearson: zero-variance input");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (!(saa > 0.0) || !(sbb > 0.0)) throw UndefinedCorrelation("pearson: zero-variance input");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double pearson(const SaliencyMap& a, const SaliencyMap& b) { return pearson(a.weights, b.weights); }

}  // namespace xplain::saliency
