#include "xplain/tokenizer.hpp"

#include <array>
#include <stdexcept>

namespace xplain {

namespace {

bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool is_punct(unsigned char c) {
  return c < 0x80 && ((c >= '!' && c <= '/') || (c >= ':' && c <= '@') || (c >= '[' && c <= '`') ||
                      (c >= '{' && c <= '~'));
}

constexpr std::array<std::string_view, 2> kReserved = {kUnkToken, kSepToken};

std::string to_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

}  // namespace

TokenSequence tokenize(std::string_view text) {
  TokenSequence seq;
  seq.vocab_id = std::string(kTokenizerId);
  std::size_t i = 0;
  const std::size_t n = text.size();
  auto push = [&](std::size_t start, std::size_t end) {
    seq.tokens.push_back(to_lower(text.substr(start, end - start)));
    seq.offsets.push_back({start, end});
  };
  while (i < n) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (is_space(c)) {
      ++i;
      continue;
    }
    if (c == '<') {
      bool reserved = false;
      for (auto r : kReserved) {
        if (text.substr(i, r.size()) == r) {
          push(i, i + r.size());
          i += r.size();
          reserved = true;
          break;
        }
      }
      if (reserved) continue;
    }
    if (is_punct(c)) {
      push(i, i + 1);
      ++i;
      continue;
    }
    const std::size_t start = i;
    while (i < n) {
      const auto w = static_cast<unsigned char>(text[i]);
      if (is_space(w) || is_punct(w)) break;
      ++i;
    }
    push(start, i);
  }
  return seq;
}

std::string mask_text(std::string_view text, const TokenSequence& seq, const std::vector<bool>& masked,
                      std::string_view mask) {
  if (masked.size() != seq.size()) throw std::invalid_argument("mask_text: flag count != token count");
  std::string out;
  out.reserve(text.size() + seq.size() * mask.size());
  std::size_t cursor = 0;
  for (std::size_t t = 0; t < seq.size(); ++t) {
    if (!masked[t]) continue;
    const auto& span = seq.offsets[t];
    out.append(text.substr(cursor, span.start - cursor));
    out.append(mask);
    cursor = span.end;
  }
  out.append(text.substr(cursor));
  return out;
}

Vocabulary::Vocabulary() {
  add(std::string(kUnkToken));
  add(std::string(kSepToken));
}

Vocabulary::Vocabulary(const std::vector<std::string>& words) : Vocabulary() {
  for (const auto& w : words) add(w);
}

int Vocabulary::add(const std::string& word) {
  if (auto it = index_.find(word); it != index_.end()) return it->second;
  const int id = static_cast<int>(words_.size());
  words_.push_back(word);
  index_.emplace(word, id);
  return id;
}

int Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

std::vector<int> Vocabulary::encode(const TokenSequence& seq) const {
  std::vector<int> ids;
  ids.reserve(seq.size());
  for (const auto& t : seq.tokens) ids.push_back(id(t));
  return ids;
}

}  // namespace xplain
