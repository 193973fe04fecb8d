#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace xplain {

struct CharSpan {
  std::size_t start = 0;
  std::size_t end = 0;  // half-open

  bool overlaps(const CharSpan& other) const { return start < other.end && other.start < end; }
  friend bool operator==(const CharSpan&, const CharSpan&) = default;
};

/// Lowercased word-level tokens with byte offsets into the source text.
struct TokenSequence {
  std::vector<std::string> tokens;
  std::vector<CharSpan> offsets;
  std::string vocab_id;

  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }
};

inline constexpr std::string_view kTokenizerId = "word-lower-v1";
inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kSepToken = "<sep>";

/// Splits on whitespace; every ASCII punctuation byte is its own token; the
/// reserved literals "<unk>" and "<sep>" stay whole. Bytes >= 0x80 are word
/// characters, so UTF-8 sequences are never split.
TokenSequence tokenize(std::string_view text);

/// Replaces the character ranges of the selected tokens with `mask`.
/// `masked` must have one flag per token of `seq`.
std::string mask_text(std::string_view text, const TokenSequence& seq,
                      const std::vector<bool>& masked, std::string_view mask);

/// Token string <-> id mapping for the reference model. Id 0 is <unk>, id 1 is <sep>.
class Vocabulary {
 public:
  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& words);

  int add(const std::string& word);
  int id(std::string_view token) const;
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  std::vector<int> encode(const TokenSequence& seq) const;

  static constexpr int kUnk = 0;
  static constexpr int kSep = 1;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace xplain
