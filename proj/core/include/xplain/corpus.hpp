#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "xplain/tokenizer.hpp"

namespace xplain::corpus {

struct AnnotatedText {
  std::string id;
  std::string text;
  std::string label;
  std::vector<CharSpan> spans;
  std::map<std::string, std::string> meta;

  friend bool operator==(const AnnotatedText&, const AnnotatedText&) = default;
};

/// Ordered label set. token_of gives the label's token in the reference-model
/// vocabulary (one head row per label).
class LabelSet {
 public:
  LabelSet() = default;
  explicit LabelSet(std::vector<std::string> labels);

  const std::vector<std::string>& labels() const { return labels_; }
  std::size_t size() const { return labels_.size(); }
  bool contains(std::string_view label) const { return index_of(label).has_value(); }
  std::optional<std::size_t> index_of(std::string_view label) const;
  std::size_t require_index(std::string_view label) const;
  const std::string& at(std::size_t i) const { return labels_.at(i); }
  const std::string& token_of(std::string_view label) const;

  friend bool operator==(const LabelSet& a, const LabelSet& b) { return a.labels_ == b.labels_; }

 private:
  std::vector<std::string> labels_;
  std::vector<std::string> tokens_;
};

enum class Task { hazard, polarity };

Task parse_task(std::string_view name);
std::string_view task_name(Task task);

/// Label sets of the two synthetic tasks, in the order used throughout.
LabelSet labels_for(Task task);

/// Checks the AnnotatedText invariants; throws ValidationError naming the record.
void validate(const AnnotatedText& record, const LabelSet& labels);

std::vector<AnnotatedText> load_jsonl(const std::filesystem::path& path, const LabelSet& labels);
std::vector<AnnotatedText> parse_jsonl(std::string_view content, const LabelSet& labels);
std::string to_jsonl(const std::vector<AnnotatedText>& records);
void save_jsonl(const std::filesystem::path& path, const std::vector<AnnotatedText>& records);

/// Deterministic synthetic corpus. hazard: one planted hazard keyword decides
/// the class; polarity: every planted sentiment word agrees with the label.
/// Spans mark exactly the planted words. Throws std::invalid_argument if n == 0.
std::vector<AnnotatedText> gen_synthetic(Task task, std::size_t n, std::uint64_t seed);

/// Keyword-lookup oracle: the class implied by a lexicon word, if any.
std::optional<std::string> lexicon_label(Task task, std::string_view word);

/// Re-derives a synthetic record's label from its annotated span contents alone.
std::optional<std::string> label_from_spans(Task task, const AnnotatedText& record);

/// Lexicon words per label, exposed for fixtures and counterfactual generation.
const std::map<std::string, std::vector<std::string>>& lexicon(Task task);

}  // namespace xplain::corpus
