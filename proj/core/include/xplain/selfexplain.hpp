#pragma once

// Three-step chat protocol: classify, then ask for the most important
// phrases in the same session, then ask for a minimal label-flipping edit in a
// fresh session that replays only the classification exchange.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "xplain/chat.hpp"
#include "xplain/corpus.hpp"
#include "xplain/errors.hpp"
#include "xplain/faithfulness.hpp"

namespace xplain::selfexplain {

using chat::ChatEndpoint;
using chat::ChatTranscript;

/// Placeholders: {text} and {labels} in `classify`, {k} in `extractive_multi`.
/// `extractive_single` is used when one phrase is requested.
struct PromptTemplates {
  std::string classify;
  std::string extractive_single;
  std::string extractive_multi;
  std::string counterfactual;

  static PromptTemplates sentiment();
  /// Adapted wording for the food-hazard task.
  static PromptTemplates hazard();
  static PromptTemplates for_task(corpus::Task task);

  /// Throws ConfigError when a required placeholder is missing.
  void validate() const;
  friend bool operator==(const PromptTemplates&, const PromptTemplates&) = default;
};

/// Substitutes {text}, {labels}, {k}; inserted values are not re-scanned.
std::string render(std::string_view tmpl, std::string_view text, std::string_view labels, std::size_t k = 0);
/// "negative" or "positive";  "a", "b" or "c".
std::string format_labels(const corpus::LabelSet& labels);
/// Label as a model would write it: first letter upper-cased.
std::string display_label(std::string_view label);

class ClassificationParseError : public ParseError {
 public:
  using ParseError::ParseError;
};
class ExtractionParseError : public ParseError {
 public:
  using ParseError::ParseError;
};

struct LabelParse {
  std::string label;
  bool lenient = false;  // found by substring rather than exact match
};

/// Case-insensitive. An exact match after trimming punctuation wins, otherwise
/// a unique substring match (rejected in strict mode).
LabelParse parse_label_detail(std::string_view reply, const corpus::LabelSet& labels, bool strict = false);
std::string parse_label(std::string_view reply, const corpus::LabelSet& labels, bool strict = false);

/// Removes whitespace and matching surrounding quote pairs (straight, curly, ``'').
std::string strip_quotes(std::string_view s);
/// Splits a reply into at most k phrases (one per line, or several quoted
/// segments on one line); list markers and quotes are stripped.
std::vector<std::string> parse_phrases(std::string_view reply, std::size_t k);

struct Classification {
  std::string label;
  ChatTranscript transcript;  // [user prompt, assistant reply]
  bool lenient = false;
};

Classification ask_classification(ChatEndpoint& endpoint, const PromptTemplates& templates, std::string_view text,
                                  const corpus::LabelSet& labels, bool strict = false);

/// Continues `session` (which must end with the label reply) and appends the exchange.
std::vector<std::string> ask_extractive(ChatEndpoint& endpoint, const PromptTemplates& templates,
                                        ChatTranscript& session, std::size_t k);

/// Builds a new session from the first two messages of `classification`, asks
/// for the counterfactual, and returns the reply with quotes stripped.
std::string ask_counterfactual(ChatEndpoint& endpoint, const PromptTemplates& templates,
                               const ChatTranscript& classification, ChatTranscript* session_out = nullptr);

/// true iff the re-classified label differs; nullopt when the reply cannot be parsed.
std::optional<bool> validate_counterfactual(const faithfulness::TextClassifier& classify,
                                            std::string_view original_label, std::string_view counterfactual);

/// Fresh classification session per call.
faithfulness::TextClassifier endpoint_classifier(ChatEndpoint& endpoint, const PromptTemplates& templates,
                                                 const corpus::LabelSet& labels, bool strict = false);

struct SelfExplanationRecord {
  std::string text_id;
  std::string predicted_label;  // empty when classification failed
  std::size_t phrase_count = 0;
  std::vector<std::string> extractive_phrases;
  std::optional<std::string> counterfactual;
  std::optional<std::string> counterfactual_label;
  std::optional<bool> valid;
  ChatTranscript extractive_session;
  ChatTranscript counterfactual_session;
  std::vector<std::string> notes;  // leniencies and recoverable problems
  std::string failed_stage;        // classify | extractive | counterfactual | validate
  std::string error;

  bool classified() const { return !predicted_label.empty(); }
};

struct PipelineOptions {
  bool strict = false;
  bool counterfactuals = true;
  std::size_t workers = 4;
};

SelfExplanationRecord explain_text(ChatEndpoint& endpoint, const PromptTemplates& templates,
                                   const corpus::LabelSet& labels, const corpus::AnnotatedText& text,
                                   const PipelineOptions& options = {});

/// Runs explain_text over all texts on a worker pool; results keep input order.
std::vector<SelfExplanationRecord> run_pipeline(ChatEndpoint& endpoint, const PromptTemplates& templates,
                                                const corpus::LabelSet& labels,
                                                const std::vector<corpus::AnnotatedText>& texts,
                                                const PipelineOptions& options = {});

struct MockFixtureOptions {
  /// Counterfactuals that swap the decisive words for another class's words;
  /// the rest either echo the text or highlight the words in markdown.
  std::optional<std::size_t> flip_count;
  std::uint64_t seed = 0;
  /// Reply when no lexicon word is visible (e.g. fully masked text).
  std::optional<std::string> occluded_label;
};

/// Fixture JSON for a keyword-driven mock model over a synthetic corpus.
std::string synthetic_mock_fixture(corpus::Task task, const std::vector<corpus::AnnotatedText>& texts,
                                   const PromptTemplates& templates, const MockFixtureOptions& options = {});

}  // namespace xplain::selfexplain
