#include "xplain/selfexplain.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <thread>

#include <json.hpp>

#include "xplain/rng.hpp"
#include "xplain/tokenizer.hpp"

namespace xplain::selfexplain {

using chat::Role;
using nlohmann::json;

PromptTemplates PromptTemplates::sentiment() {
  return {
      "What is the sentiment of the following review?\n\"{text}\"\nAssign one of the following labels: {labels}. "
      "Make sure to answer only with the label.",
      "What is the most important phrase influencing your assessment? Provide only the phrase as a string.",
      "What are the {k} most important phrases influencing your assessment? Provide only the phrases as strings, "
      "one per line.",
      "Provide a version of the review that would flip your assessment while changing as few words in the "
      "original review as possible. Make sure to answer with only the new version.",
  };
}

PromptTemplates PromptTemplates::hazard() {
  return {
      "What is the hazard category of the following food recall title?\n\"{text}\"\nAssign one of the following "
      "labels: {labels}. Make sure to answer only with the label.",
      "What is the most important phrase influencing your assessment? Provide only the phrase as a string.",
      "What are the {k} most important phrases influencing your assessment? Provide only the phrases as strings, "
      "one per line.",
      "Provide a version of the title that would flip your assessment while changing as few words in the "
      "original title as possible. Make sure to answer with only the new version.",
  };
}

PromptTemplates PromptTemplates::for_task(corpus::Task task) {
  return task == corpus::Task::hazard ? hazard() : sentiment();
}

void PromptTemplates::validate() const {
  auto need = [](const std::string& t, std::string_view ph, std::string_view which) {
    if (t.find(ph) == std::string::npos)
      throw ConfigError("prompt template '" + std::string(which) + "' lacks placeholder " + std::string(ph));
  };
  need(classify, "{text}", "classify");
  need(classify, "{labels}", "classify");
  need(extractive_multi, "{k}", "extractive_multi");
  if (extractive_single.empty()) throw ConfigError("prompt template 'extractive_single' is empty");
  if (counterfactual.empty()) throw ConfigError("prompt template 'counterfactual' is empty");
}

std::string render(std::string_view tmpl, std::string_view text, std::string_view labels, std::size_t k) {
  std::string out;
  out.reserve(tmpl.size() + text.size());
  const std::string ks = std::to_string(k);
  for (std::size_t i = 0; i < tmpl.size();) {
    if (tmpl.compare(i, 6, "{text}") == 0) {
      out += text;
      i += 6;
    } else if (tmpl.compare(i, 8, "{labels}") == 0) {
      out += labels;
      i += 8;
    } else if (tmpl.compare(i, 3, "{k}") == 0) {
      out += ks;
      i += 3;
    } else {
      out += tmpl[i++];
    }
  }
  return out;
}

std::string format_labels(const corpus::LabelSet& labels) {
  std::string out;
  const auto n = labels.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (i > 0) out += (i + 1 == n) ? " or " : ", ";
    out += '"' + labels.at(i) + '"';
  }
  return out;
}

std::string display_label(std::string_view label) {
  std::string s(label);
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string collapse_ws(std::string_view s) {
  std::string out;
  bool space = false;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      space = !out.empty();
    } else {
      if (space) out += ' ';
      space = false;
      out += c;
    }
  }
  return out;
}

bool trim_char(unsigned char c) { return std::isspace(c) || std::ispunct(c); }

std::string_view trim_ws(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace

LabelParse parse_label_detail(std::string_view reply, const corpus::LabelSet& labels, bool strict) {
  std::string_view r = reply;
  while (!r.empty() && trim_char(static_cast<unsigned char>(r.front()))) r.remove_prefix(1);
  while (!r.empty() && trim_char(static_cast<unsigned char>(r.back()))) r.remove_suffix(1);
  const std::string norm = collapse_ws(lower(r));
  if (norm.empty()) throw ClassificationParseError("empty classification reply");

  for (const auto& l : labels.labels())
    if (norm == lower(l)) return {l, false};
  if (strict) throw ClassificationParseError("reply is not exactly a label: '" + std::string(reply) + "'");

  const std::string whole = collapse_ws(lower(reply));
  std::vector<std::string> hits;
  for (const auto& l : labels.labels())
    if (whole.find(lower(l)) != std::string::npos) hits.push_back(l);
  if (hits.size() == 1) return {hits.front(), true};
  throw ClassificationParseError((hits.empty() ? "no label in reply '" : "several labels in reply '") +
                                 std::string(reply) + "'");
}

std::string parse_label(std::string_view reply, const corpus::LabelSet& labels, bool strict) {
  return parse_label_detail(reply, labels, strict).label;
}

std::string strip_quotes(std::string_view s) {
  static const std::vector<std::pair<std::string_view, std::string_view>> pairs = {
      {"\"", "\""}, {"'", "'"}, {"\xE2\x80\x9C", "\xE2\x80\x9D"}, {"\xE2\x80\x98", "\xE2\x80\x99"}, {"``", "''"}};
  s = trim_ws(s);
  for (bool changed = true; changed;) {
    changed = false;
    for (const auto& [open, close] : pairs) {
      if (s.size() >= open.size() + close.size() && s.starts_with(open) && s.ends_with(close)) {
        s = trim_ws(s.substr(open.size(), s.size() - open.size() - close.size()));
        changed = true;
        break;
      }
    }
  }
  return std::string(s);
}

namespace {

std::string_view strip_list_marker(std::string_view line) {
  line = trim_ws(line);
  if (line.starts_with("- ") || line.starts_with("* ") || line.starts_with("\xE2\x80\xA2 ")) {
    line.remove_prefix(line.find(' ') + 1);
    return trim_ws(line);
  }
  std::size_t i = 0;
  while (i < line.size() && std::isdigit(static_cast<unsigned char>(line[i]))) ++i;
  if (i > 0 && i + 1 < line.size() && (line[i] == '.' || line[i] == ')') && line[i + 1] == ' ')
    return trim_ws(line.substr(i + 2));
  return line;
}

// Double-quoted segments of a line (straight or curly).
std::vector<std::string> quoted_segments(std::string_view line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    std::size_t open = std::string_view::npos, olen = 0;
    const auto straight = line.find('"', i);
    const auto curly = line.find("\xE2\x80\x9C", i);
    if (straight < curly) {
      open = straight;
      olen = 1;
    } else if (curly != std::string_view::npos) {
      open = curly;
      olen = 3;
    }
    if (open == std::string_view::npos) break;
    const auto close = olen == 1 ? line.find('"', open + 1) : line.find("\xE2\x80\x9D", open + 3);
    if (close == std::string_view::npos) break;
    out.emplace_back(trim_ws(line.substr(open + olen, close - open - olen)));
    i = close + olen;
  }
  return out;
}

}  // namespace

std::vector<std::string> parse_phrases(std::string_view reply, std::size_t k) {
  if (k == 0) throw std::invalid_argument("parse_phrases: k must be >= 1");
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start <= reply.size()) {
    auto end = reply.find('\n', start);
    if (end == std::string_view::npos) end = reply.size();
    const auto line = strip_list_marker(reply.substr(start, end - start));
    if (!line.empty()) lines.emplace_back(line);
    start = end + 1;
  }
  std::vector<std::string> phrases;
  if (lines.size() == 1) {
    if (auto segs = quoted_segments(lines.front()); segs.size() >= 2) {
      for (auto& s : segs)
        if (!s.empty()) phrases.push_back(std::move(s));
      lines.clear();
    }
  }
  for (const auto& l : lines)
    if (auto p = strip_quotes(l); !p.empty()) phrases.push_back(std::move(p));
  if (phrases.empty()) throw ExtractionParseError("no phrase in extractive reply");
  if (phrases.size() > k) phrases.resize(k);
  return phrases;
}

Classification ask_classification(ChatEndpoint& endpoint, const PromptTemplates& templates, std::string_view text,
                                  const corpus::LabelSet& labels, bool strict) {
  Classification c;
  c.transcript.endpoint_id = endpoint.id();
  c.transcript.add(Role::user, render(templates.classify, text, format_labels(labels)));
  const auto reply = endpoint.chat(c.transcript);
  c.transcript.add(Role::assistant, reply);
  const auto parsed = parse_label_detail(reply, labels, strict);
  c.label = parsed.label;
  c.lenient = parsed.lenient;
  return c;
}

std::vector<std::string> ask_extractive(ChatEndpoint& endpoint, const PromptTemplates& templates,
                                        ChatTranscript& session, std::size_t k) {
  if (k == 0) throw std::invalid_argument("ask_extractive: k must be >= 1");
  if (session.messages.empty() || session.last().role != Role::assistant)
    throw std::invalid_argument("ask_extractive: session must end with the classification reply");
  session.add(Role::user, k == 1 ? templates.extractive_single : render(templates.extractive_multi, "", "", k));
  const auto reply = endpoint.chat(session);
  session.add(Role::assistant, reply);
  return parse_phrases(reply, k);
}

std::string ask_counterfactual(ChatEndpoint& endpoint, const PromptTemplates& templates,
                               const ChatTranscript& classification, ChatTranscript* session_out) {
  if (classification.messages.size() < 2 || classification.messages[1].role != Role::assistant)
    throw std::invalid_argument("ask_counterfactual: needs a completed classification exchange");
  ChatTranscript session;
  session.endpoint_id = endpoint.id();
  session.messages.assign(classification.messages.begin(), classification.messages.begin() + 2);
  session.add(Role::user, templates.counterfactual);
  const auto reply = endpoint.chat(session);
  session.add(Role::assistant, reply);
  if (session_out) *session_out = session;
  auto text = strip_quotes(reply);
  if (text.empty()) throw chat::ProtocolError("empty counterfactual reply");
  return text;
}

std::optional<bool> validate_counterfactual(const faithfulness::TextClassifier& classify,
                                            std::string_view original_label, std::string_view counterfactual) {
  try {
    return classify(std::string(counterfactual)) != original_label;
  } catch (const ClassificationParseError&) {
    return std::nullopt;
  }
}

faithfulness::TextClassifier endpoint_classifier(ChatEndpoint& endpoint, const PromptTemplates& templates,
                                                 const corpus::LabelSet& labels, bool strict) {
  return [&endpoint, templates, labels, strict](const std::string& text) {
    return ask_classification(endpoint, templates, text, labels, strict).label;
  };
}

SelfExplanationRecord explain_text(ChatEndpoint& endpoint, const PromptTemplates& templates,
                                   const corpus::LabelSet& labels, const corpus::AnnotatedText& text,
                                   const PipelineOptions& options) {
  SelfExplanationRecord rec;
  rec.text_id = text.id;
  rec.phrase_count = text.spans.size();
  const char* stage = "classify";
  try {
    auto c = ask_classification(endpoint, templates, text.text, labels, options.strict);
    rec.predicted_label = c.label;
    if (c.lenient) rec.notes.push_back("classify: label taken from substring of '" + c.transcript.last().content + "'");

    stage = "extractive";
    rec.extractive_session = c.transcript;
    if (rec.phrase_count == 0) {
      rec.notes.push_back("extractive: no human spans, nothing requested");
    } else {
      rec.extractive_phrases = ask_extractive(endpoint, templates, rec.extractive_session, rec.phrase_count);
      if (rec.extractive_phrases.size() < rec.phrase_count)
        rec.notes.push_back("extractive: " + std::to_string(rec.extractive_phrases.size()) + " of " +
                            std::to_string(rec.phrase_count) + " phrases returned");
      const auto& raw = rec.extractive_session.last().content;
      if (rec.extractive_phrases.size() == 1 && rec.extractive_phrases.front() != trim_ws(raw))
        rec.notes.push_back("extractive: quotes or list markers stripped");
    }

    if (options.counterfactuals) {
      stage = "counterfactual";
      rec.counterfactual = ask_counterfactual(endpoint, templates, c.transcript, &rec.counterfactual_session);
      stage = "validate";
      auto classify = endpoint_classifier(endpoint, templates, labels, options.strict);
      try {
        rec.counterfactual_label = classify(*rec.counterfactual);
        rec.valid = *rec.counterfactual_label != rec.predicted_label;
      } catch (const ClassificationParseError& e) {
        rec.notes.push_back(std::string("validate: ") + e.what());
      }
    }
  } catch (const std::exception& e) {
    rec.failed_stage = stage;
    rec.error = e.what();
  }
  return rec;
}

std::vector<SelfExplanationRecord> run_pipeline(ChatEndpoint& endpoint, const PromptTemplates& templates,
                                                const corpus::LabelSet& labels,
                                                const std::vector<corpus::AnnotatedText>& texts,
                                                const PipelineOptions& options) {
  std::vector<SelfExplanationRecord> out(texts.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < texts.size();)
      out[i] = explain_text(endpoint, templates, labels, texts[i], options);
  };
  const auto n = std::clamp<std::size_t>(options.workers, 1, std::max<std::size_t>(texts.size(), 1));
  std::vector<std::jthread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(work);
  work();
  return out;
}

std::string synthetic_mock_fixture(corpus::Task task, const std::vector<corpus::AnnotatedText>& texts,
                                   const PromptTemplates& templates, const MockFixtureOptions& options) {
  const auto labels = corpus::labels_for(task);
  const auto& lex = corpus::lexicon(task);

  json table = json::object();
  for (const auto& [label, words] : lex)
    for (const auto& w : words) table[w] = display_label(label);
  const std::string occluded = options.occluded_label ? *options.occluded_label : labels.at(0);

  json rules = json::array();
  rules.push_back({{"match", {{"n_messages", 1}}},
                   {"keyword_reply", {{"table", table}, {"scope", "quoted"}, {"default", display_label(occluded)}}}});

  std::vector<std::size_t> order(texts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(options.seed);
  shuffle(std::span(order), rng);
  const std::size_t flips = std::min(options.flip_count.value_or(texts.size()), texts.size());
  std::vector<bool> flip(texts.size(), false);
  for (std::size_t i = 0; i < flips; ++i) flip[order[i]] = true;

  std::size_t non_flip = 0;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const auto& t = texts[i];
    const std::string quoted = "\"" + t.text + "\"";

    std::vector<std::string> phrases;
    for (const auto& s : t.spans) phrases.push_back(t.text.substr(s.start, s.end - s.start));
    if (!phrases.empty()) {
      std::string reply;
      for (const auto& p : phrases) reply += (reply.empty() ? "\"" : "\n\"") + p + "\"";
      const auto prompt = phrases.size() == 1 ? templates.extractive_single
                                              : render(templates.extractive_multi, "", "", phrases.size());
      rules.push_back({{"match", {{"n_messages", 3}, {"last_user_contains", {prompt}}, {"any_contains", {quoted}}}},
                       {"reply", reply}});
    }

    // Rebuild the text span by span.
    std::string cf;
    std::size_t pos = 0;
    const bool echo = !flip[i] && (non_flip++ % 2 == 1);
    for (const auto& s : t.spans) {
      cf += t.text.substr(pos, s.start - pos);
      const auto word = t.text.substr(s.start, s.end - s.start);
      if (flip[i]) {
        const auto li = labels.require_index(t.label);
        const auto& other = lex.at(labels.at((li + 1) % labels.size()));
        const auto& own = lex.at(t.label);
        const auto wi = static_cast<std::size_t>(
            std::find(own.begin(), own.end(), lower(word)) - own.begin());
        cf += other[wi % other.size()];
      } else if (echo) {
        cf += word;
      } else {
        cf += "**" + word + "**";
      }
      pos = s.end;
    }
    cf += t.text.substr(pos);
    rules.push_back({{"match",
                      {{"n_messages", 3}, {"last_user_contains", {templates.counterfactual}}, {"any_contains", {quoted}}}},
                     {"reply", cf}});
  }
  json fixture{{"rules", rules}, {"default", {{"status", 404}, {"body", "no matching mock rule"}}}};
  return fixture.dump(1);
}

}  // namespace xplain::selfexplain
