#include "xplain/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "xplain/errors.hpp"
#include "xplain/rng.hpp"

namespace xplain::corpus {

using nlohmann::json;

LabelSet::LabelSet(std::vector<std::string> labels) : labels_(std::move(labels)) {
  if (labels_.empty()) throw ValidationError("label set must not be empty");
  for (const auto& l : labels_) {
    std::string tok = "<label:";
    for (char c : l) tok += (c == ' ') ? '_' : c;
    tok += '>';
    if (std::find(tokens_.begin(), tokens_.end(), tok) != tokens_.end())
      throw ValidationError("duplicate label (or label token) '" + l + "'");
    tokens_.push_back(std::move(tok));
  }
}

std::optional<std::size_t> LabelSet::index_of(std::string_view label) const {
  for (std::size_t i = 0; i < labels_.size(); ++i)
    if (labels_[i] == label) return i;
  return std::nullopt;
}

std::size_t LabelSet::require_index(std::string_view label) const {
  if (auto i = index_of(label)) return *i;
  throw ValidationError("unknown label '" + std::string(label) + "'");
}

const std::string& LabelSet::token_of(std::string_view label) const { return tokens_[require_index(label)]; }

Task parse_task(std::string_view name) {
  if (name == "hazard") return Task::hazard;
  if (name == "polarity") return Task::polarity;
  throw ConfigError("unknown task '" + std::string(name) + "' (expected hazard or polarity)");
}

std::string_view task_name(Task task) { return task == Task::hazard ? "hazard" : "polarity"; }

namespace {

struct ClassSpec {
  std::string label;
  int weight;
  std::vector<std::string> words;
};

const std::vector<ClassSpec>& hazard_classes() {
  static const std::vector<ClassSpec> classes = {
      {"biological", 77, {"salmonella", "listeria", "norovirus", "botulism", "campylobacter", "mould"}},
      {"allergens", 53, {"peanuts", "sesame", "gluten", "soy", "mustard", "celery"}},
      {"chemical", 29, {"pesticides", "mercury", "cadmium", "dioxins", "benzene", "arsenic"}},
      {"foreign bodies", 20, {"glass", "metal", "plastic", "stones", "rubber", "splinters"}},
      {"organoleptic aspects", 12, {"odour", "discolouration", "rancidity", "staleness", "bitterness", "sliminess"}},
      {"fraud", 9, {"mislabelling", "adulteration", "counterfeiting", "misbranding", "substitution", "forgery"}},
  };
  return classes;
}

const std::vector<ClassSpec>& polarity_classes() {
  static const std::vector<ClassSpec> classes = {
      {"negative", 1, {"awful", "boring", "dull", "terrible", "clumsy", "tedious", "bland", "painful"}},
      {"positive", 1, {"great", "wonderful", "brilliant", "superb", "delightful", "moving", "charming", "gripping"}},
  };
  return classes;
}

const std::vector<ClassSpec>& classes_for(Task task) {
  return task == Task::hazard ? hazard_classes() : polarity_classes();
}

const std::vector<std::string> kBrands = {"Acme",      "Bellfield", "Northway", "Greenvale",
                                          "Sunridge",  "Oakmont",   "Riverbend", "Harbor Farms"};
const std::vector<std::string> kProducts = {"cheese",        "sausages",   "crackers",    "chocolate bars",
                                            "frozen pizza",  "baby food",  "smoked salmon", "granola",
                                            "ice cream",     "canned tuna", "noodles",    "biscuits"};

// {b} brand, {p} product, {t} hazard term.
const std::vector<std::string> kHazardTemplates = {
    "{b} recalls {p} due to {t}",
    "{b} {p} recalled because of {t}",
    "Recall of {p} from {b} over {t} concerns",
    "{t} detected in {p} sold by {b}",
    "{b} issues recall for {p} after {t} found",
};

// {a} marks one sentiment slot.
const std::vector<std::string> kNeutralSentences = {
    "The film runs for almost two hours.",
    "It was shown at the festival last spring.",
    "The story follows a family in a small town.",
    "Most of it was shot on location.",
};
const std::vector<std::string> kSingleSentences = {
    "The acting is {a}.",
    "I thought the soundtrack was {a}.",
    "Overall the result feels {a}.",
    "The script is {a} from start to finish.",
};
const std::vector<std::string> kDoubleSentences = {
    "The plot is {a} and the ending is {a}.",
    "The camera work is {a}, and the dialogue is {a}.",
};

template <typename T>
const T& pick(const std::vector<T>& items, Rng& rng) {
  return items[static_cast<std::size_t>(uniform_index(rng, items.size()))];
}

// Largest-remainder apportionment of n items over integer weights.
std::vector<std::size_t> apportion(std::size_t n, const std::vector<ClassSpec>& classes) {
  const double total = std::accumulate(classes.begin(), classes.end(), 0.0,
                                       [](double s, const ClassSpec& c) { return s + c.weight; });
  std::vector<std::size_t> counts(classes.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const double exact = static_cast<double>(n) * classes[i].weight / total;
    counts[i] = static_cast<std::size_t>(exact);
    assigned += counts[i];
    remainders.emplace_back(exact - static_cast<double>(counts[i]), i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++counts[remainders[k % remainders.size()].second];
  return counts;
}

// Appends literal text and slot fillers while recording the filler spans.
class TextBuilder {
 public:
  void literal(std::string_view s) { text_ += s; }
  void planted(std::string_view word) {
    const std::size_t start = text_.size();
    text_ += word;
    spans_.push_back({start, text_.size()});
  }
  std::string text_;
  std::vector<CharSpan> spans_;
};

// Expands a template; `fill(slot)` returns the replacement and whether it is planted.
template <typename Fill>
void expand(TextBuilder& out, std::string_view tmpl, Fill&& fill) {
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i);
      const auto slot = tmpl.substr(i + 1, close - i - 1);
      auto [value, is_planted] = fill(slot, i == 0 && out.text_.empty());
      if (is_planted)
        out.planted(value);
      else
        out.literal(value);
      i = close + 1;
    } else {
      out.literal(tmpl.substr(i, 1));
      ++i;
    }
  }
}

std::string capitalize(std::string s) {
  if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

std::string make_id(Task task, std::uint64_t seed, std::size_t i) {
  std::ostringstream os;
  os << task_name(task) << '-' << seed << '-';
  os.width(4);
  os.fill('0');
  os << i;
  return os.str();
}

AnnotatedText make_hazard(const ClassSpec& cls, const std::string& term, Rng& rng) {
  const auto tmpl_index = static_cast<std::size_t>(uniform_index(rng, kHazardTemplates.size()));
  const auto& brand = pick(kBrands, rng);
  const auto& product = pick(kProducts, rng);
  TextBuilder b;
  expand(b, kHazardTemplates[tmpl_index], [&](std::string_view slot, bool at_start) -> std::pair<std::string, bool> {
    if (slot == "b") return {brand, false};
    if (slot == "p") return {product, false};
    return {at_start ? capitalize(term) : term, true};
  });
  AnnotatedText rec;
  rec.text = std::move(b.text_);
  rec.spans = std::move(b.spans_);
  rec.label = cls.label;
  rec.meta["template"] = std::to_string(tmpl_index);
  return rec;
}

AnnotatedText make_polarity(const ClassSpec& cls, Rng& rng) {
  const auto n_sentences = 1 + static_cast<std::size_t>(uniform_index(rng, 3));
  std::vector<std::string> sentences;
  std::size_t slots = 0;
  for (std::size_t s = 0; s < n_sentences; ++s) {
    const auto kind = uniform_index(rng, 3);  // number of sentiment words: 0, 1 or 2
    const auto& pool = kind == 0 ? kNeutralSentences : (kind == 1 ? kSingleSentences : kDoubleSentences);
    sentences.push_back(pick(pool, rng));
    slots += kind;
  }
  if (slots == 0) sentences.back() = pick(kSingleSentences, rng);

  TextBuilder b;
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    if (s > 0) b.literal(" ");
    expand(b, sentences[s], [&](std::string_view, bool) -> std::pair<std::string, bool> {
      return {pick(cls.words, rng), true};
    });
  }
  AnnotatedText rec;
  rec.text = std::move(b.text_);
  rec.spans = std::move(b.spans_);
  rec.label = cls.label;
  rec.meta["sentences"] = std::to_string(sentences.size());
  return rec;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out)
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  return out;
}

}  // namespace

LabelSet labels_for(Task task) {
  std::vector<std::string> names;
  for (const auto& c : classes_for(task)) names.push_back(c.label);
  return LabelSet(std::move(names));
}

const std::map<std::string, std::vector<std::string>>& lexicon(Task task) {
  static const auto build = [](Task t) {
    std::map<std::string, std::vector<std::string>> m;
    for (const auto& c : classes_for(t)) m[c.label] = c.words;
    return m;
  };
  static const auto hazard = build(Task::hazard);
  static const auto polarity = build(Task::polarity);
  return task == Task::hazard ? hazard : polarity;
}

std::optional<std::string> lexicon_label(Task task, std::string_view word) {
  const auto w = lower(word);
  for (const auto& c : classes_for(task))
    if (std::find(c.words.begin(), c.words.end(), w) != c.words.end()) return c.label;
  return std::nullopt;
}

std::optional<std::string> label_from_spans(Task task, const AnnotatedText& record) {
  std::optional<std::string> label;
  for (const auto& s : record.spans) {
    auto l = lexicon_label(task, std::string_view(record.text).substr(s.start, s.end - s.start));
    if (!l) return std::nullopt;
    if (label && *label != *l) return std::nullopt;
    label = l;
  }
  return label;
}

std::vector<AnnotatedText> gen_synthetic(Task task, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("gen_synthetic: n must be > 0");
  Rng rng(seed);
  const auto& classes = classes_for(task);
  const auto counts = apportion(n, classes);

  std::vector<std::size_t> class_of;
  for (std::size_t c = 0; c < classes.size(); ++c) class_of.insert(class_of.end(), counts[c], c);
  shuffle(std::span(class_of), rng);

  // Hazard terms cycle through a per-class shuffled order so every term of a
  // rare class still appears.
  std::vector<std::vector<std::string>> term_order;
  for (const auto& c : classes) {
    auto words = c.words;
    shuffle(std::span(words), rng);
    term_order.push_back(std::move(words));
  }
  std::vector<std::size_t> used(classes.size(), 0);

  std::vector<AnnotatedText> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = class_of[i];
    AnnotatedText rec;
    if (task == Task::hazard) {
      const auto& terms = term_order[c];
      rec = make_hazard(classes[c], terms[used[c]++ % terms.size()], rng);
    } else {
      rec = make_polarity(classes[c], rng);
    }
    rec.id = make_id(task, seed, i);
    rec.meta["source"] = "synthetic";
    rec.meta["task"] = std::string(task_name(task));
    out.push_back(std::move(rec));
  }
  return out;
}

void validate(const AnnotatedText& record, const LabelSet& labels) {
  if (!labels.contains(record.label))
    throw ValidationError("record '" + record.id + "': unknown label '" + record.label + "'");
  auto sorted = record.spans;
  std::sort(sorted.begin(), sorted.end(), [](const CharSpan& a, const CharSpan& b) { return a.start < b.start; });
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const auto& s = sorted[i];
    if (s.start >= s.end || s.end > record.text.size())
      throw ValidationError("record '" + record.id + "': span [" + std::to_string(s.start) + ", " +
                            std::to_string(s.end) + ") out of bounds for text of length " +
                            std::to_string(record.text.size()));
    if (i > 0 && sorted[i - 1].end > s.start)
      throw ValidationError("record '" + record.id + "': overlapping spans");
  }
}

namespace {

AnnotatedText from_json(const json& j) {
  AnnotatedText rec;
  rec.id = j.at("id").get<std::string>();
  rec.text = j.at("text").get<std::string>();
  rec.label = j.at("label").get<std::string>();
  for (const auto& s : j.at("spans")) {
    if (!s.is_array() || s.size() != 2) throw ParseError("span must be a [start, end] pair");
    const auto a = s[0].get<long long>();
    const auto b = s[1].get<long long>();
    if (a < 0 || b < 0)
      throw ValidationError("record '" + rec.id + "': negative span offset");
    rec.spans.push_back({static_cast<std::size_t>(a), static_cast<std::size_t>(b)});
  }
  if (auto it = j.find("meta"); it != j.end() && !it->is_null()) {
    for (const auto& [k, v] : it->items()) rec.meta[k] = v.is_string() ? v.get<std::string>() : v.dump();
  }
  return rec;
}

json to_json(const AnnotatedText& rec) {
  json spans = json::array();
  for (const auto& s : rec.spans) spans.push_back({s.start, s.end});
  json meta = json::object();
  for (const auto& [k, v] : rec.meta) meta[k] = v;
  return json{{"id", rec.id}, {"text", rec.text}, {"label", rec.label}, {"spans", spans}, {"meta", meta}};
}

}  // namespace

std::vector<AnnotatedText> parse_jsonl(std::string_view content, const LabelSet& labels) {
  std::vector<AnnotatedText> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < content.size()) {
    auto nl = content.find('\n', pos);
    if (nl == std::string_view::npos) nl = content.size();
    auto line = content.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    AnnotatedText rec;
    try {
      rec = from_json(json::parse(line));
    } catch (const json::exception& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    }
    validate(rec, labels);
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<AnnotatedText> load_jsonl(const std::filesystem::path& path, const LabelSet& labels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open corpus file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_jsonl(ss.str(), labels);
}

std::string to_jsonl(const std::vector<AnnotatedText>& records) {
  std::string out;
  for (const auto& r : records) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

void save_jsonl(const std::filesystem::path& path, const std::vector<AnnotatedText>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << to_jsonl(records);
}

}  // namespace xplain::corpus
