#include "xplain/reports.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <set>

#include "xplain/errors.hpp"
#include "xplain/saliency.hpp"

namespace xplain::reports {

namespace {

std::size_t to_size(const std::string& s) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ParseError("csv: not an unsigned integer: '" + s + "'");
  }
}

double to_double(const std::string& s) {
  // from_chars, unlike stod, accepts subnormals.
  double v = 0.0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || s.empty())
    throw ParseError("csv: not a number: '" + s + "'");
  return v;
}

bool to_bool(const std::string& s) {
  if (s == "1") return true;
  if (s == "0") return false;
  throw ParseError("csv: expected 0 or 1, got '" + s + "'");
}

std::string flag(bool b) { return b ? "1" : "0"; }

}  // namespace

const SaliencyMap* TextMaps::find(std::string_view method) const {
  for (const auto& m : maps)
    if (m.method == method) return &m;
  return nullptr;
}

csv::Writer saliency_table(const std::vector<TextMaps>& texts) {
  csv::Writer w({"text_id", "method", "token_index", "token", "start", "end", "weight"});
  for (const auto& t : texts)
    for (const auto& m : t.maps)
      for (std::size_t i = 0; i < m.size(); ++i)
        w.row({t.text_id, m.method, std::to_string(i), m.token_seq.tokens[i],
               std::to_string(m.token_seq.offsets[i].start), std::to_string(m.token_seq.offsets[i].end),
               csv::number(m.weights[i])});
  return w;
}

std::vector<TextMaps> read_saliency(const csv::Table& table) {
  const auto c_id = table.column("text_id"), c_m = table.column("method"), c_i = table.column("token_index"),
             c_tok = table.column("token"), c_s = table.column("start"), c_e = table.column("end"),
             c_w = table.column("weight");
  std::vector<TextMaps> out;
  for (const auto& r : table.rows) {
    if (out.empty() || out.back().text_id != r[c_id]) out.push_back({r[c_id], {}});
    auto& maps = out.back().maps;
    if (maps.empty() || maps.back().method != r[c_m]) {
      SaliencyMap m;
      m.method = r[c_m];
      m.normalized = true;
      m.token_seq.vocab_id = std::string(kTokenizerId);
      maps.push_back(std::move(m));
    }
    auto& m = maps.back();
    if (to_size(r[c_i]) != m.size())
      throw ParseError("saliency csv: token_index out of sequence for " + r[c_id] + "/" + r[c_m]);
    m.token_seq.tokens.push_back(r[c_tok]);
    m.token_seq.offsets.push_back({to_size(r[c_s]), to_size(r[c_e])});
    m.weights.push_back(to_double(r[c_w]));
  }
  return out;
}

CorrelationResult correlations(const std::vector<TextMaps>& texts, const std::vector<std::string>& methods) {
  CorrelationResult res;
  for (const auto& t : texts) {
    std::vector<const SaliencyMap*> present;
    for (const auto& m : methods)
      if (const auto* p = t.find(m)) {
        present.push_back(p);
        if (saliency::is_constant(p->weights)) ++res.constant_maps;
      }
    for (std::size_t a = 0; a < present.size(); ++a)
      for (std::size_t b = a + 1; b < present.size(); ++b) {
        ++res.pairs;
        try {
          const double r = saliency::pearson(*present[a], *present[b]);
          res.table.row({t.text_id, present[a]->method, present[b]->method, csv::number(r), "0"});
        } catch (const saliency::UndefinedCorrelation&) {
          ++res.excluded_pairs;
          res.table.row({t.text_id, present[a]->method, present[b]->method, "", "1"});
        }
      }
  }
  return res;
}

csv::Writer curves_table(const std::vector<faithfulness::PerturbationCurve>& curves) {
  csv::Writer w({"text_id", "method", "direction", "step_fraction", "label", "flipped", "complete"});
  for (const auto& c : curves) {
    const auto dir = std::string(faithfulness::direction_name(c.direction));
    for (const auto& s : c.steps)
      w.row({c.text_id, c.method, dir, csv::number(s.fraction), s.label, flag(s.flipped), flag(c.complete)});
    if (c.steps.empty()) w.row({c.text_id, c.method, dir, "", "", "0", "0"});
  }
  return w;
}

std::vector<faithfulness::PerturbationCurve> read_curves(const csv::Table& table) {
  const auto c_id = table.column("text_id"), c_m = table.column("method"), c_d = table.column("direction"),
             c_f = table.column("step_fraction"), c_l = table.column("label"), c_fl = table.column("flipped"),
             c_c = table.column("complete");
  std::vector<faithfulness::PerturbationCurve> out;
  for (const auto& r : table.rows) {
    const auto dir = faithfulness::parse_direction(r[c_d]);
    if (out.empty() || out.back().text_id != r[c_id] || out.back().method != r[c_m] || out.back().direction != dir) {
      faithfulness::PerturbationCurve c;
      c.text_id = r[c_id];
      c.method = r[c_m];
      c.direction = dir;
      c.complete = to_bool(r[c_c]);
      out.push_back(std::move(c));
    }
    if (!r[c_f].empty()) out.back().steps.push_back({to_double(r[c_f]), r[c_l], to_bool(r[c_fl])});
  }
  return out;
}

csv::Writer aggregate_table(const faithfulness::Aggregate& agg) {
  csv::Writer w({"method", "direction", "step_fraction", "flip_fraction", "curves"});
  for (const auto& r : agg.rows)
    w.row({r.method, std::string(faithfulness::direction_name(r.direction)), csv::number(r.fraction),
           csv::number(r.flip_fraction), std::to_string(r.curves)});
  return w;
}

csv::Writer occluded_table(const faithfulness::Aggregate& agg) {
  csv::Writer w({"method", "label", "count"});
  for (const auto& [method, hist] : agg.occluded)
    for (const auto& [label, count] : hist) w.row({method, label, std::to_string(count)});
  return w;
}

csv::Writer counterfactuals_table(const std::vector<CounterfactualRow>& rows) {
  csv::Writer w({"text_id", "endpoint", "task", "original_label", "counterfactual_label", "valid", "match_ratio",
                 "rouge1", "bleu1", "rougeL", "changed_tokens", "counterfactual"});
  for (const auto& r : rows)
    w.row({r.text_id, r.endpoint, r.task, r.original_label, r.counterfactual_label,
           r.valid ? flag(*r.valid) : "", csv::number(r.scores.match_ratio), csv::number(r.scores.rouge1),
           csv::number(r.scores.bleu1), csv::number(r.scores.rouge_l), std::to_string(r.changed_tokens),
           r.counterfactual});
  return w;
}

std::vector<CounterfactualRow> read_counterfactuals(const csv::Table& table) {
  const auto c = [&](const char* n) { return table.column(n); };
  const auto c_id = c("text_id"), c_ep = c("endpoint"), c_t = c("task"), c_ol = c("original_label"),
             c_cl = c("counterfactual_label"), c_v = c("valid"), c_mr = c("match_ratio"), c_r1 = c("rouge1"),
             c_b1 = c("bleu1"), c_rl = c("rougeL"), c_ch = c("changed_tokens"), c_cf = c("counterfactual");
  std::vector<CounterfactualRow> out;
  for (const auto& r : table.rows) {
    CounterfactualRow row;
    row.text_id = r[c_id];
    row.endpoint = r[c_ep];
    row.task = r[c_t];
    row.original_label = r[c_ol];
    row.counterfactual_label = r[c_cl];
    if (!r[c_v].empty()) row.valid = to_bool(r[c_v]);
    row.scores = {to_double(r[c_mr]), to_double(r[c_r1]), to_double(r[c_b1]), to_double(r[c_rl])};
    row.changed_tokens = to_size(r[c_ch]);
    row.counterfactual = r[c_cf];
    out.push_back(std::move(row));
  }
  return out;
}

std::vector<CounterfactualSummary> summarize(const std::vector<CounterfactualRow>& rows) {
  std::vector<CounterfactualSummary> out;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(),
                           [&](const auto& s) { return s.endpoint == r.endpoint && s.task == r.task; });
    if (it == out.end()) {
      out.push_back({r.endpoint, r.task, 0, 0, 0, 0.0, {}});
      it = out.end() - 1;
    }
    ++it->generated;
    if (!r.valid) continue;
    ++it->judged;
    if (!*r.valid) continue;
    ++it->valid;
    it->mean.match_ratio += r.scores.match_ratio;
    it->mean.rouge1 += r.scores.rouge1;
    it->mean.bleu1 += r.scores.bleu1;
    it->mean.rouge_l += r.scores.rouge_l;
  }
  for (auto& s : out) {
    s.validity_rate = s.judged ? static_cast<double>(s.valid) / static_cast<double>(s.judged) : 0.0;
    if (s.valid) {
      const double n = static_cast<double>(s.valid);
      s.mean = {s.mean.match_ratio / n, s.mean.rouge1 / n, s.mean.bleu1 / n, s.mean.rouge_l / n};
    }
  }
  return out;
}

csv::Writer counterfactual_report_table(const std::vector<CounterfactualSummary>& summaries) {
  csv::Writer w({"model_or_endpoint", "task", "validity_rate", "valid", "judged", "match_ratio", "rouge1", "bleu1",
                 "rougeL", "semantic_similarity"});
  for (const auto& s : summaries) {
    const bool any = s.valid > 0;
    auto score = [&](double v) { return any ? csv::number(v) : std::string(); };
    w.row({s.endpoint, s.task, csv::number(s.validity_rate), std::to_string(s.valid), std::to_string(s.judged),
           score(s.mean.match_ratio), score(s.mean.rouge1), score(s.mean.bleu1), score(s.mean.rouge_l), ""});
  }
  return w;
}

double macro_f1(const std::vector<std::string>& gold, const std::vector<std::string>& predicted) {
  if (gold.size() != predicted.size()) throw std::invalid_argument("macro_f1: length mismatch");
  if (gold.empty()) throw std::invalid_argument("macro_f1: no examples");
  std::set<std::string> labels(gold.begin(), gold.end());
  labels.insert(predicted.begin(), predicted.end());
  double total = 0.0;
  for (const auto& l : labels) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
      const bool g = gold[i] == l, p = predicted[i] == l;
      tp += g && p;
      fp += !g && p;
      fn += g && !p;
    }
    const double denom = 2.0 * tp + fp + fn;
    total += denom > 0 ? 2.0 * tp / denom : 0.0;
  }
  return total / static_cast<double>(labels.size());
}

}  // namespace xplain::reports
