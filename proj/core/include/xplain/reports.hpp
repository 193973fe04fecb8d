#pragma once

// Report tables shared by the run pipeline and the stage-rerun subcommands.
// Every builder is a pure function of its inputs, so recomputing a table from
// the saved upstream CSV yields the same bytes.

#include <optional>
#include <string>
#include <vector>

#include "xplain/csv.hpp"
#include "xplain/faithfulness.hpp"
#include "xplain/saliency_map.hpp"
#include "xplain/textsim.hpp"

namespace xplain::reports {

/// All maps computed for one text, in method order.
struct TextMaps {
  std::string text_id;
  std::vector<SaliencyMap> maps;

  const SaliencyMap* find(std::string_view method) const;
};

// saliency.csv: text_id, method, token_index, token, start, end, weight
csv::Writer saliency_table(const std::vector<TextMaps>& texts);
std::vector<TextMaps> read_saliency(const csv::Table& table);

struct CorrelationResult {
  csv::Writer table{{"text_id", "method_a", "method_b", "r", "excluded"}};
  std::size_t pairs = 0;
  std::size_t excluded_pairs = 0;  // pairs with a constant map on either side
  std::size_t constant_maps = 0;   // maps left out of every pair
};

/// One row per text and method pair (a before b in `methods`). Constant maps
/// have no defined correlation; their pairs get an empty r and excluded = 1.
CorrelationResult correlations(const std::vector<TextMaps>& texts, const std::vector<std::string>& methods);

// curves.csv: text_id, method, direction, step_fraction, label, flipped, complete
csv::Writer curves_table(const std::vector<faithfulness::PerturbationCurve>& curves);
std::vector<faithfulness::PerturbationCurve> read_curves(const csv::Table& table);

// aggregate.csv: method, direction, step_fraction, flip_fraction, curves
csv::Writer aggregate_table(const faithfulness::Aggregate& agg);
// occluded.csv: method, label, count
csv::Writer occluded_table(const faithfulness::Aggregate& agg);

struct CounterfactualRow {
  std::string text_id;
  std::string endpoint;
  std::string task;
  std::string original_label;
  std::string counterfactual_label;  // empty when re-classification failed
  std::optional<bool> valid;
  textsim::Scores scores;
  std::size_t changed_tokens = 0;
  std::string counterfactual;
};

// counterfactuals.csv: one row per generated counterfactual.
csv::Writer counterfactuals_table(const std::vector<CounterfactualRow>& rows);
std::vector<CounterfactualRow> read_counterfactuals(const csv::Table& table);

struct CounterfactualSummary {
  std::string endpoint;
  std::string task;
  std::size_t generated = 0;
  std::size_t judged = 0;  // validity known
  std::size_t valid = 0;
  double validity_rate = 0.0;  // valid / judged
  textsim::Scores mean;        // over valid counterfactuals only
};

/// Groups by (endpoint, task) in first-appearance order.
std::vector<CounterfactualSummary> summarize(const std::vector<CounterfactualRow>& rows);
// counterfactual_report.csv: model_or_endpoint, task, validity_rate, valid,
// judged, match_ratio, rouge1, bleu1, rougeL, semantic_similarity (left empty)
csv::Writer counterfactual_report_table(const std::vector<CounterfactualSummary>& summaries);

/// Macro-averaged F1 over the labels occurring in gold or predicted.
double macro_f1(const std::vector<std::string>& gold, const std::vector<std::string>& predicted);

}  // namespace xplain::reports
