#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "xplain/csv.hpp"
#include "xplain/errors.hpp"
#include "xplain/reports.hpp"

using namespace xplain;
using namespace xplain::reports;

TEST(Csv, QuotingOnlyWhenNeeded) {
  EXPECT_EQ(csv::escape("plain"), "plain");
  EXPECT_EQ(csv::escape("a,b"), "\"a,b\"");
  EXPECT_EQ(csv::escape("say \"hi\""), "\"say \"\"hi\"\"\"");
  EXPECT_EQ(csv::escape("two\nlines"), "\"two\nlines\"");
  EXPECT_EQ(csv::join({"a", "b,c", ""}), "a,\"b,c\",");
}

TEST(Csv, RoundTrip) {
  csv::Writer w({"id", "text", "x"});
  w.row({"1", "Alas, \"these\" are\nonly hints.", csv::number(0.1)});
  w.row({"2", "", csv::number(std::numeric_limits<double>::quiet_NaN())});
  const auto t = csv::parse(w.str());
  ASSERT_EQ(t.header, (std::vector<std::string>{"id", "text", "x"}));
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[0][1], "Alas, \"these\" are\nonly hints.");
  EXPECT_EQ(std::stod(t.rows[0][2]), 0.1);
  EXPECT_EQ(t.rows[1][2], "nan");
  EXPECT_EQ(t.column("x"), 2u);
  EXPECT_THROW(t.column("y"), ParseError);
}

TEST(Csv, NumbersRoundTripExactly) {
  for (double v : {1.0 / 3, 1e-9 / 7, 123456.789, -0.0, 5e-324})
    EXPECT_EQ(std::strtod(csv::number(v).c_str(), nullptr), v);
}

TEST(Csv, ParseErrors) {
  EXPECT_THROW(csv::parse("a,b\n1\n"), ParseError);
  EXPECT_THROW(csv::parse("a\n\"open\n"), ParseError);
  EXPECT_THROW(csv::Writer({"a"}).row({"1", "2"}), std::logic_error);
}

namespace {

TextMaps text_maps(const std::string& id, const std::string& text,
                   const std::vector<std::pair<std::string, std::vector<double>>>& raw) {
  TextMaps tm{id, {}};
  for (const auto& [method, w] : raw) tm.maps.push_back(SaliencyMap::from_raw(tokenize(text), w, method));
  return tm;
}

}  // namespace

TEST(Saliency, TableRoundTrip) {
  const std::vector<TextMaps> maps{text_maps("t1", "Hello, world", {{"a", {1, 2, 3}}, {"b", {3, 0, 1}}}),
                                   text_maps("t2", "x", {{"a", {1}}})};
  const auto w = saliency_table(maps);
  const auto back = read_saliency(csv::parse(w.str()));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].text_id, "t1");
  ASSERT_EQ(back[0].maps.size(), 2u);
  EXPECT_EQ(back[0].maps[1].weights, maps[0].maps[1].weights);
  EXPECT_EQ(back[0].maps[0].token_seq.tokens, maps[0].maps[0].token_seq.tokens);
  EXPECT_EQ(back[0].maps[0].token_seq.offsets, maps[0].maps[0].token_seq.offsets);
  EXPECT_EQ(saliency_table(back).str(), w.str());
  EXPECT_NE(back[0].find("b"), nullptr);
  EXPECT_EQ(back[0].find("c"), nullptr);
}

TEST(Correlation, ExcludedPairsFollowConstantMaps) {
  const std::vector<TextMaps> maps{
      text_maps("t1", "a b c", {{"x", {1, 2, 3}}, {"y", {3, 2, 1}}, {"z", {1, 1, 1}}}),
      text_maps("t2", "a b c", {{"x", {1, 2, 3}}, {"y", {1, 2, 4}}, {"z", {0, 5, 0}}}),
  };
  const auto r = correlations(maps, {"x", "y", "z"});
  EXPECT_EQ(r.pairs, 6u);
  EXPECT_EQ(r.constant_maps, 1u);
  EXPECT_EQ(r.excluded_pairs, 2u);
  const auto t = csv::parse(r.table.str());
  ASSERT_EQ(t.rows.size(), 6u);
  EXPECT_EQ(t.header, (std::vector<std::string>{"text_id", "method_a", "method_b", "r", "excluded"}));
  EXPECT_NEAR(std::stod(t.rows[0][3]), -1.0, 1e-12);
  EXPECT_EQ(t.rows[1][4], "1");
  EXPECT_EQ(t.rows[1][3], "");
}

TEST(Curves, TableRoundTrip) {
  faithfulness::PerturbationCurve c;
  c.text_id = "t,1";
  c.method = "gradin";
  c.direction = faithfulness::Direction::low_to_high;
  for (std::size_t s = 0; s <= faithfulness::kSteps; ++s)
    c.steps.push_back({faithfulness::step_fraction(s), s < 3 ? "fraud" : "foreign bodies", s >= 3});
  const auto w = curves_table({c});
  const auto back = read_curves(csv::parse(w.str()));
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].text_id, "t,1");
  EXPECT_EQ(back[0].direction, c.direction);
  ASSERT_EQ(back[0].steps.size(), 6u);
  EXPECT_EQ(back[0].steps[4].label, "foreign bodies");
  EXPECT_TRUE(back[0].steps[4].flipped);
  EXPECT_EQ(curves_table(back).str(), w.str());
}

TEST(Counterfactuals, ValidityAndValidOnlyAverages) {
  std::vector<CounterfactualRow> rows;
  for (int i = 0; i < 10; ++i) {
    CounterfactualRow r;
    r.text_id = "t" + std::to_string(i);
    r.endpoint = "ep";
    r.task = "hazard";
    r.original_label = "fraud";
    if (i < 4) {
      r.valid = true;
      r.scores = {0.5, 0.25, 0.125, 1.0};
    } else if (i < 9) {
      r.valid = false;
      r.scores = {1.0, 1.0, 1.0, 1.0};
    }  // the last one could not be judged
    rows.push_back(r);
  }
  const auto s = summarize(rows);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].generated, 10u);
  EXPECT_EQ(s[0].judged, 9u);
  EXPECT_EQ(s[0].valid, 4u);
  EXPECT_DOUBLE_EQ(s[0].validity_rate, 4.0 / 9);
  EXPECT_DOUBLE_EQ(s[0].mean.match_ratio, 0.5);
  EXPECT_DOUBLE_EQ(s[0].mean.rouge1, 0.25);
  EXPECT_DOUBLE_EQ(s[0].mean.bleu1, 0.125);
  EXPECT_DOUBLE_EQ(s[0].mean.rouge_l, 1.0);

  const auto back = read_counterfactuals(csv::parse(counterfactuals_table(rows).str()));
  ASSERT_EQ(back.size(), 10u);
  EXPECT_FALSE(back[9].valid);
  EXPECT_EQ(back[0].valid, std::optional<bool>(true));
  EXPECT_EQ(counterfactual_report_table(summarize(back)).str(), counterfactual_report_table(s).str());
  const auto report = csv::parse(counterfactual_report_table(s).str());
  EXPECT_EQ(report.header[0], "model_or_endpoint");
  EXPECT_EQ(report.rows[0][report.column("semantic_similarity")], "");
}

TEST(Counterfactuals, NoValidRowsGivesEmptyMeans) {
  CounterfactualRow r;
  r.endpoint = "ep";
  r.task = "hazard";
  r.valid = false;
  const auto s = summarize({r});
  EXPECT_EQ(s[0].validity_rate, 0.0);
  const auto report = csv::parse(counterfactual_report_table(s).str());
  EXPECT_EQ(report.rows[0][report.column("match_ratio")], "");
}

TEST(Counterfactuals, GroupsInFirstAppearanceOrder) {
  CounterfactualRow a, b;
  a.endpoint = "zeta";
  a.task = "hazard";
  b.endpoint = "alpha";
  b.task = "hazard";
  const auto s = summarize({a, b, a});
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].endpoint, "zeta");
  EXPECT_EQ(s[0].generated, 2u);
}

TEST(MacroF1, Examples) {
  EXPECT_DOUBLE_EQ(macro_f1({"a", "b"}, {"a", "b"}), 1.0);
  // a: P 1/2 R 1 -> 2/3; b: P 0 R 0 -> 0
  EXPECT_NEAR(macro_f1({"a", "b"}, {"a", "a"}), (2.0 / 3) / 2, 1e-12);
  // c only predicted: counted with F1 0
  EXPECT_NEAR(macro_f1({"a", "a"}, {"a", "c"}), (2.0 / 3) / 2, 1e-12);
  EXPECT_THROW(macro_f1({"a"}, {}), std::invalid_argument);
}
