// Acceptance checks 1-9. Prints one PASS/FAIL line per criterion and exits
// non-zero when any fails.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "oracles.hpp"
#include "xplain/analytic.hpp"
#include "xplain/csv.hpp"
#include "xplain/experiment.hpp"
#include "xplain/faithfulness.hpp"
#include "xplain/mock_server.hpp"
#include "xplain/reports.hpp"
#include "xplain/saliency.hpp"
#include "xplain/selfexplain.hpp"
#include "xplain/textsim.hpp"

using namespace xplain;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const fs::path& work_dir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "xplain_acceptance";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

const fs::path kConfig = fs::path(XPLAIN_CONFIG_DIR) / "hazard_synthetic.json";
const fs::path kFixtures = XPLAIN_FIXTURE_DIR;

// The bundled synthetic run, shared by criteria 3, 5 and 9.
const experiment::RunResult& full_run() {
  static const experiment::RunResult r = [] {
    experiment::Overrides o;
    o.output_dir = work_dir() / "run_a";
    return experiment::run_experiment(experiment::ExperimentConfig::load(kConfig, o));
  }();
  return r;
}

template <typename F>
void parallel(std::size_t n, F f) {
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) f(i);
  };
  std::vector<std::jthread> pool;
  const auto threads = std::max(1u, std::thread::hardware_concurrency());
  for (unsigned t = 1; t < threads; ++t) pool.emplace_back(work);
  work();
}

// ---------------------------------------------------------------------------

Outcome gradient_oracle() {
  using tinylm::ModelConfig;
  std::vector<std::tuple<ModelConfig, std::size_t, std::size_t>> configs;
  ModelConfig a;
  a.d_model = 6, a.n_layers = 1, a.n_heads = 2, a.d_head = 3, a.d_ff = 10, a.max_len = 10;
  ModelConfig b;
  b.d_model = 8, b.n_layers = 2, b.n_heads = 4, b.d_head = 2, b.d_ff = 16, b.max_len = 10;
  ModelConfig c = b;
  c.d_model = 12, c.n_heads = 3, c.d_head = 4, c.n_layers = 3, c.output_scalar = tinylm::OutputScalar::probability;
  configs = {{a, 12, 3}, {b, 15, 4}, {c, 20, 5}};

  double worst_in = 0, worst_attn = 0;
  std::size_t n_in = 0, n_attn = 0;
  constexpr double h = 1e-4;
  for (std::size_t ci = 0; ci < configs.size(); ++ci) {
    const auto& [cfg, vocab, labels] = configs[ci];
    const auto w = oracle::random_model(cfg, vocab, labels, 1000 + ci);
    Rng rng(2000 + ci);
    for (std::size_t coord = 0; coord < 120; ++coord) {
      const auto trace = tinylm::classify(w, oracle::random_tokens(1 + uniform_index(rng, 7), vocab, rng));
      const auto target = uniform_index(rng, labels);
      const auto gi = tinylm::grad_input(w, trace, target);
      const auto i = static_cast<Eigen::Index>(uniform_index(rng, trace.positions()));
      const auto cc = static_cast<Eigen::Index>(uniform_index(rng, cfg.d_model));
      const double fd = oracle::central_difference(
          [&](double s) {
            auto h0 = trace.input_embeddings;
            h0(i, cc) += s;
            return tinylm::output_scalar(cfg, tinylm::forward_embeddings(w, h0).logits, target);
          },
          h);
      worst_in = std::max(worst_in, oracle::rel_error(gi(i, cc), fd, 1e-5));
      ++n_in;

      const auto ga = tinylm::grad_attention_last(w, trace, target);
      const auto head = uniform_index(rng, cfg.n_heads);
      const auto j = static_cast<Eigen::Index>(uniform_index(rng, trace.positions()));
      const auto k = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(j) + 1));
      const double fa = oracle::central_difference(
          [&](double s) {
            auto attn = trace.attentions.back();
            attn[head](j, k) += s;
            return tinylm::output_scalar(cfg, tinylm::logits_with_last_attention(w, trace, attn), target);
          },
          h);
      worst_attn = std::max(worst_attn, oracle::rel_error(ga[head](j, k), fa, 1e-5));
      ++n_attn;
    }
  }
  const bool ok = worst_in < 1e-4 && worst_attn < 1e-4 && n_in >= 300 && n_attn >= 300;
  return {ok, "grad_input max rel err " + fmt("%.2e", worst_in) + " over " + std::to_string(n_in) +
                  ", grad_attention_last " + fmt("%.2e", worst_attn) + " over " + std::to_string(n_attn)};
}

Outcome jacobian_oracle() {
  Rng rng(31);
  double worst = 0;
  for (int t = 0; t < 100; ++t) {
    const auto m = 4 + uniform_index(rng, 13);
    const auto n = 2 * m + uniform_index(rng, 64 - 2 * m + 1);
    tinylm::Matrix a(m, n);
    tinylm::Vector b(m);
    for (auto& v : a.reshaped()) v = standard_normal(rng);
    for (auto& v : b) v = standard_normal(rng);
    const auto x = analytic::pinv_solve(a, b).x;
    const auto ref = oracle::min_norm_solution(a, b);
    worst = std::max(worst, (x - ref).norm() / ref.norm());
  }
  tinylm::ModelConfig cfg;
  cfg.d_model = 8, cfg.n_layers = 2, cfg.n_heads = 2, cfg.d_head = 4, cfg.d_ff = 16, cfg.max_len = 10;
  const auto w = oracle::random_model(cfg, 15, 4, 32);
  double worst_dir = 0;
  for (int t = 0; t < 20; ++t) {
    const auto trace = tinylm::classify(w, oracle::random_tokens(1 + uniform_index(rng, 8), 15, rng));
    const auto jac = tinylm::jacobian(w, trace);
    tinylm::Vector delta(jac.cols());
    for (auto& v : delta) v = standard_normal(rng);
    delta *= 1e-5 / delta.norm();
    auto h0 = trace.input_embeddings;
    for (Eigen::Index i = 0; i < h0.rows(); ++i) h0.row(i) += delta.segment(i * 8, 8).transpose();
    const tinylm::Vector fd = tinylm::forward_embeddings(w, h0).output_embedding - trace.output_embedding;
    const tinylm::Vector lin = jac * delta;
    worst_dir = std::max(worst_dir, (fd - lin).norm() / lin.norm());
  }
  return {worst < 1e-6 && worst_dir < 1e-3,
          "pinv vs normal equations max rel err " + fmt("%.2e", worst) + " on 100 systems, directional " +
              fmt("%.2e", worst_dir)};
}

Outcome saliency_algebra() {
  const auto& run = full_run();
  const auto maps = reports::read_saliency(csv::read(run.output_dir / "saliency.csv"));
  std::size_t total = 0, bad = 0, constant = 0, constant_pairs = 0;
  std::set<std::string> methods;
  for (const auto& t : maps) {
    std::vector<bool> is_const;
    for (const auto& m : t.maps) {
      ++total;
      methods.insert(m.method);
      double s = 0;
      bool positive = true;
      for (double w : m.weights) {
        s += w;
        positive = positive && w > 0;
      }
      if (std::abs(s - 1.0) > 1e-9 || !positive || m.weights.size() != m.token_seq.size()) ++bad;
      bool c = true;
      for (double w : m.weights) c = c && w == m.weights.front();
      is_const.push_back(c);
      constant += c;
    }
    for (std::size_t a = 0; a < is_const.size(); ++a)
      for (std::size_t b = a + 1; b < is_const.size(); ++b) constant_pairs += is_const[a] || is_const[b];
  }
  const auto corr = csv::read(run.output_dir / "correlation.csv");
  std::size_t excluded_rows = 0;
  for (const auto& r : corr.rows) excluded_rows += r[corr.column("excluded")] == "1";
  const auto summary = json::parse(slurp(run.output_dir / "summary.json"));
  const std::size_t reported_constant = summary["correlation"]["constant_maps"];
  const bool ok = maps.size() >= 200 && methods.size() >= 5 && bad == 0 && reported_constant == constant &&
                  excluded_rows == constant_pairs;
  return {ok, std::to_string(total) + " maps over " + std::to_string(maps.size()) + " texts x " +
                  std::to_string(methods.size()) + " methods, " + std::to_string(bad) + " violations; " +
                  std::to_string(constant) + " zero-variance maps, " + std::to_string(reported_constant) +
                  " excluded; excluded pairs " + std::to_string(excluded_rows) + "/" + std::to_string(constant_pairs)};
}

Outcome faithfulness_ground_truth() {
  const auto config = experiment::ExperimentConfig::load(kConfig);
  const auto texts = corpus::gen_synthetic(corpus::Task::hazard, 200, 7);
  auto source = config.model;
  source.checkpoint = full_run().output_dir / "model.json";
  const auto model = experiment::reference_model(source, corpus::Task::hazard);
  const faithfulness::TextClassifier classify = [&](const std::string& t) {
    return tinylm::classify(model, tokenize(t)).predicted_label;
  };
  constexpr std::size_t kSeeds = 100;
  std::vector<double> gold_flip(kSeeds), random_flip(kSeeds);
  std::vector<std::size_t> terminal_agree(kSeeds), terminal_total(kSeeds);
  parallel(kSeeds, [&](std::size_t s) {
    std::size_t gold = 0, rnd = 0;
    for (const auto& t : texts) {
      const auto seq = tokenize(t.text);
      const auto gmap = saliency::spans_to_saliency(seq, t.spans);
      Rng r(derive_seed(s, "random\x1f" + t.id));
      std::vector<double> raw(seq.size());
      for (auto& v : raw) v = uniform_unit(r);
      const auto rmap = SaliencyMap::from_raw(seq, raw, "random");
      const faithfulness::CurveOptions opts;
      for (const auto* m : {&gmap, &rmap}) {
        const auto hi = faithfulness::run_curve(classify, t.text, *m, faithfulness::Direction::high_to_low, opts,
                                                faithfulness::curve_seed(s, t.id, m->method, faithfulness::Direction::high_to_low));
        const auto lo = faithfulness::run_curve(classify, t.text, *m, faithfulness::Direction::low_to_high, opts,
                                                faithfulness::curve_seed(s, t.id, m->method, faithfulness::Direction::low_to_high));
        (m == &gmap ? gold : rnd) += hi.steps[1].flipped;
        terminal_agree[s] += hi.steps.back().label == lo.steps.back().label;
        ++terminal_total[s];
      }
    }
    gold_flip[s] = static_cast<double>(gold) / static_cast<double>(texts.size());
    random_flip[s] = static_cast<double>(rnd) / static_cast<double>(texts.size());
  });
  double g = 0, r = 0;
  std::size_t agree = 0, total = 0;
  for (std::size_t s = 0; s < kSeeds; ++s) {
    g += gold_flip[s] / kSeeds;
    r += random_flip[s] / kSeeds;
    agree += terminal_agree[s];
    total += terminal_total[s];
  }
  return {g - r >= 0.2 && agree == total,
          "flip@0.2 high_to_low gold " + fmt("%.3f", g) + " vs random " + fmt("%.3f", r) + " (margin " +
              fmt("%.3f", g - r) + ", 100 seeds); terminal agreement " + std::to_string(agree) + "/" +
              std::to_string(total)};
}

Outcome gradient_sanity() {
  const auto agg = csv::read(full_run().output_dir / "aggregate.csv");
  double hi = -1, lo = -1;
  for (const auto& r : agg.rows) {
    if (r[agg.column("method")] != "gradin" || r[agg.column("step_fraction")] != csv::number(0.2)) continue;
    const double v = std::stod(r[agg.column("flip_fraction")]);
    (r[agg.column("direction")] == "high_to_low" ? hi : lo) = v;
  }
  return {hi >= 0.5 && hi > lo,
          "GradIn flip@0.2 high_to_low " + fmt("%.3f", hi) + ", low_to_high " + fmt("%.3f", lo)};
}

Outcome text_similarity() {
  using namespace textsim;
  const auto ref = tokenize("the cat sat").tokens, cand = tokenize("the cat").tokens;
  const double b = bleu1(ref, cand), r1 = rouge1(ref, cand), mr = match_ratio(ref, cand);
  bool ok = std::abs(b - 0.6065) <= 1e-4 && std::abs(r1 - 2.0 / 3) <= 1e-9 && mr == 0.8;
  Rng rng(6);
  std::size_t agree = 0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<std::string> x, y;
    const auto alphabet = 2 + uniform_index(rng, 6);
    for (std::size_t i = 0, n = 1 + uniform_index(rng, 14); i < n; ++i) x.push_back("t" + std::to_string(uniform_index(rng, alphabet)));
    for (std::size_t i = 0, n = uniform_index(rng, 15); i < n; ++i) y.push_back("t" + std::to_string(uniform_index(rng, alphabet)));
    const double rl = static_cast<double>(oracle::lcs_dp(x, y)) / static_cast<double>(x.size());
    const double m = 2.0 * static_cast<double>(oracle::ratcliff_matches(x, y)) / static_cast<double>(x.size() + y.size());
    agree += rouge_l(x, y) == rl && match_ratio(x, y) == m;
  }
  ok = ok && agree == 1000;
  return {ok, "bleu1 " + fmt("%.6f", b) + ", rouge1 " + fmt("%.9f", r1) + ", match_ratio " + fmt("%.17g", mr) +
                  ", oracle agreement " + std::to_string(agree) + "/1000"};
}

Outcome protocol_replay() {
  const auto expected = json::parse(slurp(kFixtures / "film_review_expected.json"));
  const auto labels = corpus::labels_for(corpus::Task::polarity);
  const auto texts = corpus::load_jsonl(kFixtures / "film_review.jsonl", labels);
  chat::MockServer server(chat::MockFixture::load(kFixtures / "film_review.json"));
  server.start();
  chat::EndpointConfig cfg;
  cfg.base_url = server.base_url();
  chat::HttpChatClient client(cfg);
  const auto rec = selfexplain::explain_text(client, selfexplain::PromptTemplates::sentiment(), labels, texts.at(0));
  auto session = [](const chat::ChatTranscript& t) {
    json out = json::array();
    for (const auto& m : t.messages) out.push_back({{"role", chat::role_name(m.role)}, {"content", m.content}});
    return out.dump();
  };
  const auto received = server.fixture().received();
  const bool ok = rec.failed_stage.empty() && rec.predicted_label == expected["label"] &&
                  rec.extractive_phrases == expected["phrases"].get<std::vector<std::string>>() &&
                  rec.counterfactual == expected["counterfactual"].get<std::string>() &&
                  rec.counterfactual_label == expected["counterfactual_label"].get<std::string>() &&
                  rec.valid == std::optional<bool>(true) &&
                  session(rec.extractive_session) == expected["extractive_session"].dump() &&
                  session(rec.counterfactual_session) == expected["counterfactual_session"].dump() &&
                  received.size() == 4 && received[3].messages.at(0).content == expected["validation_prompt"];
  return {ok, "label '" + rec.predicted_label + "', phrase '" +
                  (rec.extractive_phrases.empty() ? std::string() : rec.extractive_phrases[0]) + "', valid " +
                  (rec.valid ? (*rec.valid ? "true" : "false") : "unknown") + ", " + std::to_string(received.size()) +
                  " requests"};
}

Outcome validity_semantics() {
  const auto dir = work_dir() / "validity";
  fs::create_directories(dir);
  const json cfg = {
      {"task", "hazard"},
      {"corpus", {{"synthetic", {{"n", 100}, {"seed", 21}}}}},
      {"model", {{"train", {{"corpus", {{"synthetic", {{"n", 120}, {"seed", 11}}}}}, {"epochs", 3}}}}},
      {"endpoint", {{"mock_synthetic", {{"flip_count", 41}, {"seed", 8}}}}},
      {"methods", {"human", "counterfactual"}},
      {"seed", 1}};
  experiment::Overrides o;
  o.output_dir = dir / "out";
  const auto run = experiment::run_experiment(experiment::ExperimentConfig::parse(cfg.dump(), dir, o));
  const auto report = csv::read(run.output_dir / "counterfactual_report.csv");
  const auto rows = csv::read(run.output_dir / "counterfactuals.csv");
  const auto texts = corpus::gen_synthetic(corpus::Task::hazard, 100, 21);
  std::map<std::string, std::string> original;
  for (const auto& t : texts) original[t.id] = t.text;
  // Independent means over the valid rows, recomputed from the texts.
  double sums[4] = {0, 0, 0, 0};
  std::size_t valid = 0;
  for (const auto& r : rows.rows) {
    if (r[rows.column("valid")] != "1") continue;
    ++valid;
    const auto s = textsim::compare(original.at(r[rows.column("text_id")]), r[rows.column("counterfactual")]);
    sums[0] += s.match_ratio, sums[1] += s.rouge1, sums[2] += s.bleu1, sums[3] += s.rouge_l;
  }
  const auto& row = report.rows.at(0);
  const double rate = std::stod(row[report.column("validity_rate")]);
  bool ok = report.rows.size() == 1 && rate == 0.41 && row[report.column("valid")] == "41" &&
            row[report.column("judged")] == "100" && valid == 41;
  const char* cols[4] = {"match_ratio", "rouge1", "bleu1", "rougeL"};
  double worst = 0;
  for (int i = 0; i < 4; ++i) worst = std::max(worst, std::abs(std::stod(row[report.column(cols[i])]) - sums[i] / 41.0));
  ok = ok && worst < 1e-12;
  return {ok, "validity " + fmt("%.2f", rate) + " (" + row[report.column("valid")] + "/" +
                  row[report.column("judged")] + "), similarity means over " + std::to_string(valid) +
                  " valid rows, max deviation " + fmt("%.1e", worst)};
}

Outcome determinism() {
  const auto& a = full_run();
  experiment::Overrides o;
  o.output_dir = work_dir() / "run_b";
  const auto b = experiment::run_experiment(experiment::ExperimentConfig::load(kConfig, o));
  std::size_t same = 0;
  auto files = a.files;
  files.push_back("manifest.json");
  for (const auto& f : files) same += slurp(a.output_dir / f) == slurp(b.output_dir / f);
  const bool ok = a.files == b.files && same == files.size();
  return {ok, std::to_string(same) + "/" + std::to_string(files.size()) + " files byte-identical"};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient oracle", gradient_oracle},
      {"jacobian/igrad oracle", jacobian_oracle},
      {"saliency algebra", saliency_algebra},
      {"faithfulness ground truth", faithfulness_ground_truth},
      {"gradient-method sanity", gradient_sanity},
      {"text-similarity fixtures", text_similarity},
      {"protocol replay", protocol_replay},
      {"counterfactual validity semantics", validity_semantics},
      {"determinism", determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = criteria[i].second();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failures += !out.pass;
    std::printf("%s %zu %s: %s [%.1fs]\n", out.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                out.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
