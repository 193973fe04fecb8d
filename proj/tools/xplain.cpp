// xplain: generate corpora, train the reference model, explain texts and run
// the full explanation/faithfulness pipeline from a config file.

#include <csignal>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "xplain/corpus.hpp"
#include "xplain/errors.hpp"
#include "xplain/experiment.hpp"
#include "xplain/mock_server.hpp"
#include "xplain/selfexplain.hpp"
#include "xplain/tinylm.hpp"

namespace fs = std::filesystem;
using namespace xplain;

namespace {

struct Failure {
  std::string stage;
  std::string message;
  int code = 1;
};

int fail(const Failure& f) {
  std::cerr << "error [" << f.stage << "]: " << f.message << '\n';
  return f.code;
}

void write_text(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
}

chat::MockServer* g_server = nullptr;

extern "C" void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Explanation and faithfulness toolkit for text classifiers"};
  app.require_subcommand(1);

  // gen
  std::string gen_task;
  std::size_t gen_n = 200;
  std::uint64_t gen_seed = 7;
  fs::path gen_out, gen_fixture;
  std::optional<std::size_t> gen_flips;
  std::uint64_t gen_mock_seed = 0;
  auto* gen = app.add_subcommand("gen", "Generate a synthetic annotated corpus (JSONL)");
  gen->add_option("--task", gen_task, "hazard or polarity")->required();
  gen->add_option("--n", gen_n, "Number of texts");
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_option("--out", gen_out, "Output JSONL path")->required();
  gen->add_option("--mock-fixture", gen_fixture, "Also write a keyword-driven mock endpoint fixture");
  gen->add_option("--flip-count", gen_flips, "Mock counterfactuals that flip the label (default: all)");
  gen->add_option("--mock-seed", gen_mock_seed, "Seed choosing which counterfactuals flip");

  // train
  fs::path train_config, train_out, train_corpus;
  std::string train_task;
  std::size_t train_n = 600, train_epochs = 40;
  std::uint64_t train_seed = 11;
  double train_lr = 1e-2;
  auto* train = app.add_subcommand("train", "Train the reference classifier and save a checkpoint");
  train->add_option("--config", train_config, "Experiment config (uses its model.train section)");
  train->add_option("--task", train_task, "hazard or polarity (without --config)");
  train->add_option("--corpus", train_corpus, "Training JSONL (default: synthetic)");
  train->add_option("--n", train_n, "Synthetic training texts");
  train->add_option("--seed", train_seed, "Synthetic corpus seed");
  train->add_option("--epochs", train_epochs, "Training epochs");
  train->add_option("--lr", train_lr, "Adam learning rate");
  train->add_option("--out", train_out, "Checkpoint path")->required();

  // explain
  fs::path explain_config, explain_ckpt;
  std::string explain_method = "gradin", explain_text;
  auto* explain = app.add_subcommand("explain", "Print the token/weight table for one text");
  explain->add_option("--config", explain_config, "Experiment config providing the model");
  explain->add_option("--checkpoint", explain_ckpt, "Model checkpoint");
  explain->add_option("--method", explain_method, "agrad, gradin or igrad");
  explain->add_option("--text", explain_text, "Text to explain")->required();

  // curves
  fs::path curves_config, curves_saliency, curves_ckpt, curves_out;
  std::optional<std::uint64_t> curves_seed;
  auto* curves = app.add_subcommand("curves", "Run the faithfulness test from a saved saliency.csv");
  curves->add_option("--config", curves_config, "Experiment config")->required();
  curves->add_option("--saliency", curves_saliency, "saliency.csv from an earlier run")->required();
  curves->add_option("--checkpoint", curves_ckpt, "Reference model checkpoint (overrides the config)");
  curves->add_option("--seed", curves_seed, "Run seed override");
  curves->add_option("--out", curves_out, "Output directory")->required();

  // report
  fs::path report_in, report_out;
  auto* report = app.add_subcommand("report", "Recompute aggregate tables from per-text CSVs");
  report->add_option("--in", report_in, "Bundle directory")->required();
  report->add_option("--out", report_out, "Output directory (default: --in)");

  // run
  fs::path run_config, run_out;
  std::optional<std::uint64_t> run_seed;
  auto* run = app.add_subcommand("run", "Run the full pipeline from a config file");
  run->add_option("--config", run_config, "Experiment config")->required();
  run->add_option("--seed", run_seed, "Run seed override");
  run->add_option("--out", run_out, "Output directory override");

  // serve-mock
  fs::path mock_fixture;
  int mock_port = 8080;
  auto* serve = app.add_subcommand("serve-mock", "Serve a mock chat-completion endpoint from a fixture");
  serve->add_option("--fixture", mock_fixture, "Fixture JSON")->required();
  serve->add_option("--port", mock_port, "Port on 127.0.0.1");

  CLI11_PARSE(app, argc, argv);

  const auto stage_of = [&]() -> std::string { return app.get_subcommands().front()->get_name(); };
  try {
    if (*gen) {
      const auto task = corpus::parse_task(gen_task);
      const auto texts = corpus::gen_synthetic(task, gen_n, gen_seed);
      corpus::save_jsonl(gen_out, texts);
      if (!gen_fixture.empty()) {
        selfexplain::MockFixtureOptions opts;
        opts.flip_count = gen_flips;
        opts.seed = gen_mock_seed;
        write_text(gen_fixture, selfexplain::synthetic_mock_fixture(task, texts,
                                                                     selfexplain::PromptTemplates::for_task(task), opts));
      }
      std::cout << "wrote " << texts.size() << " texts to " << gen_out.string() << '\n';
    } else if (*train) {
      experiment::ModelSource source;
      corpus::Task task;
      if (!train_config.empty()) {
        const auto cfg = experiment::ExperimentConfig::load(train_config);
        if (cfg.model.checkpoint) throw ConfigError("config model section has no 'train' block");
        source = cfg.model;
        task = cfg.task;
      } else {
        if (train_task.empty()) throw ConfigError("train needs --config or --task");
        task = corpus::parse_task(train_task);
        if (!train_corpus.empty()) source.train_corpus.path = train_corpus;
        source.train_corpus.n = train_n;
        source.train_corpus.seed = train_seed;
        source.epochs = train_epochs;
        source.lr = train_lr;
      }
      const auto texts = experiment::load_corpus(source.train_corpus, task);
      const auto result = tinylm::train(texts, corpus::labels_for(task), source.config, source.epochs, source.lr);
      tinylm::save_checkpoint(train_out, result.weights);
      std::size_t correct = 0;
      for (const auto& t : texts)
        correct += tinylm::classify(result.weights, tokenize(t.text)).predicted_label == t.label;
      std::cout << "epochs " << result.epoch_loss.size() << ", final loss "
                << (result.epoch_loss.empty() ? 0.0 : result.epoch_loss.back()) << ", train accuracy "
                << static_cast<double>(correct) / static_cast<double>(texts.size()) << '\n';
    } else if (*explain) {
      tinylm::ModelWeights model;
      if (!explain_ckpt.empty()) {
        model = tinylm::load_checkpoint(explain_ckpt);
      } else if (!explain_config.empty()) {
        const auto cfg = experiment::ExperimentConfig::load(explain_config);
        model = experiment::reference_model(cfg.model, cfg.task);
      } else {
        throw ConfigError("explain needs --checkpoint or --config");
      }
      std::cout << experiment::explain_table(model, explain_text, explain_method);
    } else if (*curves) {
      experiment::Overrides ov;
      ov.seed = curves_seed;
      const auto cfg = experiment::ExperimentConfig::load(curves_config, ov);
      std::optional<fs::path> ckpt;
      if (!curves_ckpt.empty()) ckpt = curves_ckpt;
      experiment::rerun_curves(cfg, curves_saliency, ckpt, curves_out);
    } else if (*report) {
      experiment::recompute_reports(report_in, report_out.empty() ? report_in : report_out);
    } else if (*run) {
      experiment::Overrides ov;
      ov.seed = run_seed;
      if (!run_out.empty()) ov.output_dir = fs::absolute(run_out);
      const auto cfg = experiment::ExperimentConfig::load(run_config, ov);
      const auto result = experiment::run_experiment(cfg);
      std::cout << "wrote " << result.files.size() << " files and manifest.json to " << result.output_dir.string()
                << '\n';
    } else if (*serve) {
      chat::MockServer server(chat::MockFixture::load(mock_fixture));
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "serving " << mock_fixture.string() << " on http://127.0.0.1:" << mock_port << std::endl;
      server.serve_forever(mock_port);
    }
  } catch (const experiment::StageError& e) {
    return fail({e.stage(), e.what()});
  } catch (const ConfigError& e) {
    return fail({"config", e.what(), 2});
  } catch (const std::exception& e) {
    return fail({stage_of(), e.what()});
  }
  return 0;
}
