#pragma once

// End-to-end runs from a declarative JSON config, plus the single-stage
// commands behind the CLI. Config keys (relative paths resolve against the
// config file's directory):
//
//   task            "hazard" | "polarity"
//   corpus          {"path": "texts.jsonl"} | {"synthetic": {"n": 200, "seed": 7}}
//   model           {"checkpoint": "model.json"}
//                 | {"train": {"corpus": <corpus spec>, "epochs": 40, "lr": 0.01, "config": {...}}}
//   endpoint        optional; {"base_url", "path", "model", "api_key_env", "timeout_seconds",
//                   "retry_cap", "max_in_flight"} | {"mock_fixture": "fixture.json"}
//                 | {"mock_synthetic": {"flip_count": 41, "seed": 3, "occluded_label": "..."}}
//   templates       optional prompt overrides: classify, extractive_single, extractive_multi, counterfactual
//   methods         subset of human, random, agrad, gradin, igrad, extractive, counterfactual
//   seed            run seed (random maps, tie breaking)
//   mask_token      {"reference": "<unk>", "endpoint": "###"}
//   phrase_count    "human_spans" (the only source)
//   faithfulness    {"reference_methods": [...], "endpoint_methods": [...], "sticky": false}
//   output_probability, strict_parsing, workers, output_dir

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "xplain/chat.hpp"
#include "xplain/corpus.hpp"
#include "xplain/selfexplain.hpp"
#include "xplain/tinylm.hpp"

namespace xplain::experiment {

inline constexpr std::string_view kVersion = "0.1.0";

/// A failure tagged with the pipeline stage it happened in.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& message)
      : std::runtime_error(message), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct CorpusSource {
  std::optional<std::filesystem::path> path;
  std::size_t n = 200;
  std::uint64_t seed = 7;
};

struct ModelSource {
  std::optional<std::filesystem::path> checkpoint;
  CorpusSource train_corpus{std::nullopt, 600, 11};
  std::size_t epochs = 40;
  double lr = 1e-2;
  tinylm::ModelConfig config;
};

struct EndpointSource {
  enum class Kind { none, http, mock_fixture, mock_synthetic };
  Kind kind = Kind::none;
  chat::EndpointConfig http;
  std::filesystem::path fixture;
  selfexplain::MockFixtureOptions mock;
};

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> output_dir;
};

struct ExperimentConfig {
  corpus::Task task = corpus::Task::hazard;
  CorpusSource corpus;
  ModelSource model;
  EndpointSource endpoint;
  selfexplain::PromptTemplates templates = selfexplain::PromptTemplates::hazard();
  std::vector<std::string> methods;
  std::vector<std::string> reference_curve_methods;
  std::vector<std::string> endpoint_curve_methods;
  std::uint64_t seed = 1;
  std::string reference_mask = "<unk>";
  std::string endpoint_mask = "###";
  bool sticky = false;
  bool strict_parsing = false;
  std::size_t workers = 4;
  std::filesystem::path output_dir = "out";
  /// Sorted-key dump of the effective config without output_dir; hashed into the manifest.
  std::string canonical;

  /// Parses and validates; referenced files must exist. Throws ConfigError.
  static ExperimentConfig parse(const std::string& content, const std::filesystem::path& base_dir,
                                const Overrides& overrides = {});
  static ExperimentConfig load(const std::filesystem::path& path, const Overrides& overrides = {});

  bool uses_endpoint() const { return endpoint.kind != EndpointSource::Kind::none; }
};

/// Methods computed on the reference model and by the chat endpoint.
bool is_reference_method(std::string_view method);
bool is_endpoint_method(std::string_view method);

struct RunResult {
  std::filesystem::path output_dir;
  std::vector<std::string> files;  // bundle-relative, as listed in the manifest
};

/// Runs every stage and writes the report bundle. On failure the files
/// written so far stay, the manifest records the stage, and StageError is thrown.
RunResult run_experiment(const ExperimentConfig& config);

std::vector<corpus::AnnotatedText> load_corpus(const CorpusSource& source, corpus::Task task);
/// Loads the checkpoint or trains on the configured corpus.
tinylm::ModelWeights reference_model(const ModelSource& source, corpus::Task task);

/// Token/weight table for one text ("token<TAB>weight" per line after a header).
std::string explain_table(const tinylm::ModelWeights& model, const std::string& text, const std::string& method);

/// Re-runs faithfulness from a saved saliency.csv; writes curves.csv,
/// aggregate.csv and occluded.csv into `out_dir`.
void rerun_curves(const ExperimentConfig& config, const std::filesystem::path& saliency_csv,
                  const std::optional<std::filesystem::path>& checkpoint, const std::filesystem::path& out_dir);

/// Recomputes correlation, aggregate, occluded and counterfactual report CSVs
/// from the per-text CSVs in `in_dir`.
void recompute_reports(const std::filesystem::path& in_dir, const std::filesystem::path& out_dir,
                       const std::vector<std::string>& methods = {});

std::string sha256_hex(std::string_view data);

}  // namespace xplain::experiment
