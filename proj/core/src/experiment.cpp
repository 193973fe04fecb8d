#include "xplain/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>
#include <openssl/evp.h>

#include "xplain/analytic.hpp"
#include "xplain/csv.hpp"
#include "xplain/errors.hpp"
#include "xplain/faithfulness.hpp"
#include "xplain/mock_server.hpp"
#include "xplain/reports.hpp"
#include "xplain/rng.hpp"
#include "xplain/saliency.hpp"
#include "xplain/textsim.hpp"

namespace xplain::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::string> kReferenceMethods = {"human", "random", "agrad", "gradin", "igrad"};
const std::vector<std::string> kEndpointMethods = {"extractive", "counterfactual"};

bool contains(const std::vector<std::string>& v, std::string_view s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn fn) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  const auto count = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 1; t < count; ++t) pool.emplace_back(work);
    work();
  }
  if (failure) std::rethrow_exception(failure);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void check_keys(const json& j, const std::vector<std::string>& allowed, const std::string& where) {
  for (const auto& [key, value] : j.items())
    if (!contains(allowed, key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw ConfigError(what + " not found: '" + p.string() + "'");
}

CorpusSource parse_corpus(const json& j, const fs::path& base, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  check_keys(j, {"path", "synthetic"}, where);
  CorpusSource c;
  if (j.contains("path") == j.contains("synthetic"))
    throw ConfigError(where + " needs exactly one of 'path' or 'synthetic'");
  if (j.contains("path")) {
    c.path = resolve(base, j.at("path").get<std::string>());
    require_file(*c.path, where + " file");
  } else {
    const auto& s = j.at("synthetic");
    check_keys(s, {"n", "seed"}, where + ".synthetic");
    c.n = s.value("n", c.n);
    c.seed = s.value("seed", c.seed);
    if (c.n == 0) throw ConfigError(where + ".synthetic.n must be > 0");
  }
  return c;
}

tinylm::ModelConfig parse_model_config(const json& j) {
  check_keys(j, {"d_model", "n_layers", "n_heads", "d_head", "d_ff", "max_len", "seed", "layer_norm", "activation",
                 "batch_size", "token_dropout"},
             "model.train.config");
  tinylm::ModelConfig c;
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_head = j.value("d_head", c.d_head);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.max_len = j.value("max_len", c.max_len);
  c.seed = j.value("seed", c.seed);
  c.layer_norm = j.value("layer_norm", c.layer_norm);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.token_dropout = j.value("token_dropout", c.token_dropout);
  const auto act = j.value("activation", std::string("gelu"));
  if (act != "gelu" && act != "identity") throw ConfigError("unknown activation '" + act + "'");
  c.activation = act == "gelu" ? tinylm::Activation::gelu : tinylm::Activation::identity;
  try {
    c.validate();
  } catch (const ValidationError& e) {
    throw ConfigError(std::string("model.train.config: ") + e.what());
  }
  return c;
}

std::vector<std::string> string_list(const json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + " must be a list of strings");
  return j.get<std::vector<std::string>>();
}

}  // namespace

bool is_reference_method(std::string_view method) { return contains(kReferenceMethods, method); }
bool is_endpoint_method(std::string_view method) { return contains(kEndpointMethods, method); }

ExperimentConfig ExperimentConfig::parse(const std::string& content, const fs::path& base_dir,
                                         const Overrides& overrides) {
  json j;
  try {
    j = json::parse(content);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (overrides.seed) j["seed"] = *overrides.seed;
  if (overrides.output_dir) j["output_dir"] = overrides.output_dir->string();

  ExperimentConfig c;
  try {
    check_keys(j, {"task", "corpus", "model", "endpoint", "templates", "methods", "seed", "mask_token", "phrase_count",
                   "faithfulness", "output_probability", "strict_parsing", "workers", "output_dir"},
               "config");
    if (!j.contains("task")) throw ConfigError("config lacks 'task'");
    c.task = corpus::parse_task(j.at("task").get<std::string>());
    if (!j.contains("corpus")) throw ConfigError("config lacks 'corpus'");
    c.corpus = parse_corpus(j.at("corpus"), base_dir, "corpus");

    if (!j.contains("model")) throw ConfigError("config lacks 'model'");
    const auto& m = j.at("model");
    check_keys(m, {"checkpoint", "train"}, "model");
    if (m.contains("checkpoint") == m.contains("train"))
      throw ConfigError("model needs exactly one of 'checkpoint' or 'train'");
    if (m.contains("checkpoint")) {
      c.model.checkpoint = resolve(base_dir, m.at("checkpoint").get<std::string>());
      require_file(*c.model.checkpoint, "model checkpoint");
    } else {
      const auto& t = m.at("train");
      check_keys(t, {"corpus", "epochs", "lr", "config"}, "model.train");
      if (t.contains("corpus")) c.model.train_corpus = parse_corpus(t.at("corpus"), base_dir, "model.train.corpus");
      c.model.epochs = t.value("epochs", c.model.epochs);
      c.model.lr = t.value("lr", c.model.lr);
      if (!(c.model.lr > 0.0)) throw ConfigError("model.train.lr must be > 0");
      c.model.config = parse_model_config(t.value("config", json::object()));
    }
    if (j.value("output_probability", false)) c.model.config.output_scalar = tinylm::OutputScalar::probability;

    if (j.contains("endpoint")) {
      const auto& e = j.at("endpoint");
      check_keys(e, {"base_url", "path", "model", "api_key_env", "timeout_seconds", "retry_cap", "backoff_initial_ms",
                     "max_in_flight", "mock_fixture", "mock_synthetic"},
                 "endpoint");
      if (e.contains("mock_fixture")) {
        c.endpoint.kind = EndpointSource::Kind::mock_fixture;
        c.endpoint.fixture = resolve(base_dir, e.at("mock_fixture").get<std::string>());
        require_file(c.endpoint.fixture, "mock fixture");
      } else if (e.contains("mock_synthetic")) {
        c.endpoint.kind = EndpointSource::Kind::mock_synthetic;
        const auto& s = e.at("mock_synthetic");
        check_keys(s, {"flip_count", "seed", "occluded_label"}, "endpoint.mock_synthetic");
        if (s.contains("flip_count")) c.endpoint.mock.flip_count = s.at("flip_count").get<std::size_t>();
        c.endpoint.mock.seed = s.value("seed", std::uint64_t{0});
        if (s.contains("occluded_label")) c.endpoint.mock.occluded_label = s.at("occluded_label").get<std::string>();
      } else {
        c.endpoint.kind = EndpointSource::Kind::http;
        auto& h = c.endpoint.http;
        h.base_url = e.value("base_url", h.base_url);
        h.path = e.value("path", h.path);
        h.model = e.value("model", h.model);
        if (e.contains("api_key_env")) {
          const auto var = e.at("api_key_env").get<std::string>();
          const char* key = std::getenv(var.c_str());
          if (!key) throw ConfigError("environment variable '" + var + "' (endpoint.api_key_env) is not set");
          h.api_key = key;
        }
        h.timeout_seconds = e.value("timeout_seconds", h.timeout_seconds);
        h.retry_cap = e.value("retry_cap", h.retry_cap);
        h.backoff_initial_ms = e.value("backoff_initial_ms", h.backoff_initial_ms);
        h.max_in_flight = e.value("max_in_flight", h.max_in_flight);
        if (h.retry_cap < 0 || h.max_in_flight < 1 || !(h.timeout_seconds > 0))
          throw ConfigError("endpoint: retry_cap >= 0, max_in_flight >= 1 and timeout_seconds > 0 required");
      }
    }

    c.templates = selfexplain::PromptTemplates::for_task(c.task);
    if (j.contains("templates")) {
      const auto& t = j.at("templates");
      check_keys(t, {"classify", "extractive_single", "extractive_multi", "counterfactual"}, "templates");
      c.templates.classify = t.value("classify", c.templates.classify);
      c.templates.extractive_single = t.value("extractive_single", c.templates.extractive_single);
      c.templates.extractive_multi = t.value("extractive_multi", c.templates.extractive_multi);
      c.templates.counterfactual = t.value("counterfactual", c.templates.counterfactual);
    }
    c.templates.validate();

    if (j.contains("methods")) {
      c.methods = string_list(j.at("methods"), "methods");
    } else {
      c.methods = kReferenceMethods;
      if (c.uses_endpoint()) c.methods.insert(c.methods.end(), kEndpointMethods.begin(), kEndpointMethods.end());
    }
    if (c.methods.empty()) throw ConfigError("methods must not be empty");
    for (std::size_t i = 0; i < c.methods.size(); ++i) {
      const auto& name = c.methods[i];
      if (!is_reference_method(name) && !is_endpoint_method(name)) throw ConfigError("unknown method '" + name + "'");
      if (std::find(c.methods.begin(), c.methods.begin() + static_cast<std::ptrdiff_t>(i), name) !=
          c.methods.begin() + static_cast<std::ptrdiff_t>(i))
        throw ConfigError("method '" + name + "' listed twice");
      if (is_endpoint_method(name) && !c.uses_endpoint())
        throw ConfigError("method '" + name + "' needs an endpoint");
    }

    const auto f = j.value("faithfulness", json::object());
    check_keys(f, {"reference_methods", "endpoint_methods", "sticky"}, "faithfulness");
    for (const auto& name : c.methods) {
      if (is_reference_method(name)) c.reference_curve_methods.push_back(name);
      if (is_endpoint_method(name)) c.endpoint_curve_methods.push_back(name);
    }
    if (f.contains("reference_methods"))
      c.reference_curve_methods = string_list(f.at("reference_methods"), "faithfulness.reference_methods");
    if (f.contains("endpoint_methods"))
      c.endpoint_curve_methods = string_list(f.at("endpoint_methods"), "faithfulness.endpoint_methods");
    for (const auto& name : c.reference_curve_methods) {
      if (!contains(c.methods, name)) throw ConfigError("faithfulness method '" + name + "' is not in methods");
      if (contains(c.endpoint_curve_methods, name))
        throw ConfigError("faithfulness method '" + name + "' assigned to both models");
    }
    for (const auto& name : c.endpoint_curve_methods) {
      if (!contains(c.methods, name)) throw ConfigError("faithfulness method '" + name + "' is not in methods");
      if (!c.uses_endpoint()) throw ConfigError("faithfulness.endpoint_methods needs an endpoint");
    }
    c.sticky = f.value("sticky", false);

    c.seed = j.value("seed", c.seed);
    if (j.contains("mask_token")) {
      const auto& mt = j.at("mask_token");
      check_keys(mt, {"reference", "endpoint"}, "mask_token");
      c.reference_mask = mt.value("reference", c.reference_mask);
      c.endpoint_mask = mt.value("endpoint", c.endpoint_mask);
    }
    if (c.reference_mask.empty() || c.endpoint_mask.empty()) throw ConfigError("mask tokens must not be empty");
    if (j.value("phrase_count", std::string("human_spans")) != "human_spans")
      throw ConfigError("phrase_count: only 'human_spans' is supported");
    c.strict_parsing = j.value("strict_parsing", false);
    c.workers = j.value("workers", c.workers);
    if (c.workers == 0) throw ConfigError("workers must be >= 1");
    c.output_dir = resolve(base_dir, j.value("output_dir", std::string("out")));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }

  json canon = j;
  canon.erase("output_dir");
  c.canonical = canon.dump();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path, const Overrides& overrides) {
  return parse(read_file(path), path.parent_path(), overrides);
}

std::vector<corpus::AnnotatedText> load_corpus(const CorpusSource& source, corpus::Task task) {
  const auto labels = corpus::labels_for(task);
  if (source.path) return corpus::load_jsonl(*source.path, labels);
  return corpus::gen_synthetic(task, source.n, source.seed);
}

tinylm::ModelWeights reference_model(const ModelSource& source, corpus::Task task) {
  if (source.checkpoint) {
    auto w = tinylm::load_checkpoint(*source.checkpoint);
    if (w.labels != corpus::labels_for(task))
      throw ValidationError("checkpoint labels do not match task '" + std::string(corpus::task_name(task)) + "'");
    return w;
  }
  const auto texts = load_corpus(source.train_corpus, task);
  return tinylm::train(texts, corpus::labels_for(task), source.config, source.epochs, source.lr).weights;
}

std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xF];
  }
  return out;
}

namespace {

// Serialized sink for every bundle file.
class Bundle {
 public:
  explicit Bundle(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

  void put(const std::string& name, const std::string& content) {
    std::lock_guard lock(mutex_);
    std::ofstream out(dir_ / name, std::ios::binary | std::ios::trunc);
    out << content;
    if (!out) throw std::runtime_error("cannot write '" + (dir_ / name).string() + "'");
    files_[name] = {sha256_hex(content), content.size()};
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, info] : files_) out.push_back(name);
    return out;
  }

  void manifest(const ExperimentConfig& c, const std::string& failed_stage, const std::string& error) {
    json files = json::array();
    for (const auto& [name, info] : files_)
      files.push_back({{"path", name}, {"sha256", info.first}, {"bytes", info.second}});
    json m{{"format", "xplain-run"},
           {"version", 1},
           {"xplain_version", std::string(kVersion)},
           {"tokenizer", std::string(kTokenizerId)},
           {"config_sha256", sha256_hex(c.canonical)},
           {"seeds",
            {{"run", c.seed},
             {"corpus", c.corpus.path ? json(nullptr) : json(c.corpus.seed)},
             {"train_corpus", c.model.checkpoint ? json(nullptr) : json(c.model.train_corpus.seed)},
             {"model_init", c.model.checkpoint ? json(nullptr) : json(c.model.config.seed)},
             {"mock", c.endpoint.kind == EndpointSource::Kind::mock_synthetic ? json(c.endpoint.mock.seed)
                                                                                : json(nullptr)}}},
           {"status", failed_stage.empty() ? "ok" : "failed"},
           {"failed_stage", failed_stage.empty() ? json(nullptr) : json(failed_stage)},
           {"error", error.empty() ? json(nullptr) : json(error)},
           {"files", files}};
    std::ofstream out(dir_ / "manifest.json", std::ios::binary | std::ios::trunc);
    out << m.dump(2) << '\n';
  }

 private:
  fs::path dir_;
  std::mutex mutex_;
  std::map<std::string, std::pair<std::string, std::size_t>> files_;
};

struct ReferenceResult {
  bool too_long = false;
  bool igrad_failed = false;
  std::string predicted;
  analytic::GradientRange range;
  std::vector<SaliencyMap> maps;
};

ReferenceResult reference_explain(const tinylm::ModelWeights& model, const corpus::AnnotatedText& t,
                                  const std::vector<std::string>& methods, std::uint64_t seed) {
  ReferenceResult r;
  const auto seq = tokenize(t.text);
  if (seq.size() > model.config.max_len) {
    r.too_long = true;
    return r;
  }
  const auto trace = tinylm::classify(model, seq);
  r.predicted = trace.predicted_label;
  r.range = analytic::gradient_range(model, trace);
  for (const auto& m : methods) {
    if (m == "human") {
      r.maps.push_back(saliency::spans_to_saliency(seq, t.spans));
    } else if (m == "random") {
      Rng rng(derive_seed(seed, "random\x1f" + t.id));
      std::vector<double> raw(seq.size());
      for (auto& v : raw) v = uniform_unit(rng);
      r.maps.push_back(SaliencyMap::from_raw(seq, raw, "random"));
    } else if (m == "agrad") {
      r.maps.push_back(analytic::agrad(model, trace));
    } else if (m == "gradin") {
      r.maps.push_back(analytic::gradin(model, trace));
    } else if (m == "igrad") {
      try {
        r.maps.push_back(analytic::igrad(model, trace));
      } catch (const NumericError&) {
        r.igrad_failed = true;
      }
    }
  }
  return r;
}

// The chat endpoint with whatever it needs kept alive (an embedded mock server).
struct Endpoint {
  std::unique_ptr<chat::MockServer> server;
  std::unique_ptr<chat::HttpChatClient> client;
};

Endpoint open_endpoint(const ExperimentConfig& c, const std::vector<corpus::AnnotatedText>& texts) {
  Endpoint e;
  chat::EndpointConfig http = c.endpoint.http;
  if (c.endpoint.kind != EndpointSource::Kind::http) {
    chat::MockFixture fixture =
        c.endpoint.kind == EndpointSource::Kind::mock_fixture
            ? chat::MockFixture::load(c.endpoint.fixture)
            : chat::MockFixture::from_json(selfexplain::synthetic_mock_fixture(c.task, texts, c.templates,
                                                                               c.endpoint.mock));
    e.server = std::make_unique<chat::MockServer>(std::move(fixture));
    e.server->start(0);
    http = chat::EndpointConfig{};
    http.base_url = e.server->base_url();
    http.model = "mock";
    http.backoff_initial_ms = 10;
    http.max_in_flight = static_cast<int>(std::max<std::size_t>(c.workers, 1));
    http.name = c.endpoint.kind == EndpointSource::Kind::mock_fixture
                    ? "mock:" + c.endpoint.fixture.filename().string()
                    : "mock:synthetic";
  }
  e.client = std::make_unique<chat::HttpChatClient>(http);
  return e;
}

std::vector<faithfulness::PerturbationCurve> compute_curves(
    const std::vector<reports::TextMaps>& maps, const std::map<std::string, const corpus::AnnotatedText*>& texts,
    const std::vector<std::string>& methods, const faithfulness::TextClassifier& classify,
    const faithfulness::CurveOptions& options, std::uint64_t seed, std::size_t workers) {
  struct Job {
    const reports::TextMaps* text;
    const SaliencyMap* map;
    faithfulness::Direction dir;
  };
  std::vector<Job> jobs;
  for (const auto& t : maps)
    for (const auto& m : methods)
      if (const auto* map = t.find(m))
        for (auto dir : {faithfulness::Direction::high_to_low, faithfulness::Direction::low_to_high})
          jobs.push_back({&t, map, dir});
  std::vector<faithfulness::PerturbationCurve> out(jobs.size());
  parallel_for(jobs.size(), workers, [&](std::size_t i) {
    const auto& job = jobs[i];
    const auto it = texts.find(job.text->text_id);
    if (it == texts.end()) throw ValidationError("no text with id '" + job.text->text_id + "' in the corpus");
    out[i] = faithfulness::run_curve(classify, it->second->text, *job.map, job.dir, options,
                                     faithfulness::curve_seed(seed, job.text->text_id, job.map->method, job.dir),
                                     job.text->text_id);
  });
  return out;
}

faithfulness::TextClassifier reference_classifier(const tinylm::ModelWeights& model) {
  return [&model](const std::string& text) { return tinylm::classify(model, tokenize(text)).predicted_label; };
}

json session_json(const chat::ChatTranscript& t) {
  json msgs = json::array();
  for (const auto& m : t.messages) msgs.push_back({{"role", std::string(chat::role_name(m.role))}, {"content", m.content}});
  return msgs;
}

template <typename T>
json opt(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& c) {
  std::string stage = "output";
  std::unique_ptr<Bundle> bundle;
  try {
    bundle = std::make_unique<Bundle>(c.output_dir);
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }

  try {
    stage = "corpus";
    const auto texts = load_corpus(c.corpus, c.task);
    const auto labels = corpus::labels_for(c.task);
    const std::string task(corpus::task_name(c.task));

    stage = "model";
    auto model = reference_model(c.model, c.task);
    if (!c.model.checkpoint) bundle->put("model.json", tinylm::to_checkpoint_json(model));

    stage = "analytic";
    std::vector<std::string> ref_methods;
    for (const auto& m : c.methods)
      if (is_reference_method(m)) ref_methods.push_back(m);
    std::vector<ReferenceResult> ref(texts.size());
    parallel_for(texts.size(), c.workers,
                 [&](std::size_t i) { ref[i] = reference_explain(model, texts[i], ref_methods, c.seed); });

    stage = "selfexplain";
    Endpoint endpoint;
    std::vector<selfexplain::SelfExplanationRecord> records;
    const bool want_self = contains(c.methods, "extractive") || contains(c.methods, "counterfactual");
    if (c.uses_endpoint()) endpoint = open_endpoint(c, texts);
    if (want_self) {
      selfexplain::PipelineOptions po;
      po.strict = c.strict_parsing;
      po.counterfactuals = contains(c.methods, "counterfactual");
      po.workers = c.workers;
      records = selfexplain::run_pipeline(*endpoint.client, c.templates, labels, texts, po);
    }

    // Maps in method order, one TextMaps per usable text.
    std::size_t phrases_not_found = 0;
    std::vector<reports::TextMaps> maps;
    for (std::size_t i = 0; i < texts.size(); ++i) {
      if (ref[i].too_long) continue;
      reports::TextMaps tm{texts[i].id, {}};
      const auto seq = tokenize(texts[i].text);
      for (const auto& m : c.methods) {
        if (is_reference_method(m)) {
          for (const auto& map : ref[i].maps)
            if (map.method == m) tm.maps.push_back(map);
        } else if (!records.empty() && records[i].classified()) {
          const auto& rec = records[i];
          if (m == "extractive" && !rec.extractive_phrases.empty()) {
            auto conv = saliency::phrases_to_saliency(texts[i].text, seq, rec.extractive_phrases);
            for (const auto& match : conv.matches) phrases_not_found += match.found ? 0 : 1;
            tm.maps.push_back(std::move(conv.map));
          } else if (m == "counterfactual" && rec.counterfactual) {
            tm.maps.push_back(saliency::counterfactual_to_saliency(seq, *rec.counterfactual).map);
          }
        }
      }
      maps.push_back(std::move(tm));
    }
    bundle->put("saliency.csv", reports::saliency_table(maps).str());

    stage = "correlation";
    const auto corr = reports::correlations(maps, c.methods);
    bundle->put("correlation.csv", corr.table.str());

    stage = "faithfulness";
    std::map<std::string, const corpus::AnnotatedText*> by_id;
    for (const auto& t : texts) by_id.emplace(t.id, &t);
    std::vector<faithfulness::PerturbationCurve> curves;
    if (!c.reference_curve_methods.empty())
      curves = compute_curves(maps, by_id, c.reference_curve_methods, reference_classifier(model),
                              {c.reference_mask, c.sticky}, c.seed, c.workers);
    if (!c.endpoint_curve_methods.empty()) {
      auto more = compute_curves(
          maps, by_id, c.endpoint_curve_methods,
          selfexplain::endpoint_classifier(*endpoint.client, c.templates, labels, c.strict_parsing),
          {c.endpoint_mask, c.sticky}, c.seed, c.workers);
      curves.insert(curves.end(), std::make_move_iterator(more.begin()), std::make_move_iterator(more.end()));
    }
    std::size_t incomplete_curves = 0;
    if (!curves.empty()) {
      bundle->put("curves.csv", reports::curves_table(curves).str());
      const auto agg = faithfulness::aggregate(curves);
      incomplete_curves = agg.incomplete;
      bundle->put("aggregate.csv", reports::aggregate_table(agg).str());
      bundle->put("occluded.csv", reports::occluded_table(agg).str());
    }

    stage = "counterfactual";
    std::vector<reports::CounterfactualRow> cf_rows;
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& rec = records[i];
      if (!rec.counterfactual) continue;
      reports::CounterfactualRow row;
      row.text_id = rec.text_id;
      row.endpoint = endpoint.client->id();
      row.task = task;
      row.original_label = rec.predicted_label;
      row.counterfactual_label = rec.counterfactual_label.value_or("");
      row.valid = rec.valid;
      row.scores = textsim::compare(texts[i].text, *rec.counterfactual);
      row.changed_tokens = saliency::counterfactual_to_saliency(tokenize(texts[i].text), *rec.counterfactual).changed;
      row.counterfactual = *rec.counterfactual;
      cf_rows.push_back(std::move(row));
    }
    const auto cf_summary = reports::summarize(cf_rows);
    if (contains(c.methods, "counterfactual")) {
      bundle->put("counterfactuals.csv", reports::counterfactuals_table(cf_rows).str());
      bundle->put("counterfactual_report.csv", reports::counterfactual_report_table(cf_summary).str());
    }

    stage = "report";
    csv::Writer pred({"text_id", "gold", "reference_label", "endpoint_label"});
    std::vector<std::string> gold, predicted, ep_gold, ep_pred;
    double gmin = 0.0, gmax = 0.0;
    std::size_t too_long = 0, igrad_failed = 0, classified = 0;
    for (std::size_t i = 0; i < texts.size(); ++i) {
      const auto ep = records.empty() ? std::string() : records[i].predicted_label;
      pred.row({texts[i].id, texts[i].label, ref[i].predicted, ep});
      if (ref[i].too_long) {
        ++too_long;
        continue;
      }
      igrad_failed += ref[i].igrad_failed;
      gold.push_back(texts[i].label);
      predicted.push_back(ref[i].predicted);
      gmin += ref[i].range.min;
      gmax += ref[i].range.max;
      if (!ep.empty()) {
        ep_gold.push_back(texts[i].label);
        ep_pred.push_back(ep);
      }
    }
    bundle->put("predictions.csv", pred.str());
    classified = ep_pred.size();

    std::size_t invalid_maps = 0, map_count = 0;
    for (const auto& t : maps)
      for (const auto& m : t.maps) {
        ++map_count;
        invalid_maps += m.satisfies_invariants() ? 0 : 1;
      }

    if (!records.empty()) {
      std::string lines;
      for (const auto& r : records) {
        json j{{"text_id", r.text_id},
               {"endpoint", endpoint.client->id()},
               {"predicted_label", r.predicted_label},
               {"phrase_count", r.phrase_count},
               {"extractive_phrases", r.extractive_phrases},
               {"counterfactual", opt(r.counterfactual)},
               {"counterfactual_label", opt(r.counterfactual_label)},
               {"valid", opt(r.valid)},
               {"notes", r.notes},
               {"failed_stage", r.failed_stage.empty() ? json(nullptr) : json(r.failed_stage)},
               {"error", r.error.empty() ? json(nullptr) : json(r.error)},
               {"extractive_session", session_json(r.extractive_session)},
               {"counterfactual_session", session_json(r.counterfactual_session)}};
        lines += j.dump() + '\n';
      }
      bundle->put("transcripts.jsonl", lines);
    }

    std::size_t parse_failures = 0, validity_unknown = 0;
    for (const auto& r : records) {
      parse_failures += r.failed_stage == "classify" ? 1 : 0;
      validity_unknown += (r.counterfactual && !r.valid) ? 1 : 0;
    }
    const double n_eval = static_cast<double>(std::max<std::size_t>(gold.size(), 1));
    json summary{
        {"task", task},
        {"texts", texts.size()},
        {"methods", c.methods},
        {"reference_model",
         {{"macro_f1", gold.empty() ? json(nullptr) : json(reports::macro_f1(gold, predicted))},
          {"gradient_min_mean", gmin / n_eval},
          {"gradient_max_mean", gmax / n_eval}}},
        {"maps", {{"count", map_count}, {"invariant_violations", invalid_maps}}},
        {"correlation",
         {{"pairs", corr.pairs}, {"excluded_pairs", corr.excluded_pairs}, {"constant_maps", corr.constant_maps}}},
        {"exclusions",
         {{"too_long", too_long},
          {"igrad_degenerate", igrad_failed},
          {"classification_parse", parse_failures},
          {"phrases_not_found", phrases_not_found},
          {"validity_unknown", validity_unknown},
          {"incomplete_curves", incomplete_curves}}},
    };
    if (c.uses_endpoint()) {
      summary["endpoint"] = {{"id", endpoint.client->id()},
                             {"classified", classified},
                             {"macro_f1", ep_gold.empty() ? json(nullptr) : json(reports::macro_f1(ep_gold, ep_pred))}};
      if (!cf_summary.empty())
        summary["counterfactual"] = {{"validity_rate", cf_summary.front().validity_rate},
                                     {"valid", cf_summary.front().valid},
                                     {"judged", cf_summary.front().judged},
                                     {"generated", cf_summary.front().generated}};
    }
    bundle->put("summary.json", summary.dump(2) + '\n');
    bundle->manifest(c, "", "");
    return {c.output_dir, bundle->names()};
  } catch (const std::exception& e) {
    bundle->manifest(c, stage, e.what());
    throw StageError(stage, e.what());
  }
}

std::string explain_table(const tinylm::ModelWeights& model, const std::string& text, const std::string& method) {
  const auto seq = tokenize(text);
  const auto trace = tinylm::classify(model, seq);
  SaliencyMap map;
  if (method == "agrad")
    map = analytic::agrad(model, trace);
  else if (method == "gradin")
    map = analytic::gradin(model, trace);
  else if (method == "igrad")
    map = analytic::igrad(model, trace);
  else
    throw ConfigError("explain: method must be agrad, gradin or igrad, not '" + method + "'");
  std::string out = "predicted\t" + trace.predicted_label + "\ntoken\tweight\n";
  for (std::size_t i = 0; i < map.size(); ++i) out += map.token_seq.tokens[i] + '\t' + csv::number(map.weights[i]) + '\n';
  return out;
}

void rerun_curves(const ExperimentConfig& c, const fs::path& saliency_csv, const std::optional<fs::path>& checkpoint,
                  const fs::path& out_dir) {
  const auto texts = load_corpus(c.corpus, c.task);
  std::map<std::string, const corpus::AnnotatedText*> by_id;
  for (const auto& t : texts) by_id.emplace(t.id, &t);
  const auto maps = reports::read_saliency(csv::read(saliency_csv));

  ModelSource source = c.model;
  if (checkpoint) source.checkpoint = *checkpoint;
  const auto model = reference_model(source, c.task);

  std::vector<faithfulness::PerturbationCurve> curves;
  if (!c.reference_curve_methods.empty())
    curves = compute_curves(maps, by_id, c.reference_curve_methods, reference_classifier(model),
                            {c.reference_mask, c.sticky}, c.seed, c.workers);
  if (!c.endpoint_curve_methods.empty()) {
    auto endpoint = open_endpoint(c, texts);
    auto more = compute_curves(maps, by_id, c.endpoint_curve_methods,
                               selfexplain::endpoint_classifier(*endpoint.client, c.templates,
                                                                corpus::labels_for(c.task), c.strict_parsing),
                               {c.endpoint_mask, c.sticky}, c.seed, c.workers);
    curves.insert(curves.end(), std::make_move_iterator(more.begin()), std::make_move_iterator(more.end()));
  }
  fs::create_directories(out_dir);
  reports::curves_table(curves).write(out_dir / "curves.csv");
  const auto agg = faithfulness::aggregate(curves);
  reports::aggregate_table(agg).write(out_dir / "aggregate.csv");
  reports::occluded_table(agg).write(out_dir / "occluded.csv");
}

void recompute_reports(const fs::path& in_dir, const fs::path& out_dir, const std::vector<std::string>& methods) {
  fs::create_directories(out_dir);
  std::vector<std::string> order = methods;
  if (order.empty() && fs::exists(in_dir / "summary.json")) {
    const auto s = json::parse(read_file(in_dir / "summary.json"));
    if (s.contains("methods")) order = s.at("methods").get<std::vector<std::string>>();
  }
  bool any = false;
  if (fs::exists(in_dir / "saliency.csv")) {
    const auto maps = reports::read_saliency(csv::read(in_dir / "saliency.csv"));
    if (order.empty())
      for (const auto& t : maps)
        for (const auto& m : t.maps)
          if (!contains(order, m.method)) order.push_back(m.method);
    reports::correlations(maps, order).table.write(out_dir / "correlation.csv");
    any = true;
  }
  if (fs::exists(in_dir / "curves.csv")) {
    const auto agg = faithfulness::aggregate(reports::read_curves(csv::read(in_dir / "curves.csv")));
    reports::aggregate_table(agg).write(out_dir / "aggregate.csv");
    reports::occluded_table(agg).write(out_dir / "occluded.csv");
    any = true;
  }
  if (fs::exists(in_dir / "counterfactuals.csv")) {
    const auto rows = reports::read_counterfactuals(csv::read(in_dir / "counterfactuals.csv"));
    reports::counterfactual_report_table(reports::summarize(rows)).write(out_dir / "counterfactual_report.csv");
    any = true;
  }
  if (!any) throw ConfigError("no per-text CSVs (saliency, curves, counterfactuals) in '" + in_dir.string() + "'");
}

}  // namespace xplain::experiment
