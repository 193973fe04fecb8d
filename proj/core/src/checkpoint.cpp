#include <fstream>
#include <sstream>

#include <json.hpp>

#include "xplain/tinylm.hpp"

namespace xplain::tinylm {

using nlohmann::json;

namespace {

constexpr const char* kFormat = "xplain-tinylm";
constexpr int kVersion = 1;

std::string activation_name(Activation a) { return a == Activation::gelu ? "gelu" : "identity"; }
std::string scalar_name(OutputScalar s) { return s == OutputScalar::logit ? "logit" : "probability"; }

json config_to_json(const ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size},
              {"d_model", c.d_model},
              {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},
              {"d_head", c.d_head},
              {"d_ff", c.d_ff},
              {"max_len", c.max_len},
              {"seed", c.seed},
              {"layer_norm", c.layer_norm},
              {"activation", activation_name(c.activation)},
              {"output_scalar", scalar_name(c.output_scalar)},
              {"batch_size", c.batch_size},
              {"adam_beta1", c.adam_beta1},
              {"adam_beta2", c.adam_beta2},
              {"adam_eps", c.adam_eps},
              {"token_dropout", c.token_dropout}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_head = j.at("d_head").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.layer_norm = j.at("layer_norm").get<bool>();
  const auto act = j.at("activation").get<std::string>();
  if (act != "gelu" && act != "identity") throw ValidationError("checkpoint: unknown activation '" + act + "'");
  c.activation = act == "gelu" ? Activation::gelu : Activation::identity;
  const auto sc = j.at("output_scalar").get<std::string>();
  if (sc != "logit" && sc != "probability") throw ValidationError("checkpoint: unknown output_scalar '" + sc + "'");
  c.output_scalar = sc == "logit" ? OutputScalar::logit : OutputScalar::probability;
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.adam_beta1 = j.at("adam_beta1").get<double>();
  c.adam_beta2 = j.at("adam_beta2").get<double>();
  c.adam_eps = j.at("adam_eps").get<double>();
  c.token_dropout = j.at("token_dropout").get<double>();
  return c;
}

}  // namespace

std::string to_checkpoint_json(const ModelWeights& w) {
  ModelWeights copy = w;
  json ts = json::array();
  for (const auto& t : tensors(copy)) {
    const auto v = t.values();
    ts.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}, {"data", std::vector<double>(v.begin(), v.end())}});
  }
  json j{{"format", kFormat},
         {"version", kVersion},
         {"config", config_to_json(w.config)},
         {"vocab", w.vocab.words()},
         {"labels", w.labels.labels()},
         {"tensors", ts}};
  return j.dump() + "\n";
}

ModelWeights from_checkpoint_json(const std::string& content, const std::optional<ModelConfig>& expected) {
  json j;
  try {
    j = json::parse(content);
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
  if (j.value("format", "") != kFormat) throw ValidationError("checkpoint: not an xplain-tinylm file");
  if (j.value("version", 0) != kVersion)
    throw ValidationError("checkpoint: unsupported version " + std::to_string(j.value("version", 0)));

  ModelConfig config;
  std::vector<std::string> words, labels;
  try {
    config = config_from_json(j.at("config"));
    words = j.at("vocab").get<std::vector<std::string>>();
    labels = j.at("labels").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what());
  }
  if (expected) {
    ModelConfig want = *expected;
    if (want.vocab_size == 0) want.vocab_size = config.vocab_size;
    if (!(want == config)) throw ValidationError("checkpoint: config header does not match the expected model config");
  }
  Vocabulary vocab(words);
  if (vocab.size() != words.size() || vocab.words() != words)
    throw ValidationError("checkpoint: vocabulary must start with <unk>, <sep> and contain no duplicates");
  if (config.vocab_size != vocab.size())
    throw ValidationError("checkpoint: vocab_size " + std::to_string(config.vocab_size) + " != vocabulary length " +
                          std::to_string(vocab.size()));

  ModelWeights w = ModelWeights::init(config, std::move(vocab), corpus::LabelSet(labels));
  auto refs = tensors(w);
  const auto& stored = j.at("tensors");
  if (stored.size() != refs.size())
    throw ValidationError("checkpoint: expected " + std::to_string(refs.size()) + " tensors, found " +
                          std::to_string(stored.size()));
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& s = stored[i];
    const auto& r = refs[i];
    if (s.at("name").get<std::string>() != r.name || s.at("rows").get<std::size_t>() != r.rows ||
        s.at("cols").get<std::size_t>() != r.cols)
      throw ValidationError("checkpoint: tensor " + std::to_string(i) + " ('" + s.at("name").get<std::string>() +
                            "') does not match the config shape of '" + r.name + "'");
    const auto data = s.at("data").get<std::vector<double>>();
    if (data.size() != r.rows * r.cols) throw ValidationError("checkpoint: tensor '" + r.name + "' has wrong length");
    std::copy(data.begin(), data.end(), r.data);
  }
  return w;
}

void save_checkpoint(const std::filesystem::path& path, const ModelWeights& w) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint '" + path.string() + "'");
  out << to_checkpoint_json(w);
}

ModelWeights load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_checkpoint_json(ss.str(), expected);
}

}  // namespace xplain::tinylm
