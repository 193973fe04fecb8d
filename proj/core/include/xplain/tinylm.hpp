#pragma once

// Minimal decoder-only transformer classifier with full introspection.
//
// Input layout: text tokens followed by a <sep> token; the label is read from
// the head at the <sep> position. Row vectors throughout: a sequence of N
// positions is an N x d_model matrix. All arithmetic is in double.
//
//   h0_i  = E[t_i] + P[i]
//   block = x + Attn(LN1(x));  x + FFN(LN2(x))        (pre-norm, causal)
//   hL    = LNf(x_L)[N-1]
//   logit = head * hL + head_bias                      (one head row per label)

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "xplain/corpus.hpp"
#include "xplain/errors.hpp"
#include "xplain/tokenizer.hpp"

namespace xplain::tinylm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { gelu, identity };

/// Which scalar of the output is differentiated by the attribution methods.
enum class OutputScalar { logit, probability };

struct ModelConfig {
  std::size_t vocab_size = 0;  // filled from the vocabulary at init/train time
  std::size_t d_model = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_head = 8;
  std::size_t d_ff = 64;
  std::size_t max_len = 64;  // maximum number of text tokens (the <sep> slot is extra)
  std::uint64_t seed = 0;
  bool layer_norm = true;
  Activation activation = Activation::gelu;
  OutputScalar output_scalar = OutputScalar::logit;
  std::size_t batch_size = 4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double token_dropout = 0.0;  // training only: each text token becomes <unk> with this probability

  /// Throws ValidationError when d_model != n_heads * d_head or a count is zero.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
  Matrix wq, wk, wv, wo;  // d x d
  Vector bo;
  Vector ln1_gain, ln1_bias;
  Vector ln2_gain, ln2_bias;
  Matrix w1;  // d x d_ff
  Vector b1;
  Matrix w2;  // d_ff x d
  Vector b2;
};

struct ModelWeights {
  ModelConfig config;
  Vocabulary vocab;
  corpus::LabelSet labels;

  Matrix token_embedding;     // vocab x d
  Matrix position_embedding;  // (max_len + 1) x d
  std::vector<LayerWeights> layers;
  Vector lnf_gain, lnf_bias;
  Matrix head;  // labels x d
  Vector head_bias;

  /// Seeded initialisation. Deterministic in (config, vocab, labels).
  static ModelWeights init(ModelConfig config, Vocabulary vocab, corpus::LabelSet labels);
  /// Same shapes, every entry zero.
  ModelWeights zeros_like() const;
};

/// Named view over one parameter tensor (column-major storage, rows x cols).
struct TensorRef {
  std::string name;
  double* data;
  std::size_t rows;
  std::size_t cols;
  std::span<double> values() const { return {data, rows * cols}; }
};

/// Every trainable tensor in a fixed order; the order defines the checkpoint layout.
std::vector<TensorRef> tensors(ModelWeights& w);

namespace detail {

struct NormCache {
  Matrix xhat;
  Vector inv_std;
};

struct LayerCache {
  Matrix x_in;
  NormCache ln1;
  Matrix xn;
  Matrix q, k, v;
  Matrix concat;  // sum_k A[h](j,k) v_h(k), heads side by side
  Matrix x_mid;
  NormCache ln2;
  Matrix xn2;
  Matrix z;  // pre-activation
  Matrix g;  // post-activation
};

}  // namespace detail

/// One classification pass with everything the explainers need.
struct ForwardTrace {
  TokenSequence token_seq;        // text tokens only
  std::vector<int> input_ids;     // text ids + <sep>
  Matrix input_embeddings;        // h0, N x d (last row is <sep>)
  std::vector<std::vector<Matrix>> attentions;  // [layer][head], N x N, causal
  Vector output_embedding;        // hL at the final position
  Vector logits;
  std::size_t predicted = 0;      // index into the label set
  std::string predicted_label;

  std::vector<detail::LayerCache> cache;
  detail::NormCache final_norm;
  Matrix final_hidden;  // LNf output for every position

  std::size_t positions() const { return static_cast<std::size_t>(input_embeddings.rows()); }
  std::size_t text_length() const { return positions() - 1; }
};

class LengthError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Input embeddings h0 for a text (appends <sep>).
Matrix embed(const ModelWeights& w, const TokenSequence& seq);

/// Full forward pass. Throws LengthError when seq.size() > max_len.
ForwardTrace classify(const ModelWeights& w, const TokenSequence& seq);

/// Forward pass from explicit input embeddings (N x d, including the <sep> row).
ForwardTrace forward_embeddings(const ModelWeights& w, const Matrix& h0, TokenSequence seq = {});

/// Logits after replacing the last layer's attention by `last_attention`
/// ([head] N x N) and re-running everything downstream of it.
Vector logits_with_last_attention(const ModelWeights& w, const ForwardTrace& trace,
                                  const std::vector<Matrix>& last_attention);

/// Head applied at every position (N x labels). Row j only depends on tokens <= j.
Matrix position_logits(const ModelWeights& w, const ForwardTrace& trace);

/// The configured output scalar (logit or probability of `target`) from logits.
double output_scalar(const ModelConfig& config, const Vector& logits, std::size_t target);

/// d scalar(target) / d h0, N x d. Rows are exact reverse-mode gradients.
Matrix grad_input(const ModelWeights& w, const ForwardTrace& trace, std::size_t target);

/// d scalar(target) / d A_last[h](j,k) with the post-softmax entries held as
/// free variables. Causally masked entries (k > j) are reported as 0.
std::vector<Matrix> grad_attention_last(const ModelWeights& w, const ForwardTrace& trace, std::size_t target);

/// d hL / d h0 as a d x (N*d) matrix; column i*d + c is component c of h0_i.
Matrix jacobian(const ModelWeights& w, const ForwardTrace& trace);

struct TrainResult {
  ModelWeights weights;
  std::vector<double> epoch_loss;  // mean cross-entropy per epoch
};

/// Adam on the label cross-entropy at the <sep> position. The vocabulary is
/// built from the corpus. Throws ValidationError for labels outside `labels`,
/// NumericError (naming the epoch) when the loss becomes non-finite.
TrainResult train(const std::vector<corpus::AnnotatedText>& corpus, const corpus::LabelSet& labels,
                  ModelConfig config, std::size_t epochs, double lr);

/// Vocabulary in first-appearance order over the corpus tokens.
Vocabulary build_vocabulary(const std::vector<corpus::AnnotatedText>& corpus);

// Checkpoints: JSON, layout in docs/checkpoint.md.
std::string to_checkpoint_json(const ModelWeights& w);
ModelWeights from_checkpoint_json(const std::string& content, const std::optional<ModelConfig>& expected = {});
void save_checkpoint(const std::filesystem::path& path, const ModelWeights& w);
ModelWeights load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected = {});

}  // namespace xplain::tinylm
