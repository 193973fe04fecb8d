#include "xplain/tinylm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "xplain/rng.hpp"

namespace xplain::tinylm {

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = stddev * standard_normal(rng);
  return m;
}

Matrix layer_norm(const Matrix& x, const Vector& gain, const Vector& bias, detail::NormCache& cache) {
  const auto n = x.rows();
  const auto d = static_cast<double>(x.cols());
  cache.xhat.resize(n, x.cols());
  cache.inv_std.resize(n);
  Matrix y(n, x.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.row(i).sum() / d;
    const double var = (x.row(i).array() - mean).square().sum() / d;
    const double inv = 1.0 / std::sqrt(var + kNormEps);
    cache.inv_std(i) = inv;
    cache.xhat.row(i) = (x.row(i).array() - mean) * inv;
    y.row(i) = cache.xhat.row(i).cwiseProduct(gain.transpose()) + bias.transpose();
  }
  return y;
}

// dy -> dx for y = gain * xhat + bias. Accumulates parameter gradients when requested.
Matrix layer_norm_backward(const Matrix& dy, const detail::NormCache& cache, const Vector& gain, Vector* dgain,
                           Vector* dbias) {
  const auto n = dy.rows();
  const auto d = static_cast<double>(dy.cols());
  Matrix dx(n, dy.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::RowVectorXd dxhat = dy.row(i).cwiseProduct(gain.transpose());
    const double mean_dxhat = dxhat.sum() / d;
    const double mean_dxhat_xhat = dxhat.cwiseProduct(cache.xhat.row(i)).sum() / d;
    dx.row(i) = cache.inv_std(i) *
                (dxhat.array() - mean_dxhat - cache.xhat.row(i).array() * mean_dxhat_xhat).matrix();
    if (dgain) *dgain += dy.row(i).cwiseProduct(cache.xhat.row(i)).transpose();
    if (dbias) *dbias += dy.row(i).transpose();
  }
  return dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

Matrix activate(const ModelConfig& c, const Matrix& z) {
  if (c.activation == Activation::identity) return z;
  return z.unaryExpr([](double v) { return gelu(v); });
}

Matrix activation_grad(const ModelConfig& c, const Matrix& z) {
  if (c.activation == Activation::identity) return Matrix::Ones(z.rows(), z.cols());
  return z.unaryExpr([](double v) { return gelu_grad(v); });
}

Matrix causal_softmax(const Matrix& scores) {
  const auto n = scores.rows();
  Matrix a = Matrix::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double m = scores.row(j).head(j + 1).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index k = 0; k <= j; ++k) {
      a(j, k) = std::exp(scores(j, k) - m);
      sum += a(j, k);
    }
    a.row(j).head(j + 1) /= sum;
  }
  return a;
}

Matrix add_row_bias(Matrix m, const Vector& b) {
  m.rowwise() += b.transpose();
  return m;
}

// Everything after the attention weights of one layer: output projection,
// residual, FFN. Fills the corresponding cache fields and returns the layer output.
Matrix finish_layer(const ModelConfig& c, const LayerWeights& lw, detail::LayerCache& lc) {
  Matrix x_mid = lc.x_in + add_row_bias(lc.concat * lw.wo, lw.bo);
  lc.x_mid = x_mid;
  lc.xn2 = c.layer_norm ? layer_norm(x_mid, lw.ln2_gain, lw.ln2_bias, lc.ln2) : x_mid;
  lc.z = add_row_bias(lc.xn2 * lw.w1, lw.b1);
  lc.g = activate(c, lc.z);
  return x_mid + add_row_bias(lc.g * lw.w2, lw.b2);
}

Matrix attention_mix(const std::vector<Matrix>& heads, const Matrix& v, std::size_t d_head) {
  Matrix concat(v.rows(), v.cols());
  for (std::size_t h = 0; h < heads.size(); ++h) {
    const auto off = static_cast<Eigen::Index>(h * d_head);
    const auto dh = static_cast<Eigen::Index>(d_head);
    concat.middleCols(off, dh) = heads[h] * v.middleCols(off, dh);
  }
  return concat;
}

void finish_trace(const ModelWeights& w, ForwardTrace& t, const Matrix& x_last) {
  const auto& c = w.config;
  t.final_hidden = c.layer_norm ? layer_norm(x_last, w.lnf_gain, w.lnf_bias, t.final_norm) : x_last;
  t.output_embedding = t.final_hidden.row(t.final_hidden.rows() - 1).transpose();
  t.logits = w.head * t.output_embedding + w.head_bias;
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < t.logits.size(); ++i)
    if (t.logits(i) > t.logits(best)) best = i;
  t.predicted = static_cast<std::size_t>(best);
  t.predicted_label = w.labels.at(t.predicted);
}

Vector softmax(const Vector& logits) {
  Vector p = (logits.array() - logits.maxCoeff()).exp();
  return p / p.sum();
}

// Gradient of the configured output scalar with respect to hL.
Vector output_seed(const ModelWeights& w, const ForwardTrace& t, std::size_t target) {
  if (target >= w.labels.size()) throw ValidationError("target label index out of range");
  const Vector row = w.head.row(static_cast<Eigen::Index>(target)).transpose();
  if (w.config.output_scalar == OutputScalar::logit) return row;
  const Vector p = softmax(t.logits);
  const Vector mean_row = w.head.transpose() * p;
  return p(static_cast<Eigen::Index>(target)) * (row - mean_row);
}

struct BackwardOut {
  Matrix d_input;
  std::vector<Matrix> d_last_attention;
};

// Reverse pass from d hL (final position). When `grads` is set, parameter
// gradients are accumulated into it.
BackwardOut backward(const ModelWeights& w, const ForwardTrace& t, const Vector& d_output, ModelWeights* grads,
                     bool want_attention) {
  const auto& c = w.config;
  const auto n = static_cast<Eigen::Index>(t.positions());
  const auto dh = static_cast<Eigen::Index>(c.d_head);
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.d_head));

  Matrix d_final = Matrix::Zero(n, static_cast<Eigen::Index>(c.d_model));
  d_final.row(n - 1) = d_output.transpose();
  Matrix dx = c.layer_norm ? layer_norm_backward(d_final, t.final_norm, w.lnf_gain, grads ? &grads->lnf_gain : nullptr,
                                                 grads ? &grads->lnf_bias : nullptr)
                           : d_final;
  BackwardOut out;

  for (std::size_t li = c.n_layers; li-- > 0;) {
    const auto& lw = w.layers[li];
    const auto& lc = t.cache[li];
    LayerWeights* lg = grads ? &grads->layers[li] : nullptr;

    // FFN branch.
    Matrix dx_mid = dx;
    if (lg) {
      lg->w2 += lc.g.transpose() * dx;
      lg->b2 += dx.colwise().sum().transpose();
    }
    Matrix dz = (dx * lw.w2.transpose()).cwiseProduct(activation_grad(c, lc.z));
    if (lg) {
      lg->w1 += lc.xn2.transpose() * dz;
      lg->b1 += dz.colwise().sum().transpose();
    }
    Matrix dxn2 = dz * lw.w1.transpose();
    dx_mid += c.layer_norm ? layer_norm_backward(dxn2, lc.ln2, lw.ln2_gain, lg ? &lg->ln2_gain : nullptr,
                                                 lg ? &lg->ln2_bias : nullptr)
                           : dxn2;

    // Attention branch.
    if (lg) {
      lg->wo += lc.concat.transpose() * dx_mid;
      lg->bo += dx_mid.colwise().sum().transpose();
    }
    const Matrix dconcat = dx_mid * lw.wo.transpose();
    Matrix dq(n, dconcat.cols()), dk(n, dconcat.cols()), dv(n, dconcat.cols());
    const bool capture = want_attention && li + 1 == c.n_layers;
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      const auto off = static_cast<Eigen::Index>(h) * dh;
      const Matrix& a = t.attentions[li][h];
      const Matrix d_head_out = dconcat.middleCols(off, dh);
      Matrix da = d_head_out * lc.v.middleCols(off, dh).transpose();
      for (Eigen::Index j = 0; j < n; ++j)
        for (Eigen::Index k = j + 1; k < n; ++k) da(j, k) = 0.0;
      if (capture) out.d_last_attention.push_back(da);
      dv.middleCols(off, dh) = a.transpose() * d_head_out;
      Matrix ds(n, n);
      for (Eigen::Index j = 0; j < n; ++j) {
        const double dot = a.row(j).dot(da.row(j));
        ds.row(j) = a.row(j).cwiseProduct((da.row(j).array() - dot).matrix());
      }
      ds *= scale;
      dq.middleCols(off, dh) = ds * lc.k.middleCols(off, dh);
      dk.middleCols(off, dh) = ds.transpose() * lc.q.middleCols(off, dh);
    }
    if (lg) {
      lg->wq += lc.xn.transpose() * dq;
      lg->wk += lc.xn.transpose() * dk;
      lg->wv += lc.xn.transpose() * dv;
    }
    Matrix dxn = dq * lw.wq.transpose() + dk * lw.wk.transpose() + dv * lw.wv.transpose();
    dx = dx_mid + (c.layer_norm ? layer_norm_backward(dxn, lc.ln1, lw.ln1_gain, lg ? &lg->ln1_gain : nullptr,
                                                      lg ? &lg->ln1_bias : nullptr)
                                : dxn);
  }

  if (grads) {
    for (Eigen::Index i = 0; i < n; ++i) {
      grads->token_embedding.row(t.input_ids[static_cast<std::size_t>(i)]) += dx.row(i);
      grads->position_embedding.row(i) += dx.row(i);
    }
  }
  out.d_input = std::move(dx);
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_head == 0 || d_ff == 0 || max_len == 0 || batch_size == 0)
    throw ValidationError("model config: all counts must be >= 1");
  if (!(token_dropout >= 0.0 && token_dropout < 1.0))
    throw ValidationError("model config: token_dropout must be in [0, 1)");
  if (d_model != n_heads * d_head) throw ValidationError("model config: d_model must equal n_heads * d_head");
}

ModelWeights ModelWeights::init(ModelConfig config, Vocabulary vocab, corpus::LabelSet labels) {
  config.vocab_size = vocab.size();
  config.validate();
  ModelWeights w;
  w.config = config;
  w.vocab = std::move(vocab);
  w.labels = std::move(labels);

  Rng rng(splitmix64(config.seed));
  const auto d = config.d_model;
  const auto ff = config.d_ff;
  const double proj = 1.0 / std::sqrt(static_cast<double>(d));
  const double resid = proj / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  w.token_embedding = random_matrix(rng, config.vocab_size, d, 0.5);
  w.position_embedding = random_matrix(rng, config.max_len + 1, d, 0.1);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerWeights lw;
    lw.wq = random_matrix(rng, d, d, proj);
    lw.wk = random_matrix(rng, d, d, proj);
    lw.wv = random_matrix(rng, d, d, proj);
    lw.wo = random_matrix(rng, d, d, resid);
    lw.bo = Vector::Zero(static_cast<Eigen::Index>(d));
    lw.ln1_gain = Vector::Ones(static_cast<Eigen::Index>(d));
    lw.ln1_bias = Vector::Zero(static_cast<Eigen::Index>(d));
    lw.ln2_gain = Vector::Ones(static_cast<Eigen::Index>(d));
    lw.ln2_bias = Vector::Zero(static_cast<Eigen::Index>(d));
    lw.w1 = random_matrix(rng, d, ff, proj);
    lw.b1 = Vector::Zero(static_cast<Eigen::Index>(ff));
    lw.w2 = random_matrix(rng, ff, d, 1.0 / std::sqrt(static_cast<double>(ff) * 2.0 * config.n_layers));
    lw.b2 = Vector::Zero(static_cast<Eigen::Index>(d));
    w.layers.push_back(std::move(lw));
  }
  w.lnf_gain = Vector::Ones(static_cast<Eigen::Index>(d));
  w.lnf_bias = Vector::Zero(static_cast<Eigen::Index>(d));
  w.head = random_matrix(rng, w.labels.size(), d, proj);
  w.head_bias = Vector::Zero(static_cast<Eigen::Index>(w.labels.size()));
  return w;
}

ModelWeights ModelWeights::zeros_like() const {
  ModelWeights z = *this;
  for (auto& t : tensors(z)) std::fill(t.values().begin(), t.values().end(), 0.0);
  return z;
}

std::vector<TensorRef> tensors(ModelWeights& w) {
  std::vector<TensorRef> out;
  auto add = [&out](std::string name, auto& m) {
    out.push_back({std::move(name), m.data(), static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  };
  add("token_embedding", w.token_embedding);
  add("position_embedding", w.position_embedding);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& lw = w.layers[l];
    const auto p = "layers." + std::to_string(l) + ".";
    add(p + "wq", lw.wq);
    add(p + "wk", lw.wk);
    add(p + "wv", lw.wv);
    add(p + "wo", lw.wo);
    add(p + "bo", lw.bo);
    add(p + "ln1_gain", lw.ln1_gain);
    add(p + "ln1_bias", lw.ln1_bias);
    add(p + "ln2_gain", lw.ln2_gain);
    add(p + "ln2_bias", lw.ln2_bias);
    add(p + "w1", lw.w1);
    add(p + "b1", lw.b1);
    add(p + "w2", lw.w2);
    add(p + "b2", lw.b2);
  }
  add("lnf_gain", w.lnf_gain);
  add("lnf_bias", w.lnf_bias);
  add("head", w.head);
  add("head_bias", w.head_bias);
  return out;
}

Matrix embed(const ModelWeights& w, const TokenSequence& seq) {
  if (seq.size() > w.config.max_len)
    throw LengthError("sequence of " + std::to_string(seq.size()) + " tokens exceeds max_len " +
                      std::to_string(w.config.max_len));
  auto ids = w.vocab.encode(seq);
  ids.push_back(Vocabulary::kSep);
  Matrix h0(static_cast<Eigen::Index>(ids.size()), static_cast<Eigen::Index>(w.config.d_model));
  for (std::size_t i = 0; i < ids.size(); ++i)
    h0.row(static_cast<Eigen::Index>(i)) =
        w.token_embedding.row(ids[i]) + w.position_embedding.row(static_cast<Eigen::Index>(i));
  return h0;
}

ForwardTrace forward_embeddings(const ModelWeights& w, const Matrix& h0, TokenSequence seq) {
  const auto& c = w.config;
  if (h0.cols() != static_cast<Eigen::Index>(c.d_model) || h0.rows() < 1)
    throw ValidationError("input embeddings have the wrong shape");
  if (static_cast<std::size_t>(h0.rows()) > c.max_len + 1) throw LengthError("input exceeds max_len");
  const auto dh = static_cast<Eigen::Index>(c.d_head);
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.d_head));

  ForwardTrace t;
  t.token_seq = std::move(seq);
  t.input_embeddings = h0;
  t.cache.resize(c.n_layers);
  t.attentions.resize(c.n_layers);

  Matrix x = h0;
  for (std::size_t li = 0; li < c.n_layers; ++li) {
    const auto& lw = w.layers[li];
    auto& lc = t.cache[li];
    lc.x_in = x;
    lc.xn = c.layer_norm ? layer_norm(x, lw.ln1_gain, lw.ln1_bias, lc.ln1) : x;
    lc.q = lc.xn * lw.wq;
    lc.k = lc.xn * lw.wk;
    lc.v = lc.xn * lw.wv;
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      const auto off = static_cast<Eigen::Index>(h) * dh;
      const Matrix scores = (lc.q.middleCols(off, dh) * lc.k.middleCols(off, dh).transpose()) * scale;
      t.attentions[li].push_back(causal_softmax(scores));
    }
    lc.concat = attention_mix(t.attentions[li], lc.v, c.d_head);
    x = finish_layer(c, lw, lc);
  }
  finish_trace(w, t, x);
  return t;
}

ForwardTrace classify(const ModelWeights& w, const TokenSequence& seq) {
  Matrix h0 = embed(w, seq);
  auto ids = w.vocab.encode(seq);
  ids.push_back(Vocabulary::kSep);
  ForwardTrace t = forward_embeddings(w, h0, seq);
  t.input_ids = std::move(ids);
  return t;
}

Vector logits_with_last_attention(const ModelWeights& w, const ForwardTrace& trace,
                                  const std::vector<Matrix>& last_attention) {
  const auto& c = w.config;
  if (last_attention.size() != c.n_heads) throw ValidationError("expected one attention matrix per head");
  auto lc = trace.cache.back();
  lc.concat = attention_mix(last_attention, lc.v, c.d_head);
  const Matrix x = finish_layer(c, w.layers.back(), lc);
  ForwardTrace tail;
  tail.input_embeddings = trace.input_embeddings;
  finish_trace(w, tail, x);
  return tail.logits;
}

Matrix position_logits(const ModelWeights& w, const ForwardTrace& trace) {
  Matrix out = trace.final_hidden * w.head.transpose();
  out.rowwise() += w.head_bias.transpose();
  return out;
}

double output_scalar(const ModelConfig& config, const Vector& logits, std::size_t target) {
  const auto i = static_cast<Eigen::Index>(target);
  if (config.output_scalar == OutputScalar::logit) return logits(i);
  return softmax(logits)(i);
}

Matrix grad_input(const ModelWeights& w, const ForwardTrace& trace, std::size_t target) {
  return backward(w, trace, output_seed(w, trace, target), nullptr, false).d_input;
}

std::vector<Matrix> grad_attention_last(const ModelWeights& w, const ForwardTrace& trace, std::size_t target) {
  auto out = backward(w, trace, output_seed(w, trace, target), nullptr, true);
  return std::move(out.d_last_attention);
}

Matrix jacobian(const ModelWeights& w, const ForwardTrace& trace) {
  const auto d = static_cast<Eigen::Index>(w.config.d_model);
  const auto n = static_cast<Eigen::Index>(trace.positions());
  Matrix j(d, n * d);
  for (Eigen::Index r = 0; r < d; ++r) {
    const Matrix g = backward(w, trace, Vector::Unit(d, r), nullptr, false).d_input;
    for (Eigen::Index i = 0; i < n; ++i) j.block(r, i * d, 1, d) = g.row(i);
  }
  return j;
}

Vocabulary build_vocabulary(const std::vector<corpus::AnnotatedText>& corpus) {
  Vocabulary v;
  for (const auto& rec : corpus)
    for (const auto& tok : tokenize(rec.text).tokens) v.add(tok);
  return v;
}

namespace {

TokenSequence drop_tokens(const TokenSequence& seq, double p, Rng& rng) {
  TokenSequence out = seq;
  for (auto& t : out.tokens)
    if (uniform_unit(rng) < p) t = std::string(kUnkToken);
  return out;
}

}  // namespace

TrainResult train(const std::vector<corpus::AnnotatedText>& corpus, const corpus::LabelSet& labels,
                  ModelConfig config, std::size_t epochs, double lr) {
  if (corpus.empty()) throw ValidationError("train: corpus is empty");
  std::vector<TokenSequence> seqs;
  std::vector<std::size_t> targets;
  for (const auto& rec : corpus) {
    auto idx = labels.index_of(rec.label);
    if (!idx) throw ValidationError("train: record '" + rec.id + "' has label '" + rec.label + "' outside the label set");
    targets.push_back(*idx);
    seqs.push_back(tokenize(rec.text));
  }

  TrainResult result{ModelWeights::init(config, build_vocabulary(corpus), labels), {}};
  ModelWeights& w = result.weights;
  if (epochs == 0) return result;

  ModelWeights m = w.zeros_like();
  ModelWeights v = w.zeros_like();
  auto w_t = tensors(w);
  auto m_t = tensors(m);
  auto v_t = tensors(v);
  const auto& c = w.config;

  Rng rng(splitmix64(c.seed ^ 0x7261696eULL));
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    shuffle(std::span(order), rng);
    double loss_sum = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += c.batch_size) {
      const std::size_t end = std::min(order.size(), begin + c.batch_size);
      ModelWeights g = w.zeros_like();
      for (std::size_t b = begin; b < end; ++b) {
        const auto ex = order[b];
        const ForwardTrace t = c.token_dropout > 0.0 ? classify(w, drop_tokens(seqs[ex], c.token_dropout, rng))
                                                     : classify(w, seqs[ex]);
        const Vector p = softmax(t.logits);
        const auto y = static_cast<Eigen::Index>(targets[ex]);
        loss_sum += -std::log(std::max(p(y), 1e-300));
        Vector dlogits = p;
        dlogits(y) -= 1.0;
        g.head += dlogits * t.output_embedding.transpose();
        g.head_bias += dlogits;
        backward(w, t, w.head.transpose() * dlogits, &g, false);
      }
      if (!std::isfinite(loss_sum))
        throw NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch + 1));

      ++step;
      const double inv_batch = 1.0 / static_cast<double>(end - begin);
      const double bc1 = 1.0 - std::pow(c.adam_beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(c.adam_beta2, static_cast<double>(step));
      auto g_t = tensors(g);
      for (std::size_t ti = 0; ti < w_t.size(); ++ti) {
        auto wv = w_t[ti].values();
        auto gv = g_t[ti].values();
        auto mv = m_t[ti].values();
        auto vv = v_t[ti].values();
        for (std::size_t k = 0; k < wv.size(); ++k) {
          const double grad = gv[k] * inv_batch;
          mv[k] = c.adam_beta1 * mv[k] + (1.0 - c.adam_beta1) * grad;
          vv[k] = c.adam_beta2 * vv[k] + (1.0 - c.adam_beta2) * grad * grad;
          wv[k] -= lr * (mv[k] / bc1) / (std::sqrt(vv[k] / bc2) + c.adam_eps);
        }
      }
    }
    const double mean_loss = loss_sum / static_cast<double>(corpus.size());
    if (!std::isfinite(mean_loss))
      throw NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch + 1));
    result.epoch_loss.push_back(mean_loss);
  }
  return result;
}

}  // namespace xplain::tinylm
