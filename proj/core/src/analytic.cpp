#include "xplain/analytic.hpp"

#include <cmath>

#include <Eigen/SVD>

#include "xplain/errors.hpp"

namespace xplain::analytic {

std::vector<double> agrad_scores(const std::vector<Matrix>& grad, const std::vector<Matrix>& attn,
                                 std::size_t query_row, std::size_t n_tokens) {
  if (grad.size() != attn.size() || grad.empty()) throw std::invalid_argument("agrad: head count mismatch");
  std::vector<double> out(n_tokens, 0.0);
  const auto row = static_cast<Eigen::Index>(query_row);
  for (std::size_t h = 0; h < grad.size(); ++h)
    for (std::size_t k = 0; k < n_tokens; ++k) {
      const auto col = static_cast<Eigen::Index>(k);
      out[k] += grad[h](row, col) * attn[h](row, col);
    }
  for (double& v : out) v /= static_cast<double>(grad.size());
  return out;
}

std::vector<double> gradin_scores(const Matrix& grad, const Matrix& embeddings, std::size_t n_tokens) {
  std::vector<double> out(n_tokens);
  for (std::size_t i = 0; i < n_tokens; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out[i] = std::abs(grad.row(r).dot(embeddings.row(r)));
  }
  return out;
}

std::vector<double> slice_norms(const Vector& delta, std::size_t d, std::size_t n_tokens) {
  std::vector<double> out(n_tokens);
  for (std::size_t i = 0; i < n_tokens; ++i)
    out[i] = delta.segment(static_cast<Eigen::Index>(i * d), static_cast<Eigen::Index>(d)).norm();
  return out;
}

PinvSolution pinv_solve(const Matrix& a, const Vector& b, double rtol) {
  if (a.rows() != b.size()) throw std::invalid_argument("pinv_solve: shape mismatch");
  Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& s = svd.singularValues();
  PinvSolution out;
  out.sigma_max = s.size() ? s(0) : 0.0;
  if (!(out.sigma_max > 0.0)) throw NumericError("degenerate Jacobian: all singular values are zero");
  const double cutoff = rtol * out.sigma_max;
  Vector coeff = svd.matrixU().transpose() * b;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s(i) > cutoff) {
      coeff(i) /= s(i);
      ++out.rank;
    } else {
      coeff(i) = 0.0;
    }
  }
  out.x = svd.matrixV() * coeff;
  return out;
}

SaliencyMap agrad(const tinylm::ModelWeights& w, const tinylm::ForwardTrace& trace) {
  const auto grads = tinylm::grad_attention_last(w, trace, trace.predicted);
  const auto raw = agrad_scores(grads, trace.attentions.back(), trace.positions() - 1, trace.text_length());
  return SaliencyMap::from_raw(trace.token_seq, raw, "agrad");
}

SaliencyMap gradin(const tinylm::ModelWeights& w, const tinylm::ForwardTrace& trace) {
  const Matrix g = tinylm::grad_input(w, trace, trace.predicted);
  return SaliencyMap::from_raw(trace.token_seq, gradin_scores(g, trace.input_embeddings, trace.text_length()),
                               "gradin");
}

std::size_t default_alt_label(const tinylm::ForwardTrace& trace) {
  std::optional<Eigen::Index> best;
  for (Eigen::Index i = 0; i < trace.logits.size(); ++i) {
    if (static_cast<std::size_t>(i) == trace.predicted) continue;
    if (!best || trace.logits(i) > trace.logits(*best)) best = i;
  }
  if (!best) throw ValidationError("igrad: the label set has a single label, no alternative exists");
  return static_cast<std::size_t>(*best);
}

IGradDetail igrad_detail(const tinylm::ModelWeights& w, const tinylm::ForwardTrace& trace,
                         std::optional<std::size_t> alt_label, double rtol) {
  const std::size_t alt = alt_label ? *alt_label : default_alt_label(trace);
  if (alt == trace.predicted) throw ValidationError("igrad: alternative label equals the predicted label");
  if (alt >= w.labels.size()) throw ValidationError("igrad: alternative label out of range");

  IGradDetail out;
  out.target_delta = (w.head.row(static_cast<Eigen::Index>(alt)) -
                      w.head.row(static_cast<Eigen::Index>(trace.predicted)))
                         .transpose();
  const double norm = out.target_delta.norm();
  if (!(norm > 0.0)) throw NumericError("igrad: head rows of the two labels coincide");
  out.target_delta /= norm;
  out.jacobian = tinylm::jacobian(w, trace);
  auto sol = pinv_solve(out.jacobian, out.target_delta, rtol);
  out.input_delta = std::move(sol.x);
  out.rank = sol.rank;
  out.map = SaliencyMap::from_raw(trace.token_seq,
                                  slice_norms(out.input_delta, w.config.d_model, trace.text_length()), "igrad");
  return out;
}

SaliencyMap igrad(const tinylm::ModelWeights& w, const tinylm::ForwardTrace& trace,
                  std::optional<std::size_t> alt_label) {
  return igrad_detail(w, trace, alt_label).map;
}

GradientRange gradient_range(const tinylm::ModelWeights& w, const tinylm::ForwardTrace& trace) {
  const auto n = static_cast<Eigen::Index>(trace.text_length());
  if (n == 0) return {};
  const Matrix g = tinylm::grad_input(w, trace, trace.predicted).topRows(n);
  return {g.minCoeff(), g.maxCoeff()};
}

}  // namespace xplain::analytic
