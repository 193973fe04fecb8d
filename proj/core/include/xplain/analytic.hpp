#pragma once

// Model-internal explanations of a ForwardTrace: attention x gradient (AGrad),
// gradient x input (GradIn) and the inverted-Jacobian counterfactual (IGrad).
// All three explain the predicted label and cover text tokens only.

#include <cstddef>
#include <optional>
#include <vector>

#include "xplain/saliency_map.hpp"
#include "xplain/tinylm.hpp"

namespace xplain::analytic {

using tinylm::Matrix;
using tinylm::Vector;

/// Head mean of grad[h](row, k) * attn[h](row, k) for k < n_tokens.
std::vector<double> agrad_scores(const std::vector<Matrix>& grad, const std::vector<Matrix>& attn,
                                 std::size_t query_row, std::size_t n_tokens);

/// |sum_c grad(i, c) * embeddings(i, c)| for rows i < n_tokens.
std::vector<double> gradin_scores(const Matrix& grad, const Matrix& embeddings, std::size_t n_tokens);

/// Euclidean norm of each d-wide slice of `delta`, first n_tokens slices.
std::vector<double> slice_norms(const Vector& delta, std::size_t d, std::size_t n_tokens);

struct PinvSolution {
  Vector x;
  std::size_t rank = 0;
  double sigma_max = 0.0;
};

/// Minimum-norm least-squares solution pinv(a) * b via SVD; singular values
/// below rtol * sigma_max count as zero. Throws NumericError when none survive.
PinvSolution pinv_solve(const Matrix& a, const Vector& b, double rtol = 1e-8);

SaliencyMap agrad(const tinylm::ModelWeights& w, const tinylm::ForwardTrace& trace);
SaliencyMap gradin(const tinylm::ModelWeights& w, const tinylm::ForwardTrace& trace);

/// Second most probable label of the trace (ties by label order).
std::size_t default_alt_label(const tinylm::ForwardTrace& trace);

struct IGradDetail {
  SaliencyMap map;
  Vector target_delta;  // unit (head[alt] - head[predicted])
  Vector input_delta;   // pinv(J) * target_delta, N*d
  Matrix jacobian;
  std::size_t rank = 0;
};

/// Throws ValidationError when alt_label == predicted, NumericError for a degenerate Jacobian.
IGradDetail igrad_detail(const tinylm::ModelWeights& w, const tinylm::ForwardTrace& trace,
                         std::optional<std::size_t> alt_label = {}, double rtol = 1e-8);
SaliencyMap igrad(const tinylm::ModelWeights& w, const tinylm::ForwardTrace& trace,
                  std::optional<std::size_t> alt_label = {});

/// Per-text extrema of d scalar(predicted) / d h0 over the text rows, the
/// saturation diagnostic reported with every run.
struct GradientRange {
  double min = 0.0;
  double max = 0.0;
};
GradientRange gradient_range(const tinylm::ModelWeights& w, const tinylm::ForwardTrace& trace);

}  // namespace xplain::analytic
