#pragma once

#include <string>
#include <vector>

#include "decompx/encoder.hpp"
#include "decompx/model.hpp"
#include "decompx/numerics.hpp"

namespace decompx {

/// N x N nonnegative token-to-token attribution; row i is output token i.
using AttributionMatrix = Matrix;

struct ScoreVector {
  std::vector<float> scores;
  std::string method;
};

/// Norms of a single layer's decomposed outputs, with the decomposition
/// restarted (identity-initialized) at the input of `layer` (1-based).
AttributionMatrix local_norm_matrix(const Model& model, const TokenSequence& tokens,
                                    std::size_t layer);

/// Row-normalizes each matrix and returns normalized_L * ... * normalized_1.
/// Throws std::domain_error on a row that sums to zero.
AttributionMatrix rollout(const std::vector<AttributionMatrix>& mats);

/// Row of the rollout of all local norm matrices for `target` (CLS by default).
ScoreVector rollout_attribution(const Model& model, const TokenSequence& tokens,
                                std::size_t target = 0);

inline constexpr double kDefaultGradientStep = 1e-3;

/// Central differences of logit `cls` w.r.t. the pre-LayerNorm embedding sum.
Matrix finite_diff_gradient(const Model& model, const TokenSequence& tokens, std::size_t cls,
                            double step = kDefaultGradientStep);
Matrix finite_diff_gradient_at(const Model& model, const Matrix& embedding_sum, std::size_t cls,
                               double step = kDefaultGradientStep);

/// ||G_k * e_k|| per token.
ScoreVector gradient_x_input(const Model& model, const TokenSequence& tokens, std::size_t cls,
                             double step = kDefaultGradientStep);

/// Embedding sum with every position's word replaced by [MASK].
Matrix mask_baseline(const Model& model, const TokenSequence& tokens);

struct IntegratedGradients {
  Matrix attributions;  // N x d, (e - b) * mean gradient along the path
  ScoreVector scores;   // per-token L2 norm of the rows above
};

/// Midpoint Riemann sum over `steps` points from the [MASK] baseline to the input.
IntegratedGradients integrated_gradients_full(const Model& model, const TokenSequence& tokens,
                                              std::size_t cls, std::size_t steps = 10,
                                              double step = kDefaultGradientStep);
ScoreVector integrated_gradients(const Model& model, const TokenSequence& tokens, std::size_t cls,
                                 std::size_t steps = 10, double step = kDefaultGradientStep);

}  // namespace decompx
