#pragma once

#include <functional>
#include <string_view>
#include <vector>

#include "decompx/encoder.hpp"
#include "decompx/model.hpp"
#include "decompx/numerics.hpp"

namespace decompx {

/// How internal biases enter the decomposition. AbsDot hands each part a share
/// of the bias proportional to |bias . part|; NoBias drops biases from the
/// parts (the forward pass itself is always exact).
enum class BiasMode { AbsDot, NoBias };

std::string_view bias_mode_name(BiasMode mode);
BiasMode parse_bias_mode(std::string_view name);

/// parts[i] is an N x d matrix whose row k is the share of token i's
/// representation attributable to input token k.
struct DecompositionState {
  std::vector<Matrix> parts;
  std::size_t layer_index = 0;
  BiasMode bias_mode = BiasMode::AbsDot;

  std::size_t tokens() const { return parts.size(); }
  /// Row i of the sum over k; what the parts claim token i's vector is.
  std::vector<float> reconstruct(std::size_t i) const;
};

struct BiasWeights {
  std::vector<float> omega;
};

struct Explanation {
  TokenSequence tokens;
  std::vector<float> logits;
  Matrix attributions;  // C x N, attributions(c, k) = contribution of token k to logit c
  std::size_t predicted_class = 0;
  BiasMode bias_mode = BiasMode::AbsDot;
  /// Largest |f(x) - theta * x| seen at any linearized activation.
  double linearization_residual = 0.0;
};

/// Degenerate AbsDot denominators fall back to uniform weights below this.
inline constexpr double kAbsDotFloor = 1e-12;

DecompositionState init_decomposition(const Matrix& embeddings, BiasMode mode = BiasMode::AbsDot);

/// Adds omega_k * bias to row k of `parts` and returns omega.
BiasWeights absdot_distribute(std::span<const float> bias, Matrix& parts);

/// Per output position i, an N x d matrix of attention outputs z_{i<=k}.
std::vector<Matrix> attention_decompose(const DecompositionState& state,
                                        const std::vector<Matrix>& attention,
                                        const FusedAttention& fused);

/// g(part) = (part - mean(part)) / s(total) * gamma for each part, then beta
/// shared out by AbsDot. `total` is the true LayerNorm input.
Matrix layernorm_decompose(const Matrix& parts, std::span<const float> total,
                           std::span<const float> gamma, std::span<const float> beta, double eps,
                           BiasMode mode = BiasMode::AbsDot);

/// Two-layer FFN with the activation linearized at the true pre-activation.
/// `residual`, when given, receives max |f(zeta) - theta * zeta|.
Matrix ffn_decompose(const Matrix& parts, std::span<const float> true_preactivation,
                     const LayerWeights& layer, ActivationKind activation,
                     BiasMode mode = BiasMode::AbsDot, double* residual = nullptr);

DecompositionState encoder_layer_decompose(const DecompositionState& state,
                                           const LayerTrace& trace, const LayerWeights& layer,
                                           const FusedAttention& fused, const ModelConfig& config,
                                           double* residual = nullptr);

/// Pooler + classifier over the CLS parts; returns C x N.
Matrix classifier_decompose(const Matrix& cls_parts, const Model& model, const ForwardTrace& trace,
                            BiasMode mode = BiasMode::AbsDot, double* residual = nullptr);

using LayerObserver = std::function<void(const DecompositionState&)>;

struct Propagation {
  ForwardTrace trace;
  DecompositionState state;  // at layer L + 1 (after the last encoder layer)
  double linearization_residual = 0.0;
};

/// Forward pass plus layer-by-layer propagation. `observer` sees the state
/// entering layer 1 and after every layer.
Propagation propagate(const Model& model, const TokenSequence& tokens, BiasMode mode,
                      const LayerObserver& observer = {});

Explanation explain(const Model& model, const TokenSequence& tokens,
                    BiasMode mode = BiasMode::AbsDot);

struct CompletenessReport {
  /// max over layers l and tokens i of |sum_k x_{i<=k} - x_i|_inf / (1 + |x_i|_inf)
  double hidden = 0.0;
  /// max over classes of |sum_k y_{c<=k} - y_c| / (1 + |y_c|)
  double logits = 0.0;
  bool within(double tol) const { return hidden <= tol && logits <= tol; }
};

/// Reconstruction error of the AbsDot decomposition against the forward pass.
CompletenessReport check_completeness(const Model& model, const TokenSequence& tokens);

/// ||x_{target<=k}|| for every k; the aggregation used without the head.
std::vector<float> norm_attribution(const DecompositionState& state, std::size_t target);

}  // namespace decompx
