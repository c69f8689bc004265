#include "decompx/decompose.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace decompx {

namespace {

void add_into(Matrix& dst, const Matrix& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += src.data()[i];
}

double max_linearization_gap(ActivationKind kind, std::span<const float> x,
                             std::span<const float> theta) {
  double worst = 0.0;
  for (std::size_t t = 0; t < x.size(); ++t) {
    const double gap = std::fabs(static_cast<double>(activation_scalar(kind, x[t])) -
                                 static_cast<double>(theta[t]) * x[t]);
    worst = std::max(worst, gap);
  }
  return worst;
}

/// Linear map, optional bias share, elementwise theta, second linear map,
/// optional bias share. Shared by the FFN and the classification head.
Matrix two_layer_decompose(const Matrix& parts, const Matrix& w1, std::span<const float> b1,
                           ActivationKind activation, std::span<const float> true_preactivation,
                           const Matrix& w2, std::span<const float> b2, BiasMode mode,
                           double* residual) {
  Matrix hidden = matmul(parts, w1);
  if (mode == BiasMode::AbsDot) absdot_distribute(b1, hidden);
  const auto theta = activation_theta(activation, true_preactivation);
  if (residual) {
    *residual = std::max(*residual, max_linearization_gap(activation, true_preactivation, theta));
  }
  for (std::size_t k = 0; k < hidden.rows(); ++k) {
    auto r = hidden.row(k);
    for (std::size_t t = 0; t < r.size(); ++t) r[t] *= theta[t];
  }
  Matrix out = matmul(hidden, w2);
  if (mode == BiasMode::AbsDot) absdot_distribute(b2, out);
  return out;
}

}  // namespace

std::string_view bias_mode_name(BiasMode mode) {
  return mode == BiasMode::AbsDot ? "absdot" : "nobias";
}

BiasMode parse_bias_mode(std::string_view name) {
  if (name == "absdot") return BiasMode::AbsDot;
  if (name == "nobias") return BiasMode::NoBias;
  throw std::invalid_argument("unknown bias mode '" + std::string(name) + "'");
}

std::vector<float> DecompositionState::reconstruct(std::size_t i) const {
  const Matrix& p = parts.at(i);
  std::vector<double> acc(p.cols(), 0.0);
  for (std::size_t k = 0; k < p.rows(); ++k) {
    const auto r = p.row(k);
    for (std::size_t t = 0; t < r.size(); ++t) acc[t] += r[t];
  }
  return {acc.begin(), acc.end()};
}

DecompositionState init_decomposition(const Matrix& embeddings, BiasMode mode) {
  const std::size_t n = embeddings.rows();
  DecompositionState state;
  state.bias_mode = mode;
  state.layer_index = 0;
  state.parts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Matrix p(n, embeddings.cols());
    std::copy(embeddings.row(i).begin(), embeddings.row(i).end(), p.row(i).begin());
    state.parts.push_back(std::move(p));
  }
  return state;
}

BiasWeights absdot_distribute(std::span<const float> bias, Matrix& parts) {
  if (bias.size() != parts.cols()) throw ShapeError("absdot_distribute: bias/part width mismatch");
  const std::size_t n = parts.rows();
  std::vector<double> mag(n);
  double total = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    mag[k] = std::fabs(dot(bias, parts.row(k)));
    total += mag[k];
  }
  BiasWeights w;
  w.omega.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double omega = total < kAbsDotFloor ? 1.0 / static_cast<double>(n) : mag[k] / total;
    w.omega[k] = static_cast<float>(omega);
    auto r = parts.row(k);
    for (std::size_t t = 0; t < r.size(); ++t) {
      r[t] = static_cast<float>(r[t] + omega * bias[t]);
    }
  }
  return w;
}

std::vector<Matrix> attention_decompose(const DecompositionState& state,
                                        const std::vector<Matrix>& attention,
                                        const FusedAttention& fused) {
  const std::size_t n = state.tokens();
  if (attention.size() != fused.weight.size()) {
    throw ShapeError("attention_decompose: head count mismatch");
  }
  const std::size_t d = fused.bias.size();
  std::vector<Matrix> out;
  out.reserve(n);
  std::vector<double> acc(n * d);
  Matrix mixed(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    Matrix z(n, d);
    for (std::size_t h = 0; h < attention.size(); ++h) {
      // mixed[k] = sum_j alpha[i][j] * x_{j<=k}
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t j = 0; j < n; ++j) {
        const double a = attention[h](i, j);
        if (a == 0.0) continue;
        const auto& xj = state.parts[j].data();
        for (std::size_t e = 0; e < n * d; ++e) acc[e] += a * xj[e];
      }
      for (std::size_t e = 0; e < n * d; ++e) mixed.data()[e] = static_cast<float>(acc[e]);
      add_into(z, matmul(mixed, fused.weight[h]));
    }
    if (state.bias_mode == BiasMode::AbsDot) absdot_distribute(fused.bias, z);
    out.push_back(std::move(z));
  }
  return out;
}

Matrix layernorm_decompose(const Matrix& parts, std::span<const float> total,
                           std::span<const float> gamma, std::span<const float> beta, double eps,
                           BiasMode mode) {
  const double s = vector_stats(total, eps).std;
  Matrix out(parts.rows(), parts.cols());
  for (std::size_t k = 0; k < parts.rows(); ++k) {
    const auto p = parts.row(k);
    double mean = 0.0;
    for (float v : p) mean += v;
    mean /= static_cast<double>(p.size());
    auto o = out.row(k);
    for (std::size_t t = 0; t < p.size(); ++t) {
      o[t] = static_cast<float>((p[t] - mean) / s * gamma[t]);
    }
  }
  if (mode == BiasMode::AbsDot) absdot_distribute(beta, out);
  return out;
}

Matrix ffn_decompose(const Matrix& parts, std::span<const float> true_preactivation,
                     const LayerWeights& layer, ActivationKind activation, BiasMode mode,
                     double* residual) {
  return two_layer_decompose(parts, layer.ffn_w1, layer.ffn_b1, activation, true_preactivation,
                             layer.ffn_w2, layer.ffn_b2, mode, residual);
}

DecompositionState encoder_layer_decompose(const DecompositionState& state,
                                           const LayerTrace& trace, const LayerWeights& layer,
                                           const FusedAttention& fused, const ModelConfig& config,
                                           double* residual) {
  const std::size_t n = state.tokens();
  const double eps = config.layer_norm_eps;
  auto attn = attention_decompose(state, trace.attention, fused);

  DecompositionState next;
  next.bias_mode = state.bias_mode;
  next.layer_index = state.layer_index + 1;
  next.parts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Matrix& z_plus = attn[i];
    add_into(z_plus, state.parts[i]);
    Matrix z_tilde = layernorm_decompose(z_plus, trace.attention_residual.row(i), layer.ln1_gamma,
                                         layer.ln1_beta, eps, state.bias_mode);
    Matrix ffn = ffn_decompose(z_tilde, trace.ffn_preactivation.row(i), layer, config.activation,
                               state.bias_mode, residual);
    add_into(ffn, z_tilde);
    next.parts.push_back(layernorm_decompose(ffn, trace.ffn_residual.row(i), layer.ln2_gamma,
                                             layer.ln2_beta, eps, state.bias_mode));
  }
  return next;
}

Matrix classifier_decompose(const Matrix& cls_parts, const Model& model, const ForwardTrace& trace,
                            BiasMode mode, double* residual) {
  const auto& cw = model.classifier;
  const Matrix per_token =
      two_layer_decompose(cls_parts, cw.pool_weight, cw.pool_bias, model.config.pooler_activation,
                          trace.pooler_preactivation, cw.cls_weight, cw.cls_bias, mode, residual);
  Matrix out(per_token.cols(), per_token.rows());
  for (std::size_t k = 0; k < per_token.rows(); ++k) {
    for (std::size_t c = 0; c < per_token.cols(); ++c) out(c, k) = per_token(k, c);
  }
  return out;
}

Propagation propagate(const Model& model, const TokenSequence& tokens, BiasMode mode,
                      const LayerObserver& observer) {
  Propagation result;
  result.trace = forward(model, tokens);
  DecompositionState state = init_decomposition(result.trace.embeddings, mode);
  if (observer) observer(state);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto fused = fuse_attention(model.layers[l], model.config);
    state = encoder_layer_decompose(state, result.trace.layers[l], model.layers[l], fused,
                                    model.config, &result.linearization_residual);
    if (observer) observer(state);
  }
  result.state = std::move(state);
  return result;
}

Explanation explain(const Model& model, const TokenSequence& tokens, BiasMode mode) {
  Propagation p = propagate(model, tokens, mode);
  Explanation ex;
  ex.tokens = tokens;
  ex.bias_mode = mode;
  ex.attributions = classifier_decompose(p.state.parts.at(0), model, p.trace, mode,
                                         &p.linearization_residual);
  ex.logits = std::move(p.trace.logits);
  ex.predicted_class = argmax(ex.logits);
  ex.linearization_residual = p.linearization_residual;
  return ex;
}

std::vector<float> norm_attribution(const DecompositionState& state, std::size_t target) {
  const Matrix& p = state.parts.at(target);
  std::vector<float> scores(p.rows());
  for (std::size_t k = 0; k < p.rows(); ++k) scores[k] = static_cast<float>(l2_norm(p.row(k)));
  return scores;
}

CompletenessReport check_completeness(const Model& model, const TokenSequence& tokens) {
  std::vector<DecompositionState> states;
  Propagation p = propagate(model, tokens, BiasMode::AbsDot,
                            [&](const DecompositionState& s) { states.push_back(s); });
  CompletenessReport report;
  for (std::size_t l = 0; l < states.size(); ++l) {
    const Matrix& truth = l == 0 ? p.trace.embeddings : p.trace.layers[l - 1].output;
    for (std::size_t i = 0; i < truth.rows(); ++i) {
      const auto sum = states[l].reconstruct(i);
      double err = 0.0, scale = 0.0;
      for (std::size_t t = 0; t < sum.size(); ++t) {
        err = std::max(err, std::fabs(static_cast<double>(sum[t]) - truth(i, t)));
        scale = std::max(scale, std::fabs(static_cast<double>(truth(i, t))));
      }
      report.hidden = std::max(report.hidden, err / (1.0 + scale));
    }
  }
  const Matrix attr = classifier_decompose(p.state.parts.at(0), model, p.trace);
  for (std::size_t c = 0; c < attr.rows(); ++c) {
    double sum = 0.0;
    for (float v : attr.row(c)) sum += v;
    const double y = p.trace.logits[c];
    report.logits = std::max(report.logits, std::fabs(sum - y) / (1.0 + std::fabs(y)));
  }
  return report;
}

}  // namespace decompx
