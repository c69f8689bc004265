#include "decompx/baselines.hpp"

#include <stdexcept>

#include "decompx/decompose.hpp"

namespace decompx {

AttributionMatrix local_norm_matrix(const Model& model, const TokenSequence& tokens,
                                    std::size_t layer) {
  if (layer < 1 || layer > model.layers.size()) {
    throw std::out_of_range("layer must be in [1, " + std::to_string(model.layers.size()) + "]");
  }
  const ForwardTrace trace = forward(model, tokens);
  const auto& lt = trace.layers[layer - 1];
  const auto& weights = model.layers[layer - 1];
  const DecompositionState start = init_decomposition(lt.input, BiasMode::AbsDot);
  const DecompositionState out = encoder_layer_decompose(
      start, lt, weights, fuse_attention(weights, model.config), model.config);
  const std::size_t n = tokens.size();
  AttributionMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto norms = norm_attribution(out, i);
    std::copy(norms.begin(), norms.end(), m.row(i).begin());
  }
  return m;
}

AttributionMatrix rollout(const std::vector<AttributionMatrix>& mats) {
  if (mats.empty()) throw std::invalid_argument("rollout needs at least one matrix");
  const std::size_t n = mats.front().rows();
  AttributionMatrix acc;
  for (const auto& m : mats) {
    if (m.rows() != n || m.cols() != n) throw ShapeError("rollout: matrices must be square, same N");
    AttributionMatrix normed(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      double sum = 0.0;
      for (float v : m.row(i)) sum += v;
      if (sum <= 0.0) throw std::domain_error("rollout: row " + std::to_string(i) + " sums to zero");
      for (std::size_t k = 0; k < n; ++k) normed(i, k) = static_cast<float>(m(i, k) / sum);
    }
    acc = acc.empty() ? std::move(normed) : matmul(normed, acc);
  }
  return acc;
}

ScoreVector rollout_attribution(const Model& model, const TokenSequence& tokens,
                                std::size_t target) {
  std::vector<AttributionMatrix> mats;
  for (std::size_t l = 1; l <= model.layers.size(); ++l) {
    mats.push_back(local_norm_matrix(model, tokens, l));
  }
  const auto r = rollout(mats);
  return {{r.row(target).begin(), r.row(target).end()}, "rollout"};
}

Matrix finite_diff_gradient_at(const Model& model, const Matrix& embedding_sum, std::size_t cls,
                               double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite difference step must be positive");
  if (cls >= model.config.num_classes) throw std::out_of_range("class index out of range");
  Matrix grad(embedding_sum.rows(), embedding_sum.cols());
  Matrix probe = embedding_sum;
  for (std::size_t e = 0; e < probe.size(); ++e) {
    const float base = embedding_sum.data()[e];
    const float up = static_cast<float>(base + step);
    const float down = static_cast<float>(base - step);
    probe.data()[e] = up;
    const double y_up = logits_from_embedding_sum(model, probe)[cls];
    probe.data()[e] = down;
    const double y_down = logits_from_embedding_sum(model, probe)[cls];
    probe.data()[e] = base;
    // Divide by the step that was actually representable in f32.
    grad.data()[e] = static_cast<float>((y_up - y_down) / (static_cast<double>(up) - down));
  }
  return grad;
}

Matrix finite_diff_gradient(const Model& model, const TokenSequence& tokens, std::size_t cls,
                            double step) {
  return finite_diff_gradient_at(model, embedding_sum(model, tokens), cls, step);
}

ScoreVector gradient_x_input(const Model& model, const TokenSequence& tokens, std::size_t cls,
                             double step) {
  const Matrix e = embedding_sum(model, tokens);
  const Matrix g = finite_diff_gradient_at(model, e, cls, step);
  ScoreVector out{std::vector<float>(e.rows()), "gradxinput"};
  for (std::size_t k = 0; k < e.rows(); ++k) {
    std::vector<float> prod(e.cols());
    for (std::size_t t = 0; t < e.cols(); ++t) prod[t] = g(k, t) * e(k, t);
    out.scores[k] = static_cast<float>(l2_norm(prod));
  }
  return out;
}

Matrix mask_baseline(const Model& model, const TokenSequence& tokens) {
  TokenSequence masked = tokens;
  std::fill(masked.ids.begin(), masked.ids.end(), model.config.special_tokens.mask_id);
  return embedding_sum(model, masked);
}

IntegratedGradients integrated_gradients_full(const Model& model, const TokenSequence& tokens,
                                              std::size_t cls, std::size_t steps, double step) {
  if (steps < 1) throw std::invalid_argument("integrated gradients needs at least one step");
  const Matrix input = embedding_sum(model, tokens);
  const Matrix base = mask_baseline(model, tokens);
  const std::size_t n = input.rows();
  const std::size_t d = input.cols();

  std::vector<double> mean_grad(input.size(), 0.0);
  Matrix point(n, d);
  for (std::size_t s = 0; s < steps; ++s) {
    const double alpha = (static_cast<double>(s) + 0.5) / static_cast<double>(steps);
    for (std::size_t e = 0; e < input.size(); ++e) {
      point.data()[e] =
          static_cast<float>(base.data()[e] + alpha * (input.data()[e] - base.data()[e]));
    }
    const Matrix g = finite_diff_gradient_at(model, point, cls, step);
    for (std::size_t e = 0; e < g.size(); ++e) mean_grad[e] += g.data()[e] / static_cast<double>(steps);
  }

  IntegratedGradients ig{Matrix(n, d), {std::vector<float>(n), "ig"}};
  for (std::size_t e = 0; e < input.size(); ++e) {
    ig.attributions.data()[e] = static_cast<float>(
        (static_cast<double>(input.data()[e]) - base.data()[e]) * mean_grad[e]);
  }
  for (std::size_t k = 0; k < n; ++k) {
    ig.scores.scores[k] = static_cast<float>(l2_norm(ig.attributions.row(k)));
  }
  return ig;
}

ScoreVector integrated_gradients(const Model& model, const TokenSequence& tokens, std::size_t cls,
                                 std::size_t steps, double step) {
  return integrated_gradients_full(model, tokens, cls, steps, step).scores;
}

}  // namespace decompx
