#include "decompx/encoder.hpp"

#include <algorithm>
#include <cmath>

namespace decompx {

namespace {

void add_bias_rows(Matrix& m, std::span<const float> bias) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t t = 0; t < r.size(); ++t) r[t] += bias[t];
  }
}

Matrix layer_norm_rows(const Matrix& m, std::span<const float> gamma, std::span<const float> beta,
                       double eps) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto normed = layer_norm(m.row(i), gamma, beta, eps);
    std::copy(normed.begin(), normed.end(), out.row(i).begin());
  }
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

/// Standard multi-head scaled dot-product attention, unfused.
Matrix self_attention(const LayerWeights& w, const ModelConfig& config, const Matrix& x,
                      std::vector<Matrix>* probs_out) {
  const std::size_t n = x.rows();
  const std::size_t d = config.hidden_size;
  const std::size_t heads = config.num_heads;
  const std::size_t hd = config.head_dim();
  Matrix q = matmul(x, w.q_weight);
  Matrix k = matmul(x, w.k_weight);
  Matrix v = matmul(x, w.v_weight);
  add_bias_rows(q, w.q_bias);
  add_bias_rows(k, w.k_bias);
  add_bias_rows(v, w.v_bias);

  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix context(n, d);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * hd;
    Matrix scores(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < hd; ++t) s += static_cast<double>(q(i, c0 + t)) * k(j, c0 + t);
        scores(i, j) = static_cast<float>(s * scale);
      }
    }
    Matrix probs = softmax_rows(scores);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t t = 0; t < hd; ++t) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += static_cast<double>(probs(i, j)) * v(j, c0 + t);
        context(i, c0 + t) = static_cast<float>(s);
      }
    }
    if (probs_out) probs_out->push_back(std::move(probs));
  }
  Matrix out = matmul(context, w.out_weight);
  add_bias_rows(out, w.out_bias);
  return out;
}

ForwardTrace run(const Model& model, Matrix emb_sum, bool keep_trace) {
  const auto& cfg = model.config;
  const auto& cw = model.classifier;
  ForwardTrace trace;
  Matrix x = layer_norm_rows(emb_sum, cw.emb_ln_gamma, cw.emb_ln_beta, cfg.layer_norm_eps);
  if (keep_trace) {
    trace.embedding_sum = std::move(emb_sum);
    trace.embeddings = x;
  }

  for (const auto& w : model.layers) {
    LayerTrace lt;
    Matrix z = self_attention(w, cfg, x, keep_trace ? &lt.attention : nullptr);
    Matrix z_plus = add(x, z);
    Matrix z_tilde = layer_norm_rows(z_plus, w.ln1_gamma, w.ln1_beta, cfg.layer_norm_eps);
    Matrix zeta = matmul(z_tilde, w.ffn_w1);
    add_bias_rows(zeta, w.ffn_b1);
    Matrix act(zeta.rows(), zeta.cols());
    for (std::size_t i = 0; i < zeta.size(); ++i) {
      act.data()[i] = activation_scalar(cfg.activation, zeta.data()[i]);
    }
    Matrix ffn = matmul(act, w.ffn_w2);
    add_bias_rows(ffn, w.ffn_b2);
    Matrix ffn_plus = add(z_tilde, ffn);
    Matrix out = layer_norm_rows(ffn_plus, w.ln2_gamma, w.ln2_beta, cfg.layer_norm_eps);
    if (keep_trace) {
      lt.input = std::move(x);
      lt.attention_output = std::move(z);
      lt.attention_residual = std::move(z_plus);
      lt.ln1_output = std::move(z_tilde);
      lt.ffn_preactivation = std::move(zeta);
      lt.ffn_output = std::move(ffn);
      lt.ffn_residual = std::move(ffn_plus);
      lt.output = out;
      trace.layers.push_back(std::move(lt));
    }
    x = std::move(out);
  }

  auto pre = vec_mat(x.row(0), cw.pool_weight);
  for (std::size_t t = 0; t < pre.size(); ++t) pre[t] += cw.pool_bias[t];
  auto pooled = activation_apply(cfg.pooler_activation, pre);
  auto y = vec_mat(pooled, cw.cls_weight);
  for (std::size_t c = 0; c < y.size(); ++c) y[c] += cw.cls_bias[c];
  trace.pooler_preactivation = std::move(pre);
  trace.pooled = std::move(pooled);
  trace.logits = std::move(y);
  return trace;
}

}  // namespace

FusedAttention fuse_attention(const LayerWeights& layer, const ModelConfig& config) {
  const std::size_t d = config.hidden_size;
  const std::size_t hd = config.head_dim();
  FusedAttention fused;
  fused.bias.assign(layer.out_bias.begin(), layer.out_bias.end());
  std::vector<double> bias_acc(fused.bias.begin(), fused.bias.end());
  for (std::size_t h = 0; h < config.num_heads; ++h) {
    const std::size_t c0 = h * hd;
    Matrix wv(d, hd);
    Matrix wo(hd, d);
    for (std::size_t r = 0; r < d; ++r) {
      for (std::size_t t = 0; t < hd; ++t) wv(r, t) = layer.v_weight(r, c0 + t);
    }
    for (std::size_t t = 0; t < hd; ++t) {
      std::copy_n(layer.out_weight.row(c0 + t).begin(), d, wo.row(t).begin());
      const double bv = layer.v_bias[c0 + t];
      for (std::size_t c = 0; c < d; ++c) bias_acc[c] += bv * wo(t, c);
    }
    fused.weight.push_back(matmul(wv, wo));
  }
  for (std::size_t c = 0; c < d; ++c) fused.bias[c] = static_cast<float>(bias_acc[c]);
  return fused;
}

void check_tokens(const ModelConfig& config, const TokenSequence& tokens) {
  if (tokens.ids.empty()) throw ValidationError("token sequence is empty");
  if (tokens.ids.size() > config.max_positions) {
    throw ValidationError("sequence of " + std::to_string(tokens.ids.size()) +
                          " tokens exceeds max_positions " + std::to_string(config.max_positions));
  }
  for (auto id : tokens.ids) {
    if (id >= config.vocab_size) {
      throw ValidationError("token id " + std::to_string(id) + " >= vocab_size " +
                            std::to_string(config.vocab_size));
    }
  }
  if (tokens.pair_boundary && config.type_vocab_size < 2) {
    throw ValidationError("sentence pairs need type_vocab_size >= 2");
  }
}

Matrix embedding_sum(const Model& model, const TokenSequence& tokens) {
  check_tokens(model.config, tokens);
  const auto& cw = model.classifier;
  const std::size_t d = model.config.hidden_size;
  Matrix e(tokens.size(), d);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto w = cw.word_embeddings.row(tokens.ids[i]);
    const auto p = cw.position_embeddings.row(i);
    const auto t = cw.token_type_embeddings.row(tokens.segment(i));
    auto out = e.row(i);
    for (std::size_t c = 0; c < d; ++c) out[c] = w[c] + p[c] + t[c];
  }
  return e;
}

Matrix embed(const Model& model, const TokenSequence& tokens) {
  const auto& cw = model.classifier;
  return layer_norm_rows(embedding_sum(model, tokens), cw.emb_ln_gamma, cw.emb_ln_beta,
                         model.config.layer_norm_eps);
}

ForwardTrace forward(const Model& model, const TokenSequence& tokens) {
  return run(model, embedding_sum(model, tokens), true);
}

ForwardTrace forward_from_embedding_sum(const Model& model, Matrix emb_sum) {
  if (emb_sum.cols() != model.config.hidden_size || emb_sum.rows() == 0) {
    throw ShapeError("embedding sum must be N x hidden_size");
  }
  return run(model, std::move(emb_sum), true);
}

std::vector<float> logits(const Model& model, const TokenSequence& tokens) {
  return run(model, embedding_sum(model, tokens), false).logits;
}

std::vector<float> logits_from_embedding_sum(const Model& model, const Matrix& emb_sum) {
  if (emb_sum.cols() != model.config.hidden_size || emb_sum.rows() == 0) {
    throw ShapeError("embedding sum must be N x hidden_size");
  }
  return run(model, emb_sum, false).logits;
}

std::vector<float> softmax(std::span<const float> logits) {
  const Matrix row(1, logits.size(), std::vector<float>(logits.begin(), logits.end()));
  return softmax_rows(row).data();
}

std::size_t argmax(std::span<const float> values) {
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

}  // namespace decompx
