#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "decompx/model.hpp"
#include "decompx/numerics.hpp"

namespace decompx {

struct TokenSequence {
  std::vector<std::uint32_t> ids;
  /// Index where segment B starts; tokens from here on get token type 1.
  std::optional<std::size_t> pair_boundary;

  std::size_t size() const { return ids.size(); }
  std::size_t segment(std::size_t position) const {
    return pair_boundary && position >= *pair_boundary ? 1 : 0;
  }
  bool operator==(const TokenSequence&) const = default;
};

/// Value and output projections folded together per head:
/// W_att[h] = W_v[:, h cols] * W_O[h rows, :], bias = sum_h b_v[h] * W_O[h rows, :] + b_O.
struct FusedAttention {
  std::vector<Matrix> weight;  // H matrices, each d x d
  std::vector<float> bias;     // d
};

FusedAttention fuse_attention(const LayerWeights& layer, const ModelConfig& config);

struct LayerTrace {
  Matrix input;                   // x^l, N x d
  std::vector<Matrix> attention;  // H matrices, N x N, rows sum to 1
  Matrix attention_output;        // z, N x d (before the residual)
  Matrix attention_residual;      // z+ = x + z, N x d
  Matrix ln1_output;              // z~, N x d
  Matrix ffn_preactivation;       // zeta, N x d_ff
  Matrix ffn_output;              // N x d
  Matrix ffn_residual;            // z~ + ffn, N x d
  Matrix output;                  // x^{l+1}, N x d
};

struct ForwardTrace {
  Matrix embedding_sum;  // word + position + type, before the embedding LayerNorm
  Matrix embeddings;     // x^0
  std::vector<LayerTrace> layers;
  std::vector<float> pooler_preactivation;
  std::vector<float> pooled;
  std::vector<float> logits;
};

/// Throws ValidationError on out-of-range ids or an over-long sequence.
void check_tokens(const ModelConfig& config, const TokenSequence& tokens);

/// word[id] + position[i] + token_type[segment(i)], N x d.
Matrix embedding_sum(const Model& model, const TokenSequence& tokens);
/// Embedding LayerNorm applied row-wise to `embedding_sum`.
Matrix embed(const Model& model, const TokenSequence& tokens);

ForwardTrace forward(const Model& model, const TokenSequence& tokens);
/// Forward pass from an explicit pre-LayerNorm embedding sum. Used by the
/// gradient baselines to perturb embeddings directly.
ForwardTrace forward_from_embedding_sum(const Model& model, Matrix embedding_sum);
/// Logits only, skipping the trace bookkeeping.
std::vector<float> logits(const Model& model, const TokenSequence& tokens);
std::vector<float> logits_from_embedding_sum(const Model& model, const Matrix& embedding_sum);

std::vector<float> softmax(std::span<const float> logits);
std::size_t argmax(std::span<const float> values);

}  // namespace decompx
