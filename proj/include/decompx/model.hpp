#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "decompx/numerics.hpp"

namespace decompx {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TruncationError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Shape or config inconsistency. `tensor()` names the offending tensor when
/// there is one.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what, std::string tensor = {})
      : std::runtime_error(what), tensor_(std::move(tensor)) {}
  const std::string& tensor() const { return tensor_; }

 private:
  std::string tensor_;
};

struct SpecialTokens {
  std::uint32_t cls_id = 0;
  std::uint32_t sep_id = 0;
  std::uint32_t mask_id = 0;
  std::uint32_t pad_id = 0;
  std::uint32_t unk_id = 0;
  bool operator==(const SpecialTokens&) const = default;
};

struct ModelConfig {
  std::size_t hidden_size = 0;
  std::size_t num_layers = 0;
  std::size_t num_heads = 0;
  std::size_t ffn_size = 0;
  std::size_t vocab_size = 0;
  std::size_t max_positions = 0;
  std::size_t type_vocab_size = 1;
  std::size_t num_classes = 0;
  ActivationKind activation = ActivationKind::GeluExact;
  ActivationKind pooler_activation = ActivationKind::Tanh;
  double layer_norm_eps = 1e-12;
  std::vector<std::string> label_names;
  SpecialTokens special_tokens;

  std::size_t head_dim() const { return num_heads == 0 ? 0 : hidden_size / num_heads; }

  /// Throws ValidationError on any violated invariant.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
  Matrix q_weight, k_weight, v_weight, out_weight;  // d x d
  std::vector<float> q_bias, k_bias, v_bias, out_bias;
  std::vector<float> ln1_gamma, ln1_beta;
  Matrix ffn_w1;  // d x d_ff
  std::vector<float> ffn_b1;
  Matrix ffn_w2;  // d_ff x d
  std::vector<float> ffn_b2;
  std::vector<float> ln2_gamma, ln2_beta;

  bool operator==(const LayerWeights&) const = default;
};

struct ClassifierWeights {
  Matrix word_embeddings;      // vocab x d
  Matrix position_embeddings;  // max_positions x d
  Matrix token_type_embeddings;
  std::vector<float> emb_ln_gamma, emb_ln_beta;
  Matrix pool_weight;  // d x d
  std::vector<float> pool_bias;
  Matrix cls_weight;  // d x C
  std::vector<float> cls_bias;

  bool operator==(const ClassifierWeights&) const = default;
};

struct Model {
  ModelConfig config;
  ClassifierWeights classifier;
  std::vector<LayerWeights> layers;

  /// Checks the config and every tensor shape against it.
  void validate() const;

  bool operator==(const Model&) const = default;
};

/// A named view of one tensor: shape plus flat data. Vectors have rank 1.
struct TensorRef {
  std::vector<std::size_t> shape;
  std::vector<float>* data;
};

/// All tensors of a model keyed by their container name, sorted.
std::map<std::string, TensorRef> tensor_table(Model& model);
/// Expected shape for every tensor name implied by `config`.
std::map<std::string, std::vector<std::size_t>> expected_shapes(const ModelConfig& config);

Model load_model(const std::filesystem::path& path);
void save_model(const Model& model, const std::filesystem::path& path);

/// Serialized container bytes; save_model writes exactly these.
std::vector<std::uint8_t> serialize_model(const Model& model);
Model deserialize_model(const std::vector<std::uint8_t>& bytes);

struct RandomModelOptions {
  float scale = 0.2f;
  /// Perturb LayerNorm gammas around 1 and draw betas from the same range as
  /// the other weights instead of the 1 / 0 defaults.
  bool randomize_layer_norm = false;
};

Model random_model(const ModelConfig& config, std::uint64_t seed,
                   const RandomModelOptions& options = {});

/// Small config with sensible special ids, used by tests and the CLI demo.
ModelConfig make_config(std::size_t hidden, std::size_t heads, std::size_t layers,
                        std::size_t classes, std::size_t vocab = 64, std::size_t ffn = 0);

}  // namespace decompx
