#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "decompx/encoder.hpp"
#include "decompx/model.hpp"

namespace decompx {

/// Reference activations for one input, as exported by the checkpoint
/// converter: hidden[0] is the embedding output, hidden[l] layer l's output.
struct GoldenCase {
  TokenSequence tokens;
  std::vector<Matrix> hidden;
  std::vector<float> logits;
  bool operator==(const GoldenCase&) const = default;
};

/// DXG1 container: "DXG1", u64 LE manifest length, JSON manifest, f32 blob.
/// Manifest: {"count": n, "pair_boundaries": [int|null...], "tensors":
/// {"inputs.{n}.ids": [N], "inputs.{n}.hidden.{l}": [N, d], "inputs.{n}.logits": [C]}}
/// with DXW-style {"dtype","shape","offset","nbytes"} entries. Ids are stored as f32.
std::vector<GoldenCase> read_goldens(const std::filesystem::path& path);
std::vector<GoldenCase> parse_goldens(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> serialize_goldens(const std::vector<GoldenCase>& cases);
void write_goldens(const std::vector<GoldenCase>& cases, const std::filesystem::path& path);

/// Runs `model` on each case's tokens and records them as goldens.
std::vector<GoldenCase> capture_goldens(const Model& model, const std::vector<TokenSequence>& inputs);

struct GoldenComparison {
  double max_hidden_diff = 0.0;  // max-abs over all layers and cases
  double max_logit_diff = 0.0;
  std::vector<double> per_layer;  // max-abs per hidden index, over cases
};

GoldenComparison compare_goldens(const Model& model, const std::vector<GoldenCase>& cases);

}  // namespace decompx
