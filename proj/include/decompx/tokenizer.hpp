#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "decompx/encoder.hpp"
#include "decompx/model.hpp"

namespace decompx {

/// Token string <-> id table. One token per line; the line number is the id.
class Vocab {
 public:
  static Vocab load(const std::filesystem::path& path);
  static Vocab read(std::istream& in);
  static Vocab from_tokens(std::vector<std::string> tokens);

  std::optional<std::uint32_t> find(const std::string& token) const;
  const std::string& token(std::uint32_t id) const { return tokens_.at(id); }
  std::size_t size() const { return tokens_.size(); }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::uint32_t> ids_;
};

/// Lowercases, splits on whitespace and ASCII punctuation, then greedily
/// matches the longest vocabulary entry with "##" continuations. A word with
/// no full cover becomes [UNK]. Output is [CLS] a [SEP] (b [SEP]), truncated
/// to max_positions by trimming the longer segment.
/// Throws UsageError on empty text.
TokenSequence tokenize(const Vocab& vocab, const ModelConfig& config, const std::string& text,
                       const std::optional<std::string>& text_pair = std::nullopt);

/// Whitespace/punctuation split after lowercasing; exposed for tests.
std::vector<std::string> basic_split(const std::string& text);
/// Greedy longest-match subwords of one word; empty when uncoverable.
std::vector<std::uint32_t> wordpiece(const Vocab& vocab, const std::string& word);

}  // namespace decompx
