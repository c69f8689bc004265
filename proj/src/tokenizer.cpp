#include "decompx/tokenizer.hpp"

#include <cctype>
#include <fstream>

#include "decompx/faithfulness.hpp"

namespace decompx {

namespace {

constexpr std::size_t kMaxWordChars = 100;

bool is_ascii_punct(unsigned char c) { return c < 128 && std::ispunct(c); }

std::vector<std::uint32_t> encode_segment(const Vocab& vocab, const ModelConfig& config,
                                          const std::string& text) {
  std::vector<std::uint32_t> ids;
  for (const auto& word : basic_split(text)) {
    auto pieces = wordpiece(vocab, word);
    if (pieces.empty()) {
      ids.push_back(config.special_tokens.unk_id);
    } else {
      ids.insert(ids.end(), pieces.begin(), pieces.end());
    }
  }
  return ids;
}

}  // namespace

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  Vocab v;
  v.tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.ids_.emplace(v.tokens_[i], static_cast<std::uint32_t>(i)).second) {
      throw ValidationError("duplicate vocabulary entry '" + v.tokens_[i] + "' at line " +
                            std::to_string(i + 1));
    }
  }
  for (const char* special : {"[CLS]", "[SEP]", "[MASK]", "[UNK]"}) {
    if (!v.ids_.contains(special)) {
      throw ValidationError(std::string("vocabulary lacks ") + special);
    }
  }
  return v;
}

Vocab Vocab::read(std::istream& in) {
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return from_tokens(std::move(tokens));
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocabulary " + path.string());
  return read(in);
}

std::optional<std::uint32_t> Vocab::find(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> basic_split(const std::string& text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) words.push_back(std::move(current));
    current.clear();
  };
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      flush();
    } else if (is_ascii_punct(c)) {
      flush();
      words.emplace_back(1, static_cast<char>(c));
    } else {
      current.push_back(c < 128 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
    }
  }
  flush();
  return words;
}

std::vector<std::uint32_t> wordpiece(const Vocab& vocab, const std::string& word) {
  if (word.size() > kMaxWordChars) return {};
  std::vector<std::uint32_t> pieces;
  std::size_t start = 0;
  while (start < word.size()) {
    std::optional<std::uint32_t> match;
    std::size_t end = word.size();
    for (; end > start; --end) {
      std::string candidate = word.substr(start, end - start);
      if (start > 0) candidate.insert(0, "##");
      if ((match = vocab.find(candidate))) break;
    }
    if (!match) return {};
    pieces.push_back(*match);
    start = end;
  }
  return pieces;
}

TokenSequence tokenize(const Vocab& vocab, const ModelConfig& config, const std::string& text,
                       const std::optional<std::string>& text_pair) {
  if (basic_split(text).empty()) throw UsageError("cannot tokenize empty text");
  auto a = encode_segment(vocab, config, text);
  std::vector<std::uint32_t> b;
  if (text_pair) {
    if (basic_split(*text_pair).empty()) throw UsageError("cannot tokenize empty text pair");
    b = encode_segment(vocab, config, *text_pair);
  }
  const std::size_t specials = text_pair ? 3 : 2;
  if (config.max_positions < specials + (text_pair ? 2 : 1)) {
    throw UsageError("max_positions too small to hold any text");
  }
  const std::size_t budget = config.max_positions - specials;
  while (a.size() + b.size() > budget) {
    if (b.size() > a.size()) {
      b.pop_back();
    } else {
      a.pop_back();
    }
  }

  const auto& st = config.special_tokens;
  TokenSequence seq;
  seq.ids.push_back(st.cls_id);
  seq.ids.insert(seq.ids.end(), a.begin(), a.end());
  seq.ids.push_back(st.sep_id);
  if (text_pair) {
    seq.pair_boundary = seq.ids.size();
    seq.ids.insert(seq.ids.end(), b.begin(), b.end());
    seq.ids.push_back(st.sep_id);
  }
  return seq;
}

}  // namespace decompx
