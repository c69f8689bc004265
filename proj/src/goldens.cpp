#include "decompx/goldens.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

namespace decompx {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'D', 'X', 'G', '1'};
constexpr std::size_t kHeaderSize = 12;

struct BlobWriter {
  json tensors = json::object();
  std::vector<std::uint8_t> blob;

  void add(const std::string& name, std::vector<std::size_t> shape, std::span<const float> data) {
    const std::size_t nbytes = data.size() * sizeof(float);
    tensors[name] = {{"dtype", "f32"}, {"shape", shape}, {"offset", blob.size()}, {"nbytes", nbytes}};
    const auto* p = reinterpret_cast<const std::uint8_t*>(data.data());
    blob.insert(blob.end(), p, p + nbytes);
  }
};

std::vector<float> read_tensor(const json& tensors, const std::string& name,
                               std::span<const std::uint8_t> blob,
                               std::vector<std::size_t>& shape) {
  if (!tensors.contains(name)) throw FormatError("golden fixture lacks tensor " + name);
  const auto& e = tensors[name];
  if (e.value("dtype", "") != "f32") throw FormatError("tensor " + name + " is not f32");
  shape = e.at("shape").get<std::vector<std::size_t>>();
  const auto offset = e.at("offset").get<std::size_t>();
  const auto nbytes = e.at("nbytes").get<std::size_t>();
  std::size_t count = 1;
  for (auto s : shape) count *= s;
  if (nbytes != count * sizeof(float)) {
    throw TruncationError("tensor " + name + " byte count disagrees with its shape");
  }
  if (offset > blob.size() || nbytes > blob.size() - offset) {
    throw TruncationError("tensor " + name + " extends past the end of the blob");
  }
  std::vector<float> out(count);
  std::memcpy(out.data(), blob.data() + offset, nbytes);
  return out;
}

}  // namespace

std::vector<std::uint8_t> serialize_goldens(const std::vector<GoldenCase>& cases) {
  BlobWriter w;
  json boundaries = json::array();
  for (std::size_t n = 0; n < cases.size(); ++n) {
    const auto& c = cases[n];
    const std::string p = "inputs." + std::to_string(n) + ".";
    std::vector<float> ids(c.tokens.ids.begin(), c.tokens.ids.end());
    w.add(p + "ids", {ids.size()}, ids);
    for (std::size_t l = 0; l < c.hidden.size(); ++l) {
      w.add(p + "hidden." + std::to_string(l), {c.hidden[l].rows(), c.hidden[l].cols()},
            c.hidden[l].data());
    }
    w.add(p + "logits", {c.logits.size()}, c.logits);
    boundaries.push_back(c.tokens.pair_boundary ? json(*c.tokens.pair_boundary) : json(nullptr));
  }
  const std::string text =
      json{{"count", cases.size()}, {"pair_boundaries", boundaries}, {"tensors", w.tensors}}.dump();
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  const std::uint64_t len = text.size();
  const auto* lp = reinterpret_cast<const std::uint8_t*>(&len);
  out.insert(out.end(), lp, lp + sizeof len);
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), w.blob.begin(), w.blob.end());
  return out;
}

std::vector<GoldenCase> parse_goldens(const std::vector<std::uint8_t>& bytes) {
  // A file cut off inside the magic is truncated rather than foreign.
  if (bytes.size() < 4 && (bytes.empty() || std::memcmp(bytes.data(), kMagic, bytes.size()) == 0)) {
    throw TruncationError("golden file ends inside the magic");
  }
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("not a DXG1 golden fixture (bad magic)");
  }
  if (bytes.size() < kHeaderSize) throw TruncationError("golden header is truncated");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 4, sizeof len);
  if (len > bytes.size() - kHeaderSize) throw TruncationError("golden manifest is truncated");
  std::vector<GoldenCase> cases;
  try {
    const json manifest = json::parse(bytes.begin() + kHeaderSize,
                                      bytes.begin() + kHeaderSize + static_cast<std::ptrdiff_t>(len));
    const std::span<const std::uint8_t> blob(bytes.data() + kHeaderSize + len,
                                             bytes.size() - kHeaderSize - len);
    const auto& tensors = manifest.at("tensors");
    const auto count = manifest.at("count").get<std::size_t>();
    for (std::size_t n = 0; n < count; ++n) {
      const std::string p = "inputs." + std::to_string(n) + ".";
      GoldenCase c;
      std::vector<std::size_t> shape;
      for (float id : read_tensor(tensors, p + "ids", blob, shape)) {
        c.tokens.ids.push_back(static_cast<std::uint32_t>(id));
      }
      if (manifest.contains("pair_boundaries") && n < manifest["pair_boundaries"].size() &&
          !manifest["pair_boundaries"][n].is_null()) {
        c.tokens.pair_boundary = manifest["pair_boundaries"][n].get<std::size_t>();
      }
      for (std::size_t l = 0; tensors.contains(p + "hidden." + std::to_string(l)); ++l) {
        auto data = read_tensor(tensors, p + "hidden." + std::to_string(l), blob, shape);
        if (shape.size() != 2) throw FormatError("hidden state tensors must be rank 2");
        c.hidden.emplace_back(shape[0], shape[1], std::move(data));
      }
      c.logits = read_tensor(tensors, p + "logits", blob, shape);
      cases.push_back(std::move(c));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed golden manifest: ") + e.what());
  }
  return cases;
}

std::vector<GoldenCase> read_goldens(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return parse_goldens(bytes);
}

void write_goldens(const std::vector<GoldenCase>& cases, const std::filesystem::path& path) {
  const auto bytes = serialize_goldens(cases);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::vector<GoldenCase> capture_goldens(const Model& model, const std::vector<TokenSequence>& inputs) {
  if (inputs.empty()) throw std::invalid_argument("no inputs to capture");
  std::vector<GoldenCase> cases;
  for (const auto& t : inputs) {
    const ForwardTrace trace = forward(model, t);
    GoldenCase c{t, {trace.embeddings}, trace.logits};
    for (const auto& lt : trace.layers) c.hidden.push_back(lt.output);
    cases.push_back(std::move(c));
  }
  return cases;
}

GoldenComparison compare_goldens(const Model& model, const std::vector<GoldenCase>& cases) {
  GoldenComparison cmp;
  cmp.per_layer.assign(model.config.num_layers + 1, 0.0);
  for (const auto& c : cases) {
    if (c.hidden.size() != model.config.num_layers + 1) {
      throw ValidationError("golden case has " + std::to_string(c.hidden.size()) +
                            " hidden states, model expects " +
                            std::to_string(model.config.num_layers + 1));
    }
    const ForwardTrace trace = forward(model, c.tokens);
    for (std::size_t l = 0; l < c.hidden.size(); ++l) {
      const Matrix& got = l == 0 ? trace.embeddings : trace.layers[l - 1].output;
      if (got.rows() != c.hidden[l].rows() || got.cols() != c.hidden[l].cols()) {
        throw ValidationError("golden hidden state " + std::to_string(l) + " has the wrong shape");
      }
      for (std::size_t e = 0; e < got.size(); ++e) {
        const double diff = std::fabs(static_cast<double>(got.data()[e]) - c.hidden[l].data()[e]);
        cmp.per_layer[l] = std::max(cmp.per_layer[l], diff);
        cmp.max_hidden_diff = std::max(cmp.max_hidden_diff, diff);
      }
    }
    if (c.logits.size() != trace.logits.size()) throw ValidationError("golden logits have the wrong length");
    for (std::size_t k = 0; k < c.logits.size(); ++k) {
      cmp.max_logit_diff =
          std::max(cmp.max_logit_diff, std::fabs(static_cast<double>(trace.logits[k]) - c.logits[k]));
    }
  }
  return cmp;
}

}  // namespace decompx
