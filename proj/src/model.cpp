#include "decompx/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include <json.hpp>

namespace decompx {

static_assert(std::endian::native == std::endian::little,
              "DXW tensors are little-endian; big-endian hosts are not supported");

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'D', 'X', 'W', '1'};
constexpr std::size_t kHeaderSize = 12;

std::size_t element_count(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

json config_to_json(const ModelConfig& c) {
  const auto& st = c.special_tokens;
  return json{
      {"hidden_size", c.hidden_size},
      {"num_layers", c.num_layers},
      {"num_heads", c.num_heads},
      {"head_dim", c.head_dim()},
      {"ffn_size", c.ffn_size},
      {"vocab_size", c.vocab_size},
      {"max_positions", c.max_positions},
      {"type_vocab_size", c.type_vocab_size},
      {"num_classes", c.num_classes},
      {"activation", std::string(activation_name(c.activation))},
      {"pooler_activation", std::string(activation_name(c.pooler_activation))},
      {"layer_norm_eps", c.layer_norm_eps},
      {"label_names", c.label_names},
      {"special_tokens",
       {{"cls_id", st.cls_id},
        {"sep_id", st.sep_id},
        {"mask_id", st.mask_id},
        {"pad_id", st.pad_id},
        {"unk_id", st.unk_id}}},
  };
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.hidden_size = j.at("hidden_size").get<std::size_t>();
    c.num_layers = j.at("num_layers").get<std::size_t>();
    c.num_heads = j.at("num_heads").get<std::size_t>();
    c.ffn_size = j.at("ffn_size").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_positions = j.at("max_positions").get<std::size_t>();
    c.type_vocab_size = j.at("type_vocab_size").get<std::size_t>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.activation = parse_activation(j.at("activation").get<std::string>());
    c.pooler_activation = parse_activation(j.at("pooler_activation").get<std::string>());
    c.layer_norm_eps = j.at("layer_norm_eps").get<double>();
    c.label_names = j.at("label_names").get<std::vector<std::string>>();
    const auto& st = j.at("special_tokens");
    c.special_tokens.cls_id = st.at("cls_id").get<std::uint32_t>();
    c.special_tokens.sep_id = st.at("sep_id").get<std::uint32_t>();
    c.special_tokens.mask_id = st.at("mask_id").get<std::uint32_t>();
    c.special_tokens.pad_id = st.at("pad_id").get<std::uint32_t>();
    c.special_tokens.unk_id = st.at("unk_id").get<std::uint32_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed config in manifest: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("malformed config in manifest: ") + e.what());
  }
  if (j.contains("head_dim") && c.num_heads != 0 &&
      j["head_dim"].get<std::size_t>() != c.hidden_size / c.num_heads) {
    throw ValidationError("head_dim disagrees with hidden_size / num_heads");
  }
  return c;
}

/// Allocates every tensor of `config` zero-filled.
Model allocate(const ModelConfig& config) {
  const std::size_t d = config.hidden_size;
  const std::size_t ff = config.ffn_size;
  Model m;
  m.config = config;
  auto& cw = m.classifier;
  cw.word_embeddings = Matrix(config.vocab_size, d);
  cw.position_embeddings = Matrix(config.max_positions, d);
  cw.token_type_embeddings = Matrix(config.type_vocab_size, d);
  cw.emb_ln_gamma.assign(d, 1.0f);
  cw.emb_ln_beta.assign(d, 0.0f);
  cw.pool_weight = Matrix(d, d);
  cw.pool_bias.assign(d, 0.0f);
  cw.cls_weight = Matrix(d, config.num_classes);
  cw.cls_bias.assign(config.num_classes, 0.0f);
  m.layers.resize(config.num_layers);
  for (auto& l : m.layers) {
    l.q_weight = l.k_weight = l.v_weight = l.out_weight = Matrix(d, d);
    l.q_bias = l.k_bias = l.v_bias = l.out_bias = std::vector<float>(d, 0.0f);
    l.ln1_gamma = l.ln2_gamma = std::vector<float>(d, 1.0f);
    l.ln1_beta = l.ln2_beta = std::vector<float>(d, 0.0f);
    l.ffn_w1 = Matrix(d, ff);
    l.ffn_b1.assign(ff, 0.0f);
    l.ffn_w2 = Matrix(ff, d);
    l.ffn_b2.assign(d, 0.0f);
  }
  return m;
}

template <typename Fn>
void for_each_tensor(Model& m, Fn&& fn) {
  auto mat = [&](const std::string& name, Matrix& x) {
    fn(name, std::vector<std::size_t>{x.rows(), x.cols()}, x.data());
  };
  auto vec = [&](const std::string& name, std::vector<float>& x) {
    fn(name, std::vector<std::size_t>{x.size()}, x);
  };
  auto& c = m.classifier;
  mat("embeddings.word", c.word_embeddings);
  mat("embeddings.position", c.position_embeddings);
  mat("embeddings.token_type", c.token_type_embeddings);
  vec("embeddings.ln.gamma", c.emb_ln_gamma);
  vec("embeddings.ln.beta", c.emb_ln_beta);
  mat("pooler.weight", c.pool_weight);
  vec("pooler.bias", c.pool_bias);
  mat("classifier.weight", c.cls_weight);
  vec("classifier.bias", c.cls_bias);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    auto& l = m.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    mat(p + "attn.q.weight", l.q_weight);
    vec(p + "attn.q.bias", l.q_bias);
    mat(p + "attn.k.weight", l.k_weight);
    vec(p + "attn.k.bias", l.k_bias);
    mat(p + "attn.v.weight", l.v_weight);
    vec(p + "attn.v.bias", l.v_bias);
    mat(p + "attn.out.weight", l.out_weight);
    vec(p + "attn.out.bias", l.out_bias);
    vec(p + "ln1.gamma", l.ln1_gamma);
    vec(p + "ln1.beta", l.ln1_beta);
    mat(p + "ffn.w1.weight", l.ffn_w1);
    vec(p + "ffn.w1.bias", l.ffn_b1);
    mat(p + "ffn.w2.weight", l.ffn_w2);
    vec(p + "ffn.w2.bias", l.ffn_b2);
    vec(p + "ln2.gamma", l.ln2_gamma);
    vec(p + "ln2.beta", l.ln2_beta);
  }
}

std::uint64_t read_u64_le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  std::memcpy(&v, p, sizeof v);
  return v;
}

}  // namespace

void ModelConfig::validate() const {
  if (hidden_size == 0) throw ValidationError("hidden_size must be positive");
  if (num_layers < 1) throw ValidationError("num_layers must be at least 1");
  if (num_heads == 0 || hidden_size % num_heads != 0) {
    throw ValidationError("hidden_size " + std::to_string(hidden_size) +
                          " is not divisible by num_heads " + std::to_string(num_heads));
  }
  if (ffn_size == 0) throw ValidationError("ffn_size must be positive");
  if (num_classes < 2) throw ValidationError("num_classes must be at least 2");
  if (max_positions == 0) throw ValidationError("max_positions must be positive");
  if (type_vocab_size == 0) throw ValidationError("type_vocab_size must be positive");
  if (label_names.size() != num_classes) {
    throw ValidationError("label_names has " + std::to_string(label_names.size()) +
                          " entries, expected " + std::to_string(num_classes));
  }
  if (!(layer_norm_eps >= 0.0)) throw ValidationError("layer_norm_eps must be nonnegative");
  const auto& st = special_tokens;
  for (auto id : {st.cls_id, st.sep_id, st.mask_id, st.pad_id, st.unk_id}) {
    if (id >= vocab_size) {
      throw ValidationError("special token id " + std::to_string(id) + " >= vocab_size " +
                            std::to_string(vocab_size));
    }
  }
}

std::map<std::string, TensorRef> tensor_table(Model& model) {
  std::map<std::string, TensorRef> table;
  for_each_tensor(model, [&](const std::string& name, std::vector<std::size_t> shape,
                             std::vector<float>& data) {
    table.emplace(name, TensorRef{std::move(shape), &data});
  });
  return table;
}

std::map<std::string, std::vector<std::size_t>> expected_shapes(const ModelConfig& config) {
  Model skeleton = allocate(config);
  std::map<std::string, std::vector<std::size_t>> shapes;
  for (auto& [name, ref] : tensor_table(skeleton)) shapes.emplace(name, ref.shape);
  return shapes;
}

void Model::validate() const {
  config.validate();
  if (layers.size() != config.num_layers) {
    throw ValidationError("model has " + std::to_string(layers.size()) + " layers, config says " +
                          std::to_string(config.num_layers));
  }
  const auto expected = expected_shapes(config);
  auto& self = const_cast<Model&>(*this);  // tensor_table only hands out views
  for (const auto& [name, ref] : tensor_table(self)) {
    const auto& want = expected.at(name);
    if (ref.shape != want || ref.data->size() != element_count(want)) {
      throw ValidationError("tensor " + name + " has shape " + shape_string(ref.shape) +
                                ", expected " + shape_string(want),
                            name);
    }
  }
}

std::vector<std::uint8_t> serialize_model(const Model& model) {
  model.validate();
  auto& self = const_cast<Model&>(model);
  const auto table = tensor_table(self);

  json tensors = json::object();
  std::size_t offset = 0;
  for (const auto& [name, ref] : table) {
    const std::size_t nbytes = ref.data->size() * sizeof(float);
    tensors[name] = {{"dtype", "f32"}, {"shape", ref.shape}, {"offset", offset}, {"nbytes", nbytes}};
    offset += nbytes;
  }
  const json manifest = {{"config", config_to_json(model.config)}, {"tensors", tensors}};
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> out;
  out.reserve(kHeaderSize + text.size() + offset);
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  const std::uint64_t len = text.size();
  const auto* lp = reinterpret_cast<const std::uint8_t*>(&len);
  out.insert(out.end(), lp, lp + sizeof len);
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, ref] : table) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(ref.data->data());
    out.insert(out.end(), p, p + ref.data->size() * sizeof(float));
  }
  return out;
}

Model deserialize_model(const std::vector<std::uint8_t>& bytes) {
  // A file cut off inside the magic is truncated rather than foreign.
  if (bytes.size() < 4 && (bytes.empty() || std::memcmp(bytes.data(), kMagic, bytes.size()) == 0)) {
    throw TruncationError("container ends inside the magic");
  }
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("not a DXW1 container (bad magic)");
  }
  if (bytes.size() < kHeaderSize) throw TruncationError("container header is truncated");
  const std::uint64_t manifest_len = read_u64_le(bytes.data() + 4);
  if (manifest_len > bytes.size() - kHeaderSize) {
    throw TruncationError("manifest length " + std::to_string(manifest_len) +
                          " exceeds file size");
  }
  json manifest;
  try {
    manifest = json::parse(bytes.begin() + kHeaderSize,
                           bytes.begin() + kHeaderSize + static_cast<std::ptrdiff_t>(manifest_len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!manifest.contains("config") || !manifest.contains("tensors")) {
    throw FormatError("manifest lacks config or tensors");
  }
  const ModelConfig config = config_from_json(manifest["config"]);
  config.validate();

  Model model = allocate(config);
  auto table = tensor_table(model);
  const std::uint8_t* blob = bytes.data() + kHeaderSize + manifest_len;
  const std::size_t blob_size = bytes.size() - kHeaderSize - manifest_len;

  const auto& tensors = manifest["tensors"];
  for (auto it = tensors.begin(); it != tensors.end(); ++it) {
    const std::string& name = it.key();
    auto slot = table.find(name);
    if (slot == table.end()) throw ValidationError("unexpected tensor " + name, name);
    const auto& entry = it.value();
    std::vector<std::size_t> shape;
    std::size_t offset = 0, nbytes = 0;
    std::string dtype;
    try {
      dtype = entry.at("dtype").get<std::string>();
      shape = entry.at("shape").get<std::vector<std::size_t>>();
      offset = entry.at("offset").get<std::size_t>();
      nbytes = entry.at("nbytes").get<std::size_t>();
    } catch (const json::exception& e) {
      throw FormatError("malformed manifest entry for " + name + ": " + e.what());
    }
    if (dtype != "f32") throw FormatError("tensor " + name + " has unsupported dtype " + dtype);
    if (shape != slot->second.shape) {
      throw ValidationError("tensor " + name + " has shape " + shape_string(shape) +
                                ", expected " + shape_string(slot->second.shape),
                            name);
    }
    if (nbytes != element_count(shape) * sizeof(float)) {
      throw TruncationError("tensor " + name + " declares " + std::to_string(nbytes) +
                            " bytes for shape " + shape_string(shape));
    }
    if (offset > blob_size || nbytes > blob_size - offset) {
      throw TruncationError("tensor " + name + " extends past the end of the blob");
    }
    std::memcpy(slot->second.data->data(), blob + offset, nbytes);
    table.erase(slot);
  }
  if (!table.empty()) {
    const auto& missing = table.begin()->first;
    throw ValidationError("missing tensor " + missing, missing);
  }
  model.validate();
  return model;
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

void save_model(const Model& model, const std::filesystem::path& path) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Model random_model(const ModelConfig& config, std::uint64_t seed,
                   const RandomModelOptions& options) {
  config.validate();
  Model model = allocate(config);
  std::mt19937_64 rng(seed);
  // Built from raw 64-bit draws so the stream is identical across standard libraries.
  auto uniform = [&] {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return static_cast<float>((2.0 * u - 1.0) * options.scale);
  };
  for (auto& [name, ref] : tensor_table(model)) {
    const bool is_gamma = name.ends_with(".gamma");
    const bool is_beta = name.ends_with(".beta");
    for (float& x : *ref.data) {
      const float r = uniform();
      if (is_gamma) {
        x = options.randomize_layer_norm ? 1.0f + r : 1.0f;
      } else if (is_beta) {
        x = options.randomize_layer_norm ? r : 0.0f;
      } else {
        x = r;
      }
    }
  }
  return model;
}

ModelConfig make_config(std::size_t hidden, std::size_t heads, std::size_t layers,
                        std::size_t classes, std::size_t vocab, std::size_t ffn) {
  ModelConfig c;
  c.hidden_size = hidden;
  c.num_heads = heads;
  c.num_layers = layers;
  c.num_classes = classes;
  c.ffn_size = ffn == 0 ? 4 * hidden : ffn;
  c.vocab_size = vocab;
  c.max_positions = 64;
  c.type_vocab_size = 2;
  c.activation = ActivationKind::GeluExact;
  c.pooler_activation = ActivationKind::Tanh;
  c.layer_norm_eps = 1e-12;
  for (std::size_t i = 0; i < classes; ++i) c.label_names.push_back("class_" + std::to_string(i));
  c.special_tokens = {.cls_id = 2, .sep_id = 3, .mask_id = 4, .pad_id = 0, .unk_id = 1};
  return c;
}

}  // namespace decompx
