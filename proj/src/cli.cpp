#include "decompx/cli.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "decompx/faithfulness.hpp"
#include "decompx/goldens.hpp"
#include "decompx/model.hpp"
#include "decompx/tokenizer.hpp"

namespace decompx {

namespace {

using nlohmann::json;

/// Thrown inside command handlers to leave with a specific exit code.
struct Exit {
  int code;
  std::string message;
};

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

Model load_or_exit(const std::string& path) {
  try {
    return load_model(path);
  } catch (const std::exception& e) {
    throw Exit{exit_code::kModel, "error: cannot load model '" + path + "': " + e.what()};
  }
}

std::size_t thread_budget() {
  const char* env = std::getenv("DECOMPX_THREADS");
  if (!env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1) {
    throw Exit{exit_code::kUsage, "error: DECOMPX_THREADS must be an integer >= 1"};
  }
  return static_cast<std::size_t>(v);
}

std::vector<std::string> token_strings(const TokenSequence& tokens, const Vocab* vocab) {
  std::vector<std::string> out;
  for (auto id : tokens.ids) {
    out.push_back(vocab && id < vocab->size() ? vocab->token(id) : "#" + std::to_string(id));
  }
  return out;
}

std::vector<std::size_t> resolve_classes(const std::string& selector, const ModelConfig& config) {
  std::vector<std::size_t> classes;
  if (selector == "all") {
    for (std::size_t c = 0; c < config.num_classes; ++c) classes.push_back(c);
    return classes;
  }
  for (std::size_t c = 0; c < config.label_names.size(); ++c) {
    if (config.label_names[c] == selector) return {c};
  }
  if (!selector.empty() && selector.find_first_not_of("0123456789") == std::string::npos) {
    const auto c = std::stoull(selector);
    if (c < config.num_classes) return {static_cast<std::size_t>(c)};
  }
  throw Exit{exit_code::kUsage, "error: --class '" + selector + "' is not a label name, index, or 'all'"};
}

void write_output(const std::string& text, const std::string& path, std::ostream& out) {
  if (path.empty()) {
    out << text;
    return;
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << text;
  if (!f) throw Exit{exit_code::kFailed, "error: cannot write " + path};
}

std::string html_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fixed(double v, int digits) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

// ---------------------------------------------------------------- commands

struct ExplainArgs {
  std::string model, vocab, text, text_pair, ids, mode = "absdot", format = "json", cls = "all",
      out;
};

int cmd_explain(const ExplainArgs& a, std::ostream& out) {
  if (a.mode != "absdot" && a.mode != "nobias") {
    throw Exit{exit_code::kUsage, "error: --mode must be absdot or nobias"};
  }
  if (a.format != "json" && a.format != "html") {
    throw Exit{exit_code::kUsage, "error: --format must be json or html"};
  }
  if (a.text.empty() == a.ids.empty()) {
    throw Exit{exit_code::kUsage, "error: give exactly one of --text or --ids"};
  }
  const Model model = load_or_exit(a.model);
  const auto classes = resolve_classes(a.cls, model.config);

  std::unique_ptr<Vocab> vocab;
  TokenSequence tokens;
  try {
    if (!a.vocab.empty()) vocab = std::make_unique<Vocab>(Vocab::load(a.vocab));
    if (!a.text.empty()) {
      if (!vocab) throw UsageError("--text needs --vocab");
      std::optional<std::string> pair;
      if (!a.text_pair.empty()) pair = a.text_pair;
      tokens = tokenize(*vocab, model.config, a.text, pair);
    } else {
      for (const auto& s : split_csv(a.ids)) tokens.ids.push_back(static_cast<std::uint32_t>(std::stoul(s)));
    }
    check_tokens(model.config, tokens);
  } catch (const std::exception& e) {
    throw Exit{exit_code::kTokenize, std::string("error: tokenization failed: ") + e.what()};
  }

  const Explanation ex = explain(model, tokens, parse_bias_mode(a.mode));
  const auto names = token_strings(tokens, vocab.get());
  if (a.format == "json") {
    write_output(explanation_to_json(ex, names, model.config.label_names).dump(2) + "\n", a.out, out);
  } else {
    write_output(render_heatmap(ex, names, model.config.label_names, classes), a.out, out);
  }
  return exit_code::kOk;
}

struct EvaluateArgs {
  std::string model, data, vocab, methods = "decompx", ks = "0,10,20,30,40,50,60,70,80,90,100",
      direction = "most", format = "json", out;
  bool include_zero = false;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  std::vector<Method> methods;
  for (const auto& name : split_csv(a.methods)) {
    try {
      methods.push_back(make_method(name));
    } catch (const UsageError& e) {
      throw Exit{exit_code::kUsage, std::string("error: ") + e.what()};
    }
  }
  if (methods.empty()) throw Exit{exit_code::kUsage, "error: --methods is empty"};
  std::vector<double> ks;
  try {
    for (const auto& s : split_csv(a.ks)) {
      std::size_t used = 0;
      const double k = std::stod(s, &used);
      if (used != s.size() || k < 0.0 || k > 100.0) throw std::invalid_argument(s);
      ks.push_back(k);
    }
  } catch (const std::exception&) {
    throw Exit{exit_code::kUsage, "error: --ks must be comma-separated percents in [0, 100]"};
  }
  if (ks.empty()) throw Exit{exit_code::kUsage, "error: --ks is empty"};
  Direction direction;
  try {
    direction = parse_direction(a.direction);
  } catch (const UsageError& e) {
    throw Exit{exit_code::kUsage, std::string("error: ") + e.what()};
  }
  if (a.format != "json" && a.format != "csv") {
    throw Exit{exit_code::kUsage, "error: --format must be json or csv"};
  }
  const std::size_t threads = thread_budget();

  const Model model = load_or_exit(a.model);
  std::vector<LabeledExample> data;
  try {
    std::unique_ptr<Vocab> vocab;
    if (!a.vocab.empty()) vocab = std::make_unique<Vocab>(Vocab::load(a.vocab));
    TextEncoder encoder;
    if (vocab) {
      encoder = [&](const std::string& t, const std::optional<std::string>& p) {
        return tokenize(*vocab, model.config, t, p);
      };
    }
    std::ifstream in(a.data);
    if (!in) throw DatasetError("cannot open " + a.data);
    data = read_dataset(in, model.config, encoder);
  } catch (const std::exception& e) {
    throw Exit{exit_code::kDataset, std::string("error: dataset: ") + e.what()};
  }

  FaithfulnessReport report;
  try {
    report = compare_methods(model, data, methods, ks, direction,
                             {.threads = threads, .include_zero_in_mean = a.include_zero});
  } catch (const DatasetError& e) {
    throw Exit{exit_code::kDataset, std::string("error: dataset: ") + e.what()};
  }
  if (a.format == "json") {
    write_output(report_to_json(report).dump(2) + "\n", a.out, out);
  } else {
    std::ostringstream csv;
    write_report_csv(report, csv);
    write_output(csv.str(), a.out, out);
  }
  return exit_code::kOk;
}

TokenSequence self_test_input(const ModelConfig& cfg) {
  const auto& st = cfg.special_tokens;
  const std::size_t n = std::min<std::size_t>(8, cfg.max_positions);
  std::mt19937_64 rng(20240601);
  TokenSequence t;
  t.ids.push_back(st.cls_id);
  while (t.ids.size() + 1 < n) {
    const auto id = static_cast<std::uint32_t>(rng() % cfg.vocab_size);
    if (id == st.cls_id || id == st.sep_id || id == st.pad_id || id == st.mask_id) continue;
    t.ids.push_back(id);
  }
  if (n > 1) t.ids.push_back(st.sep_id);
  return t;
}

int cmd_inspect(const std::string& path, bool as_json, std::ostream& out) {
  Model model = load_or_exit(path);
  const auto& cfg = model.config;
  constexpr double kTolerance = 1e-4;
  const auto report = check_completeness(model, self_test_input(cfg));
  const bool pass = report.within(kTolerance);
  const Explanation ex = explain(model, self_test_input(cfg));

  if (as_json) {
    json tensors = json::object();
    for (const auto& [name, ref] : tensor_table(model)) tensors[name] = ref.shape;
    json j = {{"config",
               {{"hidden_size", cfg.hidden_size},
                {"num_layers", cfg.num_layers},
                {"num_heads", cfg.num_heads},
                {"head_dim", cfg.head_dim()},
                {"ffn_size", cfg.ffn_size},
                {"vocab_size", cfg.vocab_size},
                {"max_positions", cfg.max_positions},
                {"type_vocab_size", cfg.type_vocab_size},
                {"num_classes", cfg.num_classes},
                {"activation", std::string(activation_name(cfg.activation))},
                {"pooler_activation", std::string(activation_name(cfg.pooler_activation))},
                {"layer_norm_eps", cfg.layer_norm_eps},
                {"label_names", cfg.label_names}}},
              {"tensors", tensors},
              {"self_test",
               {{"hidden_error", report.hidden},
                {"logit_error", report.logits},
                {"tolerance", kTolerance},
                {"linearization_residual", ex.linearization_residual},
                {"result", pass ? "PASS" : "FAIL"}}}};
    out << j.dump(2) << "\n";
  } else {
    out << "config\n";
    out << "  hidden_size " << cfg.hidden_size << "  heads " << cfg.num_heads << "  layers "
        << cfg.num_layers << "  ffn " << cfg.ffn_size << "\n";
    out << "  vocab " << cfg.vocab_size << "  max_positions " << cfg.max_positions
        << "  type_vocab " << cfg.type_vocab_size << "  classes " << cfg.num_classes << "\n";
    out << "  activation " << activation_name(cfg.activation) << "  pooler "
        << activation_name(cfg.pooler_activation) << "  ln_eps " << cfg.layer_norm_eps << "\n";
    out << "  labels";
    for (const auto& l : cfg.label_names) out << ' ' << l;
    out << "\ntensors\n";
    for (const auto& [name, ref] : tensor_table(model)) {
      out << "  " << name << " [";
      for (std::size_t i = 0; i < ref.shape.size(); ++i) out << (i ? ", " : "") << ref.shape[i];
      out << "]\n";
    }
    out << "self-test completeness: hidden " << report.hidden << ", logits " << report.logits
        << " (tolerance " << kTolerance << "), linearization residual "
        << ex.linearization_residual << "\n";
    out << (pass ? "PASS" : "FAIL") << "\n";
  }
  return pass ? exit_code::kOk : exit_code::kFailed;
}

int cmd_tokenize(const std::string& model_path, const std::string& vocab_path,
                 const std::string& text, const std::string& pair, std::ostream& out) {
  const Model model = load_or_exit(model_path);
  try {
    const Vocab vocab = Vocab::load(vocab_path);
    std::optional<std::string> p;
    if (!pair.empty()) p = pair;
    const TokenSequence t = tokenize(vocab, model.config, text, p);
    json j = {{"ids", t.ids}, {"tokens", token_strings(t, &vocab)}};
    j["pair_boundary"] = t.pair_boundary ? json(*t.pair_boundary) : json(nullptr);
    out << j.dump() << "\n";
  } catch (const std::exception& e) {
    throw Exit{exit_code::kTokenize, std::string("error: tokenization failed: ") + e.what()};
  }
  return exit_code::kOk;
}

int cmd_verify(const std::string& model_path, const std::string& goldens_path, double tol,
               std::ostream& out) {
  const Model model = load_or_exit(model_path);
  std::vector<GoldenCase> cases;
  try {
    cases = read_goldens(goldens_path);
  } catch (const std::exception& e) {
    throw Exit{exit_code::kDataset, std::string("error: goldens: ") + e.what()};
  }
  GoldenComparison cmp;
  try {
    cmp = compare_goldens(model, cases);
  } catch (const std::exception& e) {
    throw Exit{exit_code::kDataset, std::string("error: goldens: ") + e.what()};
  }
  const bool pass = cmp.max_hidden_diff <= tol && cmp.max_logit_diff <= tol;
  json j = {{"cases", cases.size()},
            {"max_hidden_diff", cmp.max_hidden_diff},
            {"max_logit_diff", cmp.max_logit_diff},
            {"per_layer", cmp.per_layer},
            {"tolerance", tol},
            {"result", pass ? "PASS" : "FAIL"}};
  out << j.dump(2) << "\n";
  return pass ? exit_code::kOk : exit_code::kFailed;
}

const char* const kDemoWords[] = {
    "the", "a", "movie", "film", "was", "is", "not", "very", "good", "bad", "great", "terrible",
    "boring", "fun", "and", "but", "i", "it", "loved", "hated", "plot", "acting", "story", "really",
    "no", "best", "worst", "ever", "so", "this", ".", ",", "!", "?", "##s", "##ed", "##ing", "##ly"};

int cmd_random_model(std::size_t hidden, std::size_t heads, std::size_t layers, std::size_t classes,
                     std::size_t vocab_size, std::uint64_t seed, const std::string& out_path,
                     const std::string& vocab_out, std::ostream& out) {
  constexpr std::size_t kSpecials = 5;
  const std::size_t min_vocab = kSpecials + std::size(kDemoWords);
  if (vocab_size < min_vocab) vocab_size = min_vocab;
  ModelConfig cfg = make_config(hidden, heads, layers, classes, vocab_size);
  cfg.special_tokens = {.cls_id = 2, .sep_id = 3, .mask_id = 4, .pad_id = 0, .unk_id = 1};
  try {
    save_model(random_model(cfg, seed), out_path);
  } catch (const ValidationError& e) {
    throw Exit{exit_code::kUsage, std::string("error: ") + e.what()};
  }
  if (!vocab_out.empty()) {
    std::ostringstream v;
    v << "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\n";
    for (const char* w : kDemoWords) v << w << "\n";
    for (std::size_t i = min_vocab; i < vocab_size; ++i) v << "[unused" << i << "]\n";
    write_output(v.str(), vocab_out, out);
  }
  out << "wrote " << out_path << "\n";
  return exit_code::kOk;
}

}  // namespace

json explanation_to_json(const Explanation& ex, const std::vector<std::string>& tokens,
                         const std::vector<std::string>& label_names) {
  json attributions = json::array();
  for (std::size_t c = 0; c < ex.attributions.rows(); ++c) {
    const auto row = ex.attributions.row(c);
    attributions.push_back(std::vector<float>(row.begin(), row.end()));
  }
  return {{"tokens", tokens},
          {"ids", ex.tokens.ids},
          {"logits", ex.logits},
          {"predicted_class", ex.predicted_class},
          {"label_names", label_names},
          {"mode", std::string(bias_mode_name(ex.bias_mode))},
          {"attributions", attributions}};
}

std::string render_heatmap(const Explanation& ex, const std::vector<std::string>& tokens,
                           const std::vector<std::string>& label_names,
                           const std::vector<std::size_t>& classes) {
  std::ostringstream h;
  h << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Token attributions</title>\n"
    << "<style>body{font-family:sans-serif;margin:2em}"
    << ".tok{display:inline-block;padding:2px 4px;margin:2px;border-radius:3px}"
    << "h2{font-size:1.1em}.meta{color:#555}</style></head><body>\n";
  h << "<p class=\"meta\">mode: " << bias_mode_name(ex.bias_mode)
    << ", predicted: " << html_escape(label_names.at(ex.predicted_class)) << "</p>\n";
  for (std::size_t c : classes) {
    const auto row = ex.attributions.row(c);
    double peak = 0.0;
    for (float v : row) peak = std::max(peak, std::fabs(static_cast<double>(v)));
    h << "<section><h2>" << html_escape(label_names.at(c)) << " (logit "
      << fixed(ex.logits.at(c), 4) << ")</h2>\n<div>";
    for (std::size_t k = 0; k < row.size(); ++k) {
      const double alpha = peak > 0.0 ? std::fabs(static_cast<double>(row[k])) / peak : 0.0;
      const char* rgb = row[k] >= 0.0f ? "0,160,0" : "200,0,0";
      h << "<span class=\"tok\" style=\"background:rgba(" << rgb << "," << fixed(alpha, 3)
        << ")\" title=\"" << fixed(row[k], 6) << "\">" << html_escape(tokens.at(k)) << "</span>";
    }
    h << "</div></section>\n";
  }
  h << "</body></html>\n";
  return h.str();
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Token attributions for Transformer-encoder classifiers", "decompx"};
  app.require_subcommand(1);

  ExplainArgs ea;
  auto* explain_cmd = app.add_subcommand("explain", "Attribute logits to input tokens");
  explain_cmd->add_option("--model", ea.model, "DXW model file")->required();
  explain_cmd->add_option("--vocab", ea.vocab, "Vocabulary file, one token per line");
  explain_cmd->add_option("--text", ea.text, "Input text");
  explain_cmd->add_option("--text-pair", ea.text_pair, "Second segment for pair tasks");
  explain_cmd->add_option("--ids", ea.ids, "Comma-separated token ids (bypasses the tokenizer)");
  explain_cmd->add_option("--mode", ea.mode, "absdot or nobias");
  explain_cmd->add_option("--format", ea.format, "json or html");
  explain_cmd->add_option("--class", ea.cls, "Label name, index, or all");
  explain_cmd->add_option("--out", ea.out, "Write here instead of stdout");

  EvaluateArgs va;
  auto* eval_cmd = app.add_subcommand("evaluate", "AOPC / accuracy under token masking");
  eval_cmd->add_option("--model", va.model, "DXW model file")->required();
  eval_cmd->add_option("--data", va.data, "JSON-lines dataset")->required();
  eval_cmd->add_option("--vocab", va.vocab, "Vocabulary for text rows");
  eval_cmd->add_option("--methods", va.methods, "Comma-separated attribution methods");
  eval_cmd->add_option("--ks", va.ks, "Comma-separated mask percents");
  eval_cmd->add_option("--direction", va.direction, "most or least");
  eval_cmd->add_option("--format", va.format, "json or csv");
  eval_cmd->add_option("--out", va.out, "Write here instead of stdout");
  eval_cmd->add_flag("--include-zero", va.include_zero, "Count K=0 in the means");

  std::string inspect_path;
  bool inspect_json = false;
  auto* inspect_cmd = app.add_subcommand("inspect", "Print config, tensors, and a self-test");
  inspect_cmd->add_option("model", inspect_path, "DXW model file")->required();
  inspect_cmd->add_flag("--json", inspect_json, "Machine-readable output");

  std::string tok_model, tok_vocab, tok_text, tok_pair;
  auto* tok_cmd = app.add_subcommand("tokenize", "Show token ids for a text");
  tok_cmd->add_option("--model", tok_model, "DXW model file")->required();
  tok_cmd->add_option("--vocab", tok_vocab, "Vocabulary file")->required();
  tok_cmd->add_option("--text", tok_text, "Input text")->required();
  tok_cmd->add_option("--text-pair", tok_pair, "Second segment");

  std::string ver_model, ver_goldens;
  double ver_tol = 1e-4;
  auto* verify_cmd = app.add_subcommand("verify", "Compare the forward pass with golden activations");
  verify_cmd->add_option("--model", ver_model, "DXW model file")->required();
  verify_cmd->add_option("--goldens", ver_goldens, "DXG1 fixture")->required();
  verify_cmd->add_option("--tol", ver_tol, "Max-abs tolerance");

  std::size_t rm_hidden = 16, rm_heads = 2, rm_layers = 2, rm_classes = 2, rm_vocab = 64;
  std::uint64_t rm_seed = 1;
  std::string rm_out, rm_vocab_out;
  auto* rm_cmd = app.add_subcommand("random-model", "Write a randomly initialized model");
  rm_cmd->add_option("--out", rm_out, "Output DXW path")->required();
  rm_cmd->add_option("--vocab-out", rm_vocab_out, "Also write a toy vocabulary");
  rm_cmd->add_option("--hidden", rm_hidden, "Hidden size");
  rm_cmd->add_option("--heads", rm_heads, "Attention heads");
  rm_cmd->add_option("--layers", rm_layers, "Encoder layers");
  rm_cmd->add_option("--classes", rm_classes, "Output classes");
  rm_cmd->add_option("--vocab-size", rm_vocab, "Vocabulary size");
  rm_cmd->add_option("--seed", rm_seed, "RNG seed");

  std::vector<std::string> argv_store;
  argv_store.reserve(args.size() + 1);
  argv_store.push_back("decompx");
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& s : argv_store) argv.push_back(s.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? exit_code::kOk : exit_code::kUsage;
  }

  try {
    if (*explain_cmd) return cmd_explain(ea, out);
    if (*eval_cmd) return cmd_evaluate(va, out);
    if (*inspect_cmd) return cmd_inspect(inspect_path, inspect_json, out);
    if (*tok_cmd) return cmd_tokenize(tok_model, tok_vocab, tok_text, tok_pair, out);
    if (*verify_cmd) return cmd_verify(ver_model, ver_goldens, ver_tol, out);
    if (*rm_cmd) {
      return cmd_random_model(rm_hidden, rm_heads, rm_layers, rm_classes, rm_vocab, rm_seed, rm_out,
                              rm_vocab_out, out);
    }
  } catch (const Exit& e) {
    err << e.message << "\n";
    return e.code;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::kFailed;
  }
  return exit_code::kUsage;
}

}  // namespace decompx
