#include "decompx/faithfulness.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <exception>
#include <istream>
#include <mutex>
#include <numeric>
#include <ostream>
#include <random>
#include <thread>

#include "decompx/baselines.hpp"
#include "decompx/decompose.hpp"

namespace decompx {

namespace {

struct ExampleOutcome {
  std::vector<double> prob_drop;      // per ratio
  std::vector<bool> correct;          // per ratio, meaningful only when labeled
  bool labeled = false;
};

/// Runs `work(i)` for i in [0, count) on up to `threads` workers. The first
/// exception thrown by any worker is rethrown on the caller's thread.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& work) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) work(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          work(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

ExampleOutcome evaluate_example(const Model& model, const LabeledExample& ex,
                                const std::vector<double>& ratios, Direction direction,
                                const Scorer& scorer) {
  const auto clean_logits = logits(model, ex.tokens);
  const std::size_t predicted = argmax(clean_logits);
  const double p_clean = softmax(clean_logits)[predicted];
  const auto scores = scorer(model, ex, predicted);
  if (scores.size() != ex.tokens.size()) {
    throw std::logic_error("scorer returned " + std::to_string(scores.size()) + " scores for " +
                           std::to_string(ex.tokens.size()) + " tokens");
  }

  ExampleOutcome out;
  out.labeled = ex.gold_label.has_value();
  for (double k : ratios) {
    const TokenSequence masked =
        mask_tokens(ex.tokens, scores, k, direction, model.config.special_tokens);
    // Unchanged input: reuse the clean pass so AOPC(0) is exactly zero.
    const auto y = masked == ex.tokens ? clean_logits : logits(model, masked);
    out.prob_drop.push_back(masked == ex.tokens ? 0.0 : p_clean - softmax(y)[predicted]);
    out.correct.push_back(out.labeled && argmax(y) == *ex.gold_label);
  }
  return out;
}

MethodCurve reduce(const std::string& name, const std::vector<ExampleOutcome>& outcomes,
                   const std::vector<double>& ratios, bool include_zero) {
  MethodCurve curve;
  curve.method = name;
  const double n = static_cast<double>(outcomes.size());
  const auto labeled = static_cast<std::size_t>(
      std::count_if(outcomes.begin(), outcomes.end(), [](const auto& o) { return o.labeled; }));
  double aopc_sum = 0.0, acc_sum = 0.0;
  std::size_t in_mean = 0;
  for (std::size_t r = 0; r < ratios.size(); ++r) {
    double drop = 0.0;
    std::size_t hits = 0;
    for (const auto& o : outcomes) {
      drop += o.prob_drop[r];
      hits += o.correct[r] ? 1 : 0;
    }
    curve.aopc.push_back(drop / n);
    if (labeled > 0) {
      curve.accuracy.push_back(static_cast<double>(hits) / static_cast<double>(labeled));
    } else {
      curve.accuracy.push_back(std::nullopt);
    }
    if (include_zero || ratios[r] != 0.0) {
      aopc_sum += curve.aopc.back();
      if (labeled > 0) acc_sum += *curve.accuracy.back();
      ++in_mean;
    }
  }
  if (in_mean > 0) {
    curve.mean_aopc = aopc_sum / static_cast<double>(in_mean);
    if (labeled > 0) curve.mean_accuracy = acc_sum / static_cast<double>(in_mean);
  }
  return curve;
}

std::uint64_t fnv1a(const std::vector<std::uint32_t>& ids) {
  std::uint64_t h = 1469598103934665603ull;
  for (auto id : ids) {
    for (int b = 0; b < 4; ++b) {
      h ^= (id >> (8 * b)) & 0xffu;
      h *= 1099511628211ull;
    }
  }
  return h;
}

std::vector<float> random_scores(const TokenSequence& tokens) {
  std::mt19937_64 rng(fnv1a(tokens.ids));
  std::vector<float> s(tokens.size());
  for (auto& v : s) v = static_cast<float>(static_cast<double>(rng() >> 11) * 0x1.0p-53);
  return s;
}

}  // namespace

std::string_view direction_name(Direction d) {
  return d == Direction::MostFirst ? "most" : "least";
}

Direction parse_direction(std::string_view name) {
  if (name == "most") return Direction::MostFirst;
  if (name == "least") return Direction::LeastFirst;
  throw UsageError("direction must be 'most' or 'least', got '" + std::string(name) + "'");
}

std::size_t mask_count(double percent, std::size_t maskable) {
  if (percent < 0.0 || percent > 100.0) throw UsageError("mask ratio must be within [0, 100]");
  if (percent == 0.0 || maskable == 0) return 0;
  const double exact = percent * static_cast<double>(maskable) / 100.0;
  const auto rounded = static_cast<std::size_t>(std::floor(exact + 0.5 + 1e-9));
  return std::clamp<std::size_t>(rounded, 1, maskable);
}

TokenSequence mask_tokens(const TokenSequence& tokens, std::span<const float> scores,
                          double percent, Direction direction, const SpecialTokens& special) {
  if (scores.size() != tokens.size()) throw UsageError("one score per token required");
  std::vector<std::size_t> maskable;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto id = tokens.ids[i];
    if (id != special.cls_id && id != special.sep_id) maskable.push_back(i);
  }
  const std::size_t count = mask_count(percent, maskable.size());
  std::stable_sort(maskable.begin(), maskable.end(), [&](std::size_t a, std::size_t b) {
    return direction == Direction::MostFirst ? scores[a] > scores[b] : scores[a] < scores[b];
  });
  TokenSequence out = tokens;
  for (std::size_t m = 0; m < count; ++m) out.ids[maskable[m]] = special.mask_id;
  return out;
}

FaithfulnessReport compare_methods(const Model& model, const std::vector<LabeledExample>& data,
                                   const std::vector<Method>& methods,
                                   const std::vector<double>& ratios, Direction direction,
                                   const EvaluationOptions& options) {
  if (data.empty()) throw UsageError("evaluation data is empty");
  if (methods.empty()) throw UsageError("no attribution methods requested");
  if (ratios.empty()) throw UsageError("no mask ratios requested");
  for (double k : ratios) {
    if (k < 0.0 || k > 100.0) throw UsageError("mask ratio must be within [0, 100]");
  }
  for (const auto& ex : data) {
    if (ex.gold_label && *ex.gold_label >= model.config.num_classes) {
      throw DatasetError("gold label " + std::to_string(*ex.gold_label) + " >= num_classes");
    }
  }

  FaithfulnessReport report;
  report.ratios = ratios;
  report.direction = direction;
  report.include_zero_in_mean = options.include_zero_in_mean;
  report.num_examples = data.size();
  for (const auto& method : methods) {
    std::vector<ExampleOutcome> outcomes(data.size());
    parallel_for(data.size(), options.threads, [&](std::size_t i) {
      outcomes[i] = evaluate_example(model, data[i], ratios, direction, method.scorer);
    });
    report.methods.push_back(reduce(method.name, outcomes, ratios, options.include_zero_in_mean));
  }
  return report;
}

FaithfulnessReport aopc_curve(const Model& model, const std::vector<LabeledExample>& data,
                              const Method& method, const std::vector<double>& ratios,
                              Direction direction, const EvaluationOptions& options) {
  return compare_methods(model, data, {method}, ratios, direction, options);
}

const std::vector<std::string>& builtin_method_names() {
  static const std::vector<std::string> names = {
      "decompx", "decompx-nobias", "decompx-norm", "rollout",
      "gradxinput", "ig", "random", "given"};
  return names;
}

Method make_method(const std::string& name) {
  if (name == "decompx" || name == "decompx-nobias") {
    const BiasMode mode = name == "decompx" ? BiasMode::AbsDot : BiasMode::NoBias;
    return {name, [mode](const Model& m, const LabeledExample& ex, std::size_t c) {
              const Explanation e = explain(m, ex.tokens, mode);
              const auto row = e.attributions.row(c);
              return std::vector<float>(row.begin(), row.end());
            }};
  }
  if (name == "decompx-norm") {
    return {name, [](const Model& m, const LabeledExample& ex, std::size_t) {
              return norm_attribution(propagate(m, ex.tokens, BiasMode::AbsDot).state, 0);
            }};
  }
  if (name == "rollout") {
    return {name, [](const Model& m, const LabeledExample& ex, std::size_t) {
              return rollout_attribution(m, ex.tokens).scores;
            }};
  }
  if (name == "gradxinput") {
    return {name, [](const Model& m, const LabeledExample& ex, std::size_t c) {
              return gradient_x_input(m, ex.tokens, c).scores;
            }};
  }
  if (name == "ig") {
    return {name, [](const Model& m, const LabeledExample& ex, std::size_t c) {
              return integrated_gradients(m, ex.tokens, c).scores;
            }};
  }
  if (name == "random") {
    return {name, [](const Model&, const LabeledExample& ex, std::size_t) {
              return random_scores(ex.tokens);
            }};
  }
  if (name == "given") {
    return {name, [](const Model&, const LabeledExample& ex, std::size_t) {
              if (!ex.given_scores) throw DatasetError("method 'given' needs \"scores\" on every row");
              return *ex.given_scores;
            }};
  }
  std::string valid;
  for (const auto& n : builtin_method_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw UsageError("unknown method '" + name + "' (valid: " + valid + ")");
}

nlohmann::json report_to_json(const FaithfulnessReport& report) {
  using nlohmann::json;
  json methods = json::array();
  for (const auto& m : report.methods) {
    json acc = json::array();
    for (const auto& a : m.accuracy) acc.push_back(a ? json(*a) : json(nullptr));
    methods.push_back({{"method", m.method},
                       {"aopc_per_K", m.aopc},
                       {"accuracy_per_K", acc},
                       {"mean_aopc", m.mean_aopc},
                       {"mean_accuracy", m.mean_accuracy ? json(*m.mean_accuracy) : json(nullptr)}});
  }
  return {{"ratios", report.ratios},
          {"direction", std::string(direction_name(report.direction))},
          {"include_zero_in_mean", report.include_zero_in_mean},
          {"num_examples", report.num_examples},
          {"methods", methods}};
}

void write_report_csv(const FaithfulnessReport& report, std::ostream& out) {
  out << "method,K,aopc,accuracy\n";
  for (const auto& m : report.methods) {
    for (std::size_t r = 0; r < report.ratios.size(); ++r) {
      out << m.method << ',' << nlohmann::json(report.ratios[r]).dump() << ','
          << nlohmann::json(m.aopc[r]).dump() << ',';
      if (m.accuracy[r]) out << nlohmann::json(*m.accuracy[r]).dump();
      out << '\n';
    }
  }
}

std::vector<LabeledExample> read_dataset(std::istream& in, const ModelConfig& config,
                                         const TextEncoder& encoder) {
  std::vector<LabeledExample> data;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) {
      continue;
    }
    const std::string where = "dataset line " + std::to_string(line_no) + ": ";
    nlohmann::json row;
    try {
      row = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DatasetError(where + "invalid JSON (" + e.what() + ")");
    }
    if (!row.is_object()) throw DatasetError(where + "expected a JSON object");
    LabeledExample ex;
    try {
      if (row.contains("ids")) {
        ex.tokens.ids = row["ids"].get<std::vector<std::uint32_t>>();
        if (row.contains("pair_boundary")) {
          ex.tokens.pair_boundary = row["pair_boundary"].get<std::size_t>();
        }
      } else if (row.contains("text")) {
        if (!encoder) throw DatasetError(where + "text rows need a vocabulary");
        std::optional<std::string> pair;
        if (row.contains("text_pair") && !row["text_pair"].is_null()) {
          pair = row["text_pair"].get<std::string>();
        }
        ex.tokens = encoder(row["text"].get<std::string>(), pair);
      } else {
        throw DatasetError(where + "needs \"ids\" or \"text\"");
      }
      if (row.contains("scores")) {
        ex.given_scores = row["scores"].get<std::vector<float>>();
        if (ex.given_scores->size() != ex.tokens.size()) {
          throw DatasetError(where + "\"scores\" needs one value per token");
        }
      }
      if (row.contains("label") && !row["label"].is_null()) {
        ex.gold_label = row["label"].get<std::size_t>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw DatasetError(where + e.what());
    } catch (const UsageError& e) {
      throw DatasetError(where + e.what());
    }
    try {
      check_tokens(config, ex.tokens);
    } catch (const ValidationError& e) {
      throw DatasetError(where + e.what());
    }
    if (ex.gold_label && *ex.gold_label >= config.num_classes) {
      throw DatasetError(where + "label " + std::to_string(*ex.gold_label) + " >= num_classes");
    }
    data.push_back(std::move(ex));
  }
  if (data.empty()) throw DatasetError("dataset is empty");
  return data;
}

}  // namespace decompx
