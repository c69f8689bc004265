#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "decompx/encoder.hpp"
#include "decompx/model.hpp"

namespace decompx {

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Direction { MostFirst, LeastFirst };

std::string_view direction_name(Direction d);
Direction parse_direction(std::string_view name);

struct LabeledExample {
  TokenSequence tokens;
  std::optional<std::size_t> gold_label;  // unlabeled rows are skipped by accuracy
  std::optional<std::vector<float>> given_scores;  // precomputed attributions, if supplied
};

/// Per-token importance for `predicted_class`; higher means more important.
using Scorer = std::function<std::vector<float>(const Model&, const LabeledExample&,
                                                std::size_t predicted_class)>;

struct Method {
  std::string name;
  Scorer scorer;
};

struct MethodCurve {
  std::string method;
  std::vector<double> aopc;                     // one per ratio
  std::vector<std::optional<double>> accuracy;  // empty optionals when nothing is labeled
  double mean_aopc = 0.0;
  std::optional<double> mean_accuracy;
};

struct FaithfulnessReport {
  std::vector<double> ratios;  // percents
  Direction direction = Direction::MostFirst;
  bool include_zero_in_mean = false;
  std::size_t num_examples = 0;
  std::vector<MethodCurve> methods;
};

struct EvaluationOptions {
  /// Worker threads for per-example work; results are reduced in input order.
  std::size_t threads = 1;
  bool include_zero_in_mean = false;
};

/// Number of maskable tokens replaced at ratio `percent`: round half up,
/// at least one when percent > 0 and anything is maskable.
std::size_t mask_count(double percent, std::size_t maskable);

/// Replaces the top (MostFirst) or bottom (LeastFirst) `percent`% of maskable
/// tokens by score with [MASK]. [CLS]/[SEP] are never touched; equal scores
/// go to the lower index first.
TokenSequence mask_tokens(const TokenSequence& tokens, std::span<const float> scores,
                          double percent, Direction direction, const SpecialTokens& special);

FaithfulnessReport aopc_curve(const Model& model, const std::vector<LabeledExample>& data,
                              const Method& method, const std::vector<double>& ratios,
                              Direction direction, const EvaluationOptions& options = {});

FaithfulnessReport compare_methods(const Model& model, const std::vector<LabeledExample>& data,
                                   const std::vector<Method>& methods,
                                   const std::vector<double>& ratios, Direction direction,
                                   const EvaluationOptions& options = {});

/// Names accepted by make_method, in display order.
const std::vector<std::string>& builtin_method_names();
/// decompx, decompx-nobias, decompx-norm, rollout, gradxinput, ig, random,
/// given (reads LabeledExample::given_scores).
Method make_method(const std::string& name);

nlohmann::json report_to_json(const FaithfulnessReport& report);
/// Rows of method,K,aopc,accuracy with a header line.
void write_report_csv(const FaithfulnessReport& report, std::ostream& out);

/// Turns text (and an optional pair) into token ids.
using TextEncoder =
    std::function<TokenSequence(const std::string& text, const std::optional<std::string>& pair)>;

/// JSON-lines: {"ids":[...]} or {"text":..., "text_pair":..., "label":n} per
/// line, optionally with "scores":[...] for the "given" method. Blank lines
/// are skipped. Throws DatasetError naming the line.
std::vector<LabeledExample> read_dataset(std::istream& in, const ModelConfig& config,
                                         const TextEncoder& encoder);

}  // namespace decompx
