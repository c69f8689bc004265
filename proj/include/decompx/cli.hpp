#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "decompx/decompose.hpp"

namespace decompx {

namespace exit_code {
inline constexpr int kOk = 0;
inline constexpr int kFailed = 1;  // ran, but a check did not pass
inline constexpr int kUsage = 2;
inline constexpr int kModel = 3;
inline constexpr int kTokenize = 4;
inline constexpr int kDataset = 5;
}  // namespace exit_code

/// Entry point shared by the binary and the tests. `args` excludes argv[0].
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// {"tokens","ids","logits","predicted_class","label_names","mode","attributions"}
nlohmann::json explanation_to_json(const Explanation& ex, const std::vector<std::string>& tokens,
                                   const std::vector<std::string>& label_names);

/// Self-contained HTML: one section per requested class, tokens shaded green
/// (positive) or red (negative) with opacity |score| / max|score| in that row.
std::string render_heatmap(const Explanation& ex, const std::vector<std::string>& tokens,
                           const std::vector<std::string>& label_names,
                           const std::vector<std::size_t>& classes);

}  // namespace decompx
