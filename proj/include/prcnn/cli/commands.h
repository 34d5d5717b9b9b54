#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "prcnn/branch.h"
#include "prcnn/metrics.h"
#include "prcnn/roi_ops.h"

namespace prcnn::cli {

using Report = nlohmann::ordered_json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Commands return their report and exit code; invalid input surfaces as
// FormatError (exit 2).
struct CommandOutcome {
  int exit_code = kExitOk;
  Report report;
};

struct GradcheckCommandConfig {
  std::vector<std::string> targets;  // empty runs every target
  // Overrides the per-target default for every target when set.
  std::optional<double> tolerance;
  std::uint64_t seed = 0;
};

struct EvalParsingConfig {
  std::filesystem::path pred_file;
  std::filesystem::path gt_file;
  int num_classes = 20;
  PcpMode pcp_mode = PcpMode::kGlobalPool;
  std::uint64_t seed = 0;
};

struct EvalDenseposeConfig {
  std::filesystem::path pred_file;
  std::filesystem::path gt_file;
  double kappa = 0.255;
  // "euclidean-uv" or the path of a geodesic table file.
  std::string distance_source = "euclidean-uv";
  std::uint64_t seed = 0;
};

struct BenchConfig {
  std::vector<BranchVariant> variants{BranchVariant::kGCEConv4};
  std::vector<int> resolutions{14, 32};
  int batch = 1;
  int repeats = 3;
  int warmup = 1;
  int num_classes = 20;
  std::uint64_t seed = 0;
};

struct ParamsConfig {
  std::vector<BranchVariant> variants = all_variants();
  int num_classes = 20;
  int roi_resolution = 32;
  // When set, the freshly initialized blob_variant branch is saved here.
  std::filesystem::path blob_out;
  BranchVariant blob_variant = BranchVariant::kGCEConv4;
  std::uint64_t seed = 0;
};

struct ScaleCdfConfig {
  std::filesystem::path gt_file;
  std::vector<double> grid;
  ScaleMeasure measure = ScaleMeasure::kAreaRatio;
  std::uint64_t seed = 0;
};

// Config parsers reject unknown keys and invalid values with FormatError.
// Relative paths resolve against `base_dir`. The key "threads" is accepted
// everywhere and ignored here; the caller applies it.
GradcheckCommandConfig parse_gradcheck_config(const nlohmann::json& j);
EvalParsingConfig parse_eval_parsing_config(const nlohmann::json& j,
                                            const std::filesystem::path& base_dir);
EvalDenseposeConfig parse_eval_densepose_config(
    const nlohmann::json& j, const std::filesystem::path& base_dir);
BenchConfig parse_bench_config(const nlohmann::json& j);
ParamsConfig parse_params_config(const nlohmann::json& j,
                                 const std::filesystem::path& base_dir);
ScaleCdfConfig parse_scale_cdf_config(const nlohmann::json& j,
                                      const std::filesystem::path& base_dir);

CommandOutcome cmd_gradcheck(const GradcheckCommandConfig& cfg);
CommandOutcome cmd_eval_parsing(const EvalParsingConfig& cfg);
CommandOutcome cmd_eval_densepose(const EvalDenseposeConfig& cfg);
CommandOutcome cmd_bench(const BenchConfig& cfg);
CommandOutcome cmd_params(const ParamsConfig& cfg);
CommandOutcome cmd_scale_cdf(const ScaleCdfConfig& cfg);

std::vector<std::string> command_names();

// Parses `config` for `command` and runs it. Throws FormatError for an
// unknown command.
CommandOutcome run_command(std::string_view command, const nlohmann::json& config,
                           const std::filesystem::path& base_dir);

}  // namespace prcnn::cli
