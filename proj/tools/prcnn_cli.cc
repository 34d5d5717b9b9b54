// prcnn: batch front end for the parsing-branch kernels and metrics.
//
//   prcnn <command> [--config file.json] [--seed N] [--threads N] [--out report.json] ...
//
// Command options overlay the matching config keys. Exit codes: 0 success,
// 1 tolerance or assertion failure, 2 usage or format error.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "prcnn/cli/commands.h"
#include "prcnn/cli/formats.h"
#include "prcnn/parallel.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Overlay {
  std::optional<std::string> pred, gt, distance_source, blob_out, blob_variant,
      pcp_mode, measure;
  std::optional<int> num_classes, batch, repeats, warmup, roi_resolution;
  std::optional<double> tolerance, kappa;
  std::vector<std::string> targets, variants;
  std::vector<int> resolutions;
  std::vector<double> grid;
};

std::string absolute(const std::string& p) { return fs::absolute(p).string(); }

void apply_overlay(json& cfg, const Overlay& o) {
  if (o.pred) cfg["pred_file"] = absolute(*o.pred);
  if (o.gt) cfg["gt_file"] = absolute(*o.gt);
  if (o.distance_source) {
    cfg["distance_source"] =
        *o.distance_source == "euclidean-uv" ? *o.distance_source : absolute(*o.distance_source);
  }
  if (o.blob_out) cfg["blob_out"] = absolute(*o.blob_out);
  if (o.blob_variant) cfg["blob_variant"] = *o.blob_variant;
  if (o.pcp_mode) cfg["pcp_mode"] = *o.pcp_mode;
  if (o.measure) cfg["measure"] = *o.measure;
  if (o.num_classes) cfg["num_classes"] = *o.num_classes;
  if (o.batch) cfg["batch"] = *o.batch;
  if (o.repeats) cfg["repeats"] = *o.repeats;
  if (o.warmup) cfg["warmup"] = *o.warmup;
  if (o.roi_resolution) cfg["roi_resolution"] = *o.roi_resolution;
  if (o.tolerance) cfg["tolerance"] = *o.tolerance;
  if (o.kappa) cfg["kappa"] = *o.kappa;
  if (!o.targets.empty()) cfg["targets"] = o.targets;
  if (!o.variants.empty()) cfg["variants"] = o.variants;
  if (!o.resolutions.empty()) cfg["resolutions"] = o.resolutions;
  if (!o.grid.empty()) cfg["grid"] = o.grid;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parsing-branch kernels, gradient checks and human-parsing metrics"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::string out_path;
  Overlay o;

  const auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "seed recorded in the report header");
    sub->add_option("--threads", threads, "worker threads (default: all cores)")
        ->check(CLI::PositiveNumber);
    sub->add_option("--out", out_path, "write the report here instead of stdout");
  };

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  common(gradcheck);
  gradcheck->add_option("--target", o.targets, "op or branch:<Variant> (repeatable)");
  gradcheck->add_option("--tolerance", o.tolerance, "max relative error for every target");

  auto* eval_parsing = app.add_subcommand("eval-parsing", "mIoU, AP^p and PCP");
  common(eval_parsing);
  eval_parsing->add_option("--pred", o.pred, "prediction annotation file");
  eval_parsing->add_option("--gt", o.gt, "ground-truth annotation file");
  eval_parsing->add_option("--num-classes", o.num_classes, "classes including background");
  eval_parsing->add_option("--pcp-mode", o.pcp_mode, "global | per-instance");

  auto* eval_densepose = app.add_subcommand("eval-densepose", "GPS-based AP");
  common(eval_densepose);
  eval_densepose->add_option("--pred", o.pred, "prediction annotation file");
  eval_densepose->add_option("--gt", o.gt, "ground-truth annotation file");
  eval_densepose->add_option("--kappa", o.kappa, "GPS kernel width");
  eval_densepose->add_option("--distance-source", o.distance_source,
                             "euclidean-uv or a geodesic table file");

  auto* bench = app.add_subcommand("bench", "time branch forward passes");
  common(bench);
  bench->add_option("--variant", o.variants, "branch variant (repeatable)");
  bench->add_option("--resolution", o.resolutions, "RoI resolution (repeatable)");
  bench->add_option("--batch", o.batch, "RoIs per forward");
  bench->add_option("--repeats", o.repeats, "timed runs (>= 3)");
  bench->add_option("--warmup", o.warmup, "discarded runs");

  auto* params = app.add_subcommand("params", "parameter counts per variant");
  common(params);
  params->add_option("--variant", o.variants, "branch variant (repeatable)");
  params->add_option("--num-classes", o.num_classes, "classes including background");
  params->add_option("--blob-out", o.blob_out, "save initialized parameters here");
  params->add_option("--blob-variant", o.blob_variant, "variant saved with --blob-out");

  auto* scale = app.add_subcommand("scale-cdf", "CDF of instance relative scale");
  common(scale);
  scale->add_option("--gt", o.gt, "annotation file");
  scale->add_option("--grid", o.grid, "strictly increasing scale grid");
  scale->add_option("--measure", o.measure, "area | sqrt-area");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? prcnn::cli::kExitOk : prcnn::cli::kExitUsage;
  }

  const CLI::App* sub = app.get_subcommands().front();
  try {
    json cfg = json::object();
    fs::path base_dir = fs::current_path();
    if (!config_path.empty()) {
      cfg = prcnn::cli::read_json_file(config_path);
      base_dir = fs::absolute(config_path).parent_path();
    }
    apply_overlay(cfg, o);
    if (seed) cfg["seed"] = *seed;
    if (!threads && cfg.is_object() && cfg.contains("threads") &&
        cfg["threads"].is_number_integer()) {
      threads = cfg["threads"].get<int>();
    }
    prcnn::set_num_threads(threads ? *threads : prcnn::hardware_threads());

    const auto outcome = prcnn::cli::run_command(sub->get_name(), cfg, base_dir);
    const std::string text = outcome.report.dump(2) + "\n";
    if (out_path.empty()) {
      std::cout << text;
    } else {
      std::ofstream f(out_path, std::ios::binary);
      if (!f || !(f << text)) {
        std::cerr << "error: cannot write " << out_path << "\n";
        return prcnn::cli::kExitUsage;
      }
    }
    return outcome.exit_code;
  } catch (const prcnn::cli::FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return prcnn::cli::kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return prcnn::cli::kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return prcnn::cli::kExitFailure;
  }
}
