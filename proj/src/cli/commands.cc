#include "prcnn/cli/commands.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>

#include "prcnn/cli/formats.h"
#include "prcnn/cli/gradcheck_suite.h"
#include "prcnn/parallel.h"

namespace prcnn::cli {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

void reject_unknown(const json& j, std::initializer_list<const char*> keys,
                    const std::string& where) {
  if (!j.is_object()) throw FormatError(where + ": config must be a JSON object");
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items()) {
    if (k != "threads" && !allowed.contains(k)) {
      throw FormatError(where + ": unknown config key '" + k + "'");
    }
  }
  if (j.contains("threads") &&
      (!j["threads"].is_number_integer() || j["threads"].get<int>() < 1)) {
    throw FormatError(where + ": 'threads' must be a positive integer");
  }
}

std::uint64_t seed_of(const json& j) {
  if (!j.contains("seed")) return 0;
  if (!j["seed"].is_number_unsigned()) {
    throw FormatError("'seed' must be a non-negative integer");
  }
  return j["seed"].get<std::uint64_t>();
}

int int_field(const json& j, const char* key, int fallback, int min_value) {
  if (!j.contains(key)) return fallback;
  const json& v = j[key];
  if (!v.is_number_integer() || v.get<std::int64_t>() < min_value ||
      v.get<std::int64_t>() > std::numeric_limits<int>::max()) {
    throw FormatError(std::string("'") + key + "' must be an integer >= " +
                      std::to_string(min_value));
  }
  return v.get<int>();
}

double positive_number(const json& v, const char* key) {
  if (!v.is_number() || !std::isfinite(v.get<double>()) || v.get<double>() <= 0.0) {
    throw FormatError(std::string("'") + key + "' must be a positive number");
  }
  return v.get<double>();
}

fs::path path_field(const json& j, const char* key, const fs::path& base_dir,
                    bool required) {
  if (!j.contains(key)) {
    if (required) throw FormatError(std::string("missing '") + key + "'");
    return {};
  }
  if (!j[key].is_string() || j[key].get<std::string>().empty()) {
    throw FormatError(std::string("'") + key + "' must be a non-empty path");
  }
  const fs::path p = j[key].get<std::string>();
  return p.is_absolute() ? p : base_dir / p;
}

BranchVariant variant_of(const json& v) {
  if (!v.is_string()) throw FormatError("variant names must be strings");
  try {
    return parse_variant(v.get<std::string>());
  } catch (const std::invalid_argument& e) {
    throw FormatError(e.what());
  }
}

std::vector<BranchVariant> variants_field(const json& j,
                                          std::vector<BranchVariant> fallback) {
  if (!j.contains("variants")) return fallback;
  if (!j["variants"].is_array() || j["variants"].empty()) {
    throw FormatError("'variants' must be a non-empty array");
  }
  std::vector<BranchVariant> out;
  for (const auto& v : j["variants"]) out.push_back(variant_of(v));
  return out;
}

Report header(std::string_view command, std::uint64_t seed) {
  Report r;
  r["command"] = command;
  r["seed"] = seed;
  return r;
}

// NaN (undefined IoU) serializes as null.
Report number_or_null(double v) {
  return std::isnan(v) ? Report(nullptr) : Report(v);
}

struct LoadedPair {
  std::vector<AnnotatedImage> preds;
  std::vector<AnnotatedImage> gts;
};

// Loads both files and orders predictions to follow the ground truth.
// Differing image sets are a format error naming the missing ids.
LoadedPair load_matched(const fs::path& pred_file, const fs::path& gt_file) {
  LoadedPair p;
  p.gts = load_annotations(gt_file);
  auto preds = load_annotations(pred_file);
  std::map<std::string, std::size_t> pred_index;
  for (std::size_t i = 0; i < preds.size(); ++i) pred_index[preds[i].id] = i;
  std::set<std::string> gt_ids;
  std::string missing_pred;
  for (const auto& g : p.gts) {
    gt_ids.insert(g.id);
    if (!pred_index.contains(g.id)) missing_pred += (missing_pred.empty() ? "" : ", ") + g.id;
  }
  std::string missing_gt;
  for (const auto& pr : preds) {
    if (!gt_ids.contains(pr.id)) missing_gt += (missing_gt.empty() ? "" : ", ") + pr.id;
  }
  if (!missing_pred.empty() || !missing_gt.empty()) {
    std::string msg = "image sets differ";
    if (!missing_pred.empty()) msg += "; missing from predictions: " + missing_pred;
    if (!missing_gt.empty()) msg += "; missing from ground truth: " + missing_gt;
    throw FormatError(msg);
  }
  for (const auto& g : p.gts) {
    AnnotatedImage& pr = preds[pred_index[g.id]];
    if (pr.width != g.width || pr.height != g.height) {
      throw FormatError("image '" + g.id + "' has different sizes in the two files");
    }
    p.preds.push_back(std::move(pr));
  }
  return p;
}

bool has_gt_parts(const std::vector<InstanceParsing>& gts) {
  for (const auto& g : gts) {
    for (int v : g.labels.labels) {
      if (v != 0 && v != kIgnoreLabel) return true;
    }
  }
  return false;
}

std::vector<EvalImage> to_eval_images(const LoadedPair& data) {
  std::vector<EvalImage> images;
  for (std::size_t i = 0; i < data.gts.size(); ++i) {
    images.push_back({data.preds[i].instances, data.gts[i].instances});
  }
  return images;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config parsing

GradcheckCommandConfig parse_gradcheck_config(const json& j) {
  reject_unknown(j, {"targets", "tolerance", "seed"}, "gradcheck");
  GradcheckCommandConfig cfg;
  cfg.seed = seed_of(j);
  if (j.contains("targets")) {
    if (!j["targets"].is_array()) throw FormatError("'targets' must be an array");
    for (const auto& t : j["targets"]) {
      if (!t.is_string()) throw FormatError("target names must be strings");
      const auto name = t.get<std::string>();
      if (!is_gradcheck_target(name)) {
        throw FormatError("unknown gradcheck target '" + name + "'");
      }
      cfg.targets.push_back(name);
    }
  }
  if (j.contains("tolerance")) cfg.tolerance = positive_number(j["tolerance"], "tolerance");
  return cfg;
}

EvalParsingConfig parse_eval_parsing_config(const json& j, const fs::path& base_dir) {
  reject_unknown(j, {"pred_file", "gt_file", "num_classes", "pcp_mode", "seed"},
                 "eval-parsing");
  EvalParsingConfig cfg;
  cfg.seed = seed_of(j);
  cfg.pred_file = path_field(j, "pred_file", base_dir, true);
  cfg.gt_file = path_field(j, "gt_file", base_dir, true);
  cfg.num_classes = int_field(j, "num_classes", cfg.num_classes, 2);
  if (cfg.num_classes > kIgnoreLabel) throw FormatError("'num_classes' must be <= 255");
  if (j.contains("pcp_mode")) {
    const json& m = j["pcp_mode"];
    if (m == "global") {
      cfg.pcp_mode = PcpMode::kGlobalPool;
    } else if (m == "per-instance") {
      cfg.pcp_mode = PcpMode::kPerInstanceMean;
    } else {
      throw FormatError("'pcp_mode' must be \"global\" or \"per-instance\"");
    }
  }
  return cfg;
}

EvalDenseposeConfig parse_eval_densepose_config(const json& j,
                                                const fs::path& base_dir) {
  reject_unknown(j, {"pred_file", "gt_file", "kappa", "distance_source", "seed"},
                 "eval-densepose");
  EvalDenseposeConfig cfg;
  cfg.seed = seed_of(j);
  cfg.pred_file = path_field(j, "pred_file", base_dir, true);
  cfg.gt_file = path_field(j, "gt_file", base_dir, true);
  if (j.contains("kappa")) cfg.kappa = positive_number(j["kappa"], "kappa");
  if (j.contains("distance_source")) {
    if (!j["distance_source"].is_string()) {
      throw FormatError("'distance_source' must be \"euclidean-uv\" or a table path");
    }
    if (j["distance_source"] != "euclidean-uv") {
      cfg.distance_source = path_field(j, "distance_source", base_dir, true).string();
    }
  }
  return cfg;
}

BenchConfig parse_bench_config(const json& j) {
  reject_unknown(j,
                 {"variants", "resolutions", "batch", "repeats", "warmup",
                  "num_classes", "seed"},
                 "bench");
  BenchConfig cfg;
  cfg.seed = seed_of(j);
  cfg.variants = variants_field(j, cfg.variants);
  if (j.contains("resolutions")) {
    if (!j["resolutions"].is_array() || j["resolutions"].empty()) {
      throw FormatError("'resolutions' must be a non-empty array");
    }
    cfg.resolutions.clear();
    for (const auto& r : j["resolutions"]) {
      if (r != 14 && r != 32 && r != 64) {
        throw FormatError("resolutions must be 14, 32 or 64");
      }
      cfg.resolutions.push_back(r.get<int>());
    }
  }
  cfg.batch = int_field(j, "batch", cfg.batch, 1);
  cfg.repeats = int_field(j, "repeats", cfg.repeats, 3);
  cfg.warmup = int_field(j, "warmup", cfg.warmup, 0);
  cfg.num_classes = int_field(j, "num_classes", cfg.num_classes, 2);
  return cfg;
}

ParamsConfig parse_params_config(const json& j, const fs::path& base_dir) {
  reject_unknown(j,
                 {"variants", "num_classes", "roi_resolution", "blob_out",
                  "blob_variant", "seed"},
                 "params");
  ParamsConfig cfg;
  cfg.seed = seed_of(j);
  cfg.variants = variants_field(j, cfg.variants);
  cfg.num_classes = int_field(j, "num_classes", cfg.num_classes, 2);
  cfg.roi_resolution = int_field(j, "roi_resolution", cfg.roi_resolution, 1);
  if (cfg.roi_resolution != 14 && cfg.roi_resolution != 32 && cfg.roi_resolution != 64) {
    throw FormatError("'roi_resolution' must be 14, 32 or 64");
  }
  cfg.blob_out = path_field(j, "blob_out", base_dir, false);
  if (j.contains("blob_variant")) cfg.blob_variant = variant_of(j["blob_variant"]);
  return cfg;
}

ScaleCdfConfig parse_scale_cdf_config(const json& j, const fs::path& base_dir) {
  reject_unknown(j, {"gt_file", "grid", "measure", "seed"}, "scale-cdf");
  ScaleCdfConfig cfg;
  cfg.seed = seed_of(j);
  cfg.gt_file = path_field(j, "gt_file", base_dir, true);
  if (!j.contains("grid") || !j["grid"].is_array() || j["grid"].empty()) {
    throw FormatError("'grid' must be a non-empty array of numbers");
  }
  for (const auto& g : j["grid"]) {
    if (!g.is_number() || !std::isfinite(g.get<double>())) {
      throw FormatError("'grid' entries must be finite numbers");
    }
    const double v = g.get<double>();
    if (!cfg.grid.empty() && v <= cfg.grid.back()) {
      throw FormatError("'grid' must be strictly increasing");
    }
    cfg.grid.push_back(v);
  }
  if (j.contains("measure")) {
    if (j["measure"] == "area") {
      cfg.measure = ScaleMeasure::kAreaRatio;
    } else if (j["measure"] == "sqrt-area") {
      cfg.measure = ScaleMeasure::kSqrtAreaRatio;
    } else {
      throw FormatError("'measure' must be \"area\" or \"sqrt-area\"");
    }
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Commands

CommandOutcome cmd_gradcheck(const GradcheckCommandConfig& cfg) {
  std::vector<GradcheckTarget> targets;
  for (const auto& t : gradcheck_targets()) {
    if (cfg.targets.empty() ||
        std::find(cfg.targets.begin(), cfg.targets.end(), t.name) != cfg.targets.end()) {
      targets.push_back(t);
    }
  }
  for (const auto& name : cfg.targets) {
    if (!is_gradcheck_target(name)) {
      throw FormatError("unknown gradcheck target '" + name + "'");
    }
  }

  CommandOutcome out{kExitOk, header("gradcheck", cfg.seed)};
  Report rows = Report::array();
  bool all_passed = true;
  for (const auto& t : targets) {
    const double tol = cfg.tolerance.value_or(default_tolerance(t));
    const GradcheckResult r = run_gradcheck_target(t.name, cfg.seed);
    const bool passed = r.max_relative_error < tol;
    all_passed = all_passed && passed;
    Report row;
    row["target"] = t.name;
    row["kind"] = t.elementary ? "elementary" : "composite";
    row["tolerance"] = tol;
    row["max_relative_error"] = r.max_relative_error;
    row["worst_probe"] = r.worst_probe;
    row["worst_index"] = r.worst_index;
    row["entries_checked"] = r.entries_checked;
    row["entries_skipped_at_kinks"] = r.entries_skipped;
    row["passed"] = passed;
    rows.push_back(std::move(row));
  }
  out.report["targets"] = std::move(rows);
  out.report["all_passed"] = all_passed;
  out.exit_code = all_passed ? kExitOk : kExitFailure;
  return out;
}

CommandOutcome cmd_eval_parsing(const EvalParsingConfig& cfg) {
  const LoadedPair data = load_matched(cfg.pred_file, cfg.gt_file);
  const int n = static_cast<int>(data.gts.size());
  for (int i = 0; i < n; ++i) {
    for (const auto* set : {&data.preds[i].instances, &data.gts[i].instances}) {
      for (const auto& inst : *set) {
        if (inst.labels.labels.empty()) continue;  // no map, or cropped away
        try {
          validate_labels(inst.labels, cfg.num_classes);
        } catch (const std::invalid_argument& e) {
          throw FormatError("image '" + data.gts[i].id + "': " + e.what());
        }
      }
    }
  }

  struct PerImage {
    LabelMap pred_map;
    LabelMap gt_map;
    double miou = 0.0;
    double ap50 = 0.0;
    double ap_vol = 0.0;
    std::optional<double> pcp;
  };
  std::vector<PerImage> per(n);
  parallel_for(n, [&](int i) {
    const auto& p = data.preds[i];
    const auto& g = data.gts[i];
    PerImage& r = per[i];
    r.pred_map = paste_multi_person(p.instances, p.width, p.height);
    r.gt_map = paste_multi_person(g.instances, g.width, g.height);
    r.miou = miou(r.pred_map, r.gt_map, cfg.num_classes).mean;
    r.ap50 = ap_p(p.instances, g.instances, cfg.num_classes, 0.5);
    r.ap_vol = ap_p_vol(p.instances, g.instances, cfg.num_classes);
    if (has_gt_parts(g.instances)) {
      r.pcp = pcp50(p.instances, g.instances, cfg.num_classes, cfg.pcp_mode);
    }
  });

  std::vector<LabelMap> pred_maps;
  std::vector<LabelMap> gt_maps;
  for (auto& r : per) {
    pred_maps.push_back(std::move(r.pred_map));
    gt_maps.push_back(std::move(r.gt_map));
  }
  const MiouResult pooled = miou(pred_maps, gt_maps, cfg.num_classes);
  const std::vector<EvalImage> images = to_eval_images(data);
  bool any_gt_parts = false;
  for (const auto& g : data.gts) any_gt_parts = any_gt_parts || has_gt_parts(g.instances);

  CommandOutcome out{kExitOk, header("eval-parsing", cfg.seed)};
  out.report["num_classes"] = cfg.num_classes;
  out.report["pcp_mode"] =
      cfg.pcp_mode == PcpMode::kGlobalPool ? "global" : "per-instance";
  Report agg;
  agg["images"] = n;
  agg["mIoU"] = pooled.mean;
  agg["AP^p_50"] = ap_p(images, cfg.num_classes, 0.5);
  agg["AP^p_vol"] = ap_p_vol(images, cfg.num_classes);
  agg["PCP_50"] = any_gt_parts ? Report(pcp50(images, cfg.num_classes, cfg.pcp_mode))
                               : Report(nullptr);
  Report per_class = Report::array();
  for (double v : pooled.per_class_iou) per_class.push_back(number_or_null(v));
  agg["per_class_iou"] = std::move(per_class);
  out.report["aggregate"] = std::move(agg);

  Report rows = Report::array();
  for (int i = 0; i < n; ++i) {
    Report row;
    row["id"] = data.gts[i].id;
    row["mIoU"] = per[i].miou;
    row["AP^p_50"] = per[i].ap50;
    row["AP^p_vol"] = per[i].ap_vol;
    row["PCP_50"] = per[i].pcp ? Report(*per[i].pcp) : Report(nullptr);
    rows.push_back(std::move(row));
  }
  out.report["images"] = std::move(rows);
  return out;
}

CommandOutcome cmd_eval_densepose(const EvalDenseposeConfig& cfg) {
  GPSConfig gps_cfg;
  gps_cfg.kappa = cfg.kappa;
  if (cfg.distance_source != "euclidean-uv") {
    gps_cfg.source = GPSConfig::Source::kLookupTable;
    gps_cfg.table = load_geodesic_table(cfg.distance_source);
  }
  try {
    validate_gps_config(gps_cfg);
  } catch (const std::invalid_argument& e) {
    throw FormatError(e.what());
  }
  const LoadedPair data = load_matched(cfg.pred_file, cfg.gt_file);
  const int n = static_cast<int>(data.gts.size());
  std::vector<DensePoseAP> per(n);
  parallel_for(n, [&](int i) {
    per[i] = densepose_ap(data.preds[i].instances, data.gts[i].instances, gps_cfg);
  });
  const DensePoseAP total = densepose_ap(to_eval_images(data), gps_cfg);

  CommandOutcome out{kExitOk, header("eval-densepose", cfg.seed)};
  out.report["kappa"] = cfg.kappa;
  out.report["distance_source"] =
      gps_cfg.source == GPSConfig::Source::kEuclideanUV ? "euclidean-uv" : "table";
  Report agg;
  agg["images"] = n;
  agg["AP"] = total.ap;
  agg["AP50"] = total.ap50;
  agg["AP75"] = total.ap75;
  out.report["aggregate"] = std::move(agg);
  Report rows = Report::array();
  for (int i = 0; i < n; ++i) {
    Report row;
    row["id"] = data.gts[i].id;
    row["AP"] = per[i].ap;
    row["AP50"] = per[i].ap50;
    row["AP75"] = per[i].ap75;
    rows.push_back(std::move(row));
  }
  out.report["images"] = std::move(rows);
  return out;
}

CommandOutcome cmd_bench(const BenchConfig& cfg) {
  CommandOutcome out{kExitOk, header("bench", cfg.seed)};
  out.report["batch"] = cfg.batch;
  out.report["repeats"] = cfg.repeats;
  out.report["warmup"] = cfg.warmup;
  Report rows = Report::array();
  for (BranchVariant v : cfg.variants) {
    Report row;
    row["variant"] = variant_name(v);
    std::map<int, double> means;
    Report by_res = Report::array();
    for (int r : cfg.resolutions) {
      BranchConfig bc;
      bc.variant = v;
      bc.roi_resolution = r;
      bc.num_classes = cfg.num_classes;
      const BenchStats s = bench_forward(bc, cfg.batch, cfg.repeats, cfg.warmup, cfg.seed);
      means[r] = s.mean_ms;
      Report e;
      e["roi_resolution"] = r;
      e["samples_ms"] = s.samples_ms;
      e["mean_ms"] = s.mean_ms;
      e["p50_ms"] = s.p50_ms;
      e["p95_ms"] = s.p95_ms;
      by_res.push_back(std::move(e));
    }
    row["timings"] = std::move(by_res);
    if (means.contains(14) && means.contains(32)) {
      const double ratio = means[32] / means[14];
      row["ratio_32_over_14"] = ratio;
      row["slower_at_32"] = ratio > 1.0;
    }
    rows.push_back(std::move(row));
  }
  out.report["variants"] = std::move(rows);
  out.report["reference"] =
      "Going from 14x14 to 32x32 RoIs is reported to cost about 12% of whole-"
      "detector speed on GPU. This ratio times the parsing branch alone on CPU, "
      "so the two numbers are not directly comparable.";
  return out;
}

CommandOutcome cmd_params(const ParamsConfig& cfg) {
  CommandOutcome out{kExitOk, header("params", cfg.seed)};
  out.report["num_classes"] = cfg.num_classes;
  out.report["roi_resolution"] = cfg.roi_resolution;
  Report rows = Report::array();
  for (BranchVariant v : cfg.variants) {
    BranchConfig bc;
    bc.variant = v;
    bc.num_classes = cfg.num_classes;
    bc.roi_resolution = cfg.roi_resolution;
    const ParamCounts c = branch_param_count(bc);
    Report row;
    row["variant"] = variant_name(v);
    row["body"] = c.body;
    row["tail"] = c.tail;
    row["total"] = c.total();
    rows.push_back(std::move(row));
  }
  out.report["variants"] = std::move(rows);

  BranchConfig gce_only;
  gce_only.variant = BranchVariant::kGCEOnly;
  gce_only.num_classes = cfg.num_classes;
  BranchConfig baseline = gce_only;
  baseline.variant = BranchVariant::kBaseline8Conv;
  const std::int64_t gce_body = branch_param_count(gce_only).body;
  const std::int64_t baseline_body = branch_param_count(baseline).body;
  Report cmp;
  cmp["gce_body"] = gce_body;
  cmp["baseline8conv_body"] = baseline_body;
  cmp["ratio"] = static_cast<double>(gce_body) / static_cast<double>(baseline_body);
  cmp["verdict"] = gce_body < baseline_body ? "lighter" : "not lighter";
  out.report["comparison"] = std::move(cmp);

  if (!cfg.blob_out.empty()) {
    BranchConfig bc;
    bc.variant = cfg.blob_variant;
    bc.num_classes = cfg.num_classes;
    bc.roi_resolution = cfg.roi_resolution;
    Branch branch = Branch::build(bc, cfg.seed);
    save_param_blob(cfg.blob_out, branch.named_parameters());
    Report blob;
    blob["variant"] = variant_name(cfg.blob_variant);
    blob["tensors"] = branch.named_parameters().size();
    blob["values"] = branch.param_count().total();
    out.report["blob"] = std::move(blob);
  }
  return out;
}

CommandOutcome cmd_scale_cdf(const ScaleCdfConfig& cfg) {
  for (std::size_t i = 1; i < cfg.grid.size(); ++i) {
    if (!(cfg.grid[i] > cfg.grid[i - 1])) {
      throw FormatError("scale-cdf grid must be strictly increasing");
    }
  }
  if (cfg.grid.empty()) throw FormatError("scale-cdf grid is empty");
  std::vector<double> scales;
  for (const auto& img : load_annotations(cfg.gt_file)) {
    for (const auto& inst : img.instances) {
      scales.push_back(relative_scale(inst.box, img.width, img.height, cfg.measure));
    }
  }
  CommandOutcome out{kExitOk, header("scale-cdf", cfg.seed)};
  out.report["measure"] = cfg.measure == ScaleMeasure::kAreaRatio ? "area" : "sqrt-area";
  out.report["instances"] = scales.size();
  Report rows = Report::array();
  for (const auto& [g, f] : scale_cdf(scales, cfg.grid)) rows.push_back({g, f});
  out.report["rows"] = std::move(rows);
  return out;
}

std::vector<std::string> command_names() {
  return {"gradcheck", "eval-parsing", "eval-densepose", "bench", "params", "scale-cdf"};
}

CommandOutcome run_command(std::string_view command, const json& config,
                           const fs::path& base_dir) {
  if (command == "gradcheck") return cmd_gradcheck(parse_gradcheck_config(config));
  if (command == "eval-parsing") {
    return cmd_eval_parsing(parse_eval_parsing_config(config, base_dir));
  }
  if (command == "eval-densepose") {
    return cmd_eval_densepose(parse_eval_densepose_config(config, base_dir));
  }
  if (command == "bench") return cmd_bench(parse_bench_config(config));
  if (command == "params") return cmd_params(parse_params_config(config, base_dir));
  if (command == "scale-cdf") {
    return cmd_scale_cdf(parse_scale_cdf_config(config, base_dir));
  }
  throw FormatError("unknown command '" + std::string(command) + "'");
}

}  // namespace prcnn::cli
