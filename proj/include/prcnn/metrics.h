#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "prcnn/roi_ops.h"

namespace prcnn {

// Row-major 2-D label grid. 0 is background, 255 is ignore.
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<int> labels;

  int at(int y, int x) const {
    return labels[static_cast<std::size_t>(y) * width + x];
  }
  int& at(int y, int x) {
    return labels[static_cast<std::size_t>(y) * width + x];
  }
};

struct DensePosePoint {
  int part_index = 0;
  double u = 0.0;
  double v = 0.0;
  int x = 0;
  int y = 0;
};

// One person instance. `labels` is anchored at (floor(box.x1), floor(box.y1))
// in the image frame; cells map one-to-one onto image pixels.
struct InstanceParsing {
  LabelMap labels;
  double score = 1.0;
  Box box;
  std::vector<DensePosePoint> points;
};

// Throws std::invalid_argument on labels outside [0, num_classes) u {255}.
void validate_labels(const LabelMap& map, int num_classes);

// Instances claim pixels in descending score order; the first non-background
// label to cover a pixel wins. Parts outside the image are clipped.
LabelMap paste_multi_person(const std::vector<InstanceParsing>& instances,
                            int image_w, int image_h);

struct MiouResult {
  std::vector<double> per_class_iou;  // NaN for classes with empty union
  double mean = 0.0;
};

// Pixels where either map is 255 are excluded.
MiouResult miou(const LabelMap& pred, const LabelMap& gt, int num_classes);
// Dataset-level mIoU: intersections and unions are pooled over all image
// pairs before the per-class ratios are taken.
MiouResult miou(std::span<const LabelMap> preds, std::span<const LabelMap> gts,
                int num_classes);

// Intersection / union pixel counts for one class.
struct PartCounts {
  std::int64_t intersection = 0;
  std::int64_t uni = 0;
  std::int64_t gt_pixels = 0;
  std::int64_t pred_pixels = 0;
};

// Per-part counts for parts 1..num_classes-1 in the shared image frame.
// Index 0 of the result is unused.
std::vector<PartCounts> part_counts(const InstanceParsing& pred,
                                    const InstanceParsing& gt, int num_classes);

// Mean part IoU over parts present in either instance; 0 if neither has any.
double app_score(const InstanceParsing& pred, const InstanceParsing& gt,
                 int num_classes);

// Predictions and ground truth of one image.
struct EvalImage {
  std::vector<InstanceParsing> preds;
  std::vector<InstanceParsing> gts;
};

// Match quality matrix [pred][gt] for one image.
using QualityMatrix = std::vector<std::vector<double>>;

struct MatchResult {
  // Per prediction, in input order: index of the matched GT or -1.
  std::vector<int> pred_to_gt;
};

// Predictions are visited by descending score (ties by input order); each
// takes the unmatched GT of highest quality (ties by lower index) when that
// quality is >= threshold.
MatchResult greedy_match(const std::vector<double>& scores,
                         const QualityMatrix& quality, double threshold);

// COCO 101-point interpolated AP given per-prediction (score, is_tp) pooled
// over images and the total GT count. Both-empty is 1, no GT is 0.
double interpolated_ap(std::vector<std::pair<double, bool>> detections,
                       std::int64_t num_gt);

// Thresholds 0.1, 0.2, ..., 0.9.
std::vector<double> app_vol_thresholds();

double ap_p(const std::vector<EvalImage>& images, int num_classes,
            double threshold);
double ap_p_vol(const std::vector<EvalImage>& images, int num_classes);
// Single-image conveniences.
double ap_p(const std::vector<InstanceParsing>& preds,
            const std::vector<InstanceParsing>& gts, int num_classes,
            double threshold);
double ap_p_vol(const std::vector<InstanceParsing>& preds,
                const std::vector<InstanceParsing>& gts, int num_classes);

enum class PcpMode { kGlobalPool, kPerInstanceMean };

// Parts correctly parsed (IoU > 0.5) after greedy matching at app 0.5.
double pcp50(const std::vector<EvalImage>& images, int num_classes,
             PcpMode mode = PcpMode::kGlobalPool);
double pcp50(const std::vector<InstanceParsing>& preds,
             const std::vector<InstanceParsing>& gts, int num_classes,
             PcpMode mode = PcpMode::kGlobalPool);

// ---------------------------------------------------------------------------
// Dense pose

// Geodesic distances between quantized surface points. Vertex id of
// (part, u, v) is (part - 1) * grid^2 + round(u*(grid-1)) * grid +
// round(v*(grid-1)), parts numbered 1..parts.
struct GeodesicTable {
  int parts = 0;
  int grid = 0;
  std::vector<double> distances;  // vertices x vertices, row-major

  int vertex_count() const { return parts * grid * grid; }
  int vertex_of(const DensePosePoint& p) const;
  double distance(const DensePosePoint& a, const DensePosePoint& b) const;
};

struct GPSConfig {
  enum class Source { kEuclideanUV, kLookupTable };
  double kappa = 0.255;
  Source source = Source::kEuclideanUV;
  GeodesicTable table;  // used when source == kLookupTable
};

void validate_gps_config(const GPSConfig& cfg);

// Surface distance between two points; points on different parts are
// infinitely far apart under the Euclidean-UV source.
double surface_distance(const DensePosePoint& a, const DensePosePoint& b,
                        const GPSConfig& cfg);

// Mean of exp(-d^2 / (2 kappa^2)) over index-paired points.
double gps(const std::vector<DensePosePoint>& pred_points,
           const std::vector<DensePosePoint>& gt_points, const GPSConfig& cfg);

// GPS of a predicted instance against a GT instance: each GT point is paired
// with the prediction's point at the same pixel; missing pixels score 0.
double instance_gps(const InstanceParsing& pred, const InstanceParsing& gt,
                    const GPSConfig& cfg);

struct DensePoseAP {
  double ap = 0.0;
  double ap50 = 0.0;
  double ap75 = 0.0;
};

// Thresholds 0.50, 0.55, ..., 0.95.
std::vector<double> gps_thresholds();

DensePoseAP densepose_ap(const std::vector<EvalImage>& images,
                         const GPSConfig& cfg);
DensePoseAP densepose_ap(const std::vector<InstanceParsing>& preds,
                         const std::vector<InstanceParsing>& gts,
                         const GPSConfig& cfg);

}  // namespace prcnn
