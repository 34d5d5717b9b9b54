#include "prcnn/metrics.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>

#include "prcnn/ops.h"

namespace prcnn {

namespace {

struct Placement {
  int ox = 0;
  int oy = 0;
};

Placement placement_of(const InstanceParsing& inst) {
  return {static_cast<int>(std::floor(inst.box.x1)),
          static_cast<int>(std::floor(inst.box.y1))};
}

// Label of `inst` at image pixel (x, y); background outside its grid.
int label_at(const InstanceParsing& inst, const Placement& p, int x, int y) {
  const int r = y - p.oy;
  const int c = x - p.ox;
  if (r < 0 || c < 0 || r >= inst.labels.height || c >= inst.labels.width) {
    return 0;
  }
  return inst.labels.at(r, c);
}

std::vector<std::size_t> order_by_score(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  return order;
}

std::vector<double> scores_of(const std::vector<InstanceParsing>& instances) {
  std::vector<double> s;
  s.reserve(instances.size());
  for (const auto& inst : instances) s.push_back(inst.score);
  return s;
}

void check_map(const LabelMap& map, const char* what) {
  if (map.height < 0 || map.width < 0 ||
      map.labels.size() != static_cast<std::size_t>(map.height) * map.width) {
    throw std::invalid_argument(std::string(what) +
                                ": label payload does not match dimensions");
  }
}

template <typename QualityFn>
QualityMatrix quality_matrix(const EvalImage& image, QualityFn&& fn) {
  QualityMatrix q(image.preds.size(), std::vector<double>(image.gts.size()));
  for (std::size_t p = 0; p < image.preds.size(); ++p) {
    for (std::size_t g = 0; g < image.gts.size(); ++g) {
      q[p][g] = fn(image.preds[p], image.gts[g]);
    }
  }
  return q;
}

// AP at each threshold, with quality matrices computed once per image.
std::vector<double> ap_over_thresholds(const std::vector<EvalImage>& images,
                                       const std::vector<QualityMatrix>& quality,
                                       const std::vector<double>& thresholds) {
  std::int64_t num_gt = 0;
  for (const auto& img : images) num_gt += static_cast<std::int64_t>(img.gts.size());
  std::vector<double> out;
  out.reserve(thresholds.size());
  for (double thr : thresholds) {
    std::vector<std::pair<double, bool>> detections;
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto scores = scores_of(images[i].preds);
      const MatchResult m = greedy_match(scores, quality[i], thr);
      for (std::size_t p : order_by_score(scores)) {
        detections.emplace_back(scores[p], m.pred_to_gt[p] >= 0);
      }
    }
    out.push_back(interpolated_ap(std::move(detections), num_gt));
  }
  return out;
}

}  // namespace

void validate_labels(const LabelMap& map, int num_classes) {
  check_map(map, "validate_labels");
  if (map.height == 0 || map.width == 0) {
    throw std::invalid_argument("label map has zero size");
  }
  for (int v : map.labels) {
    if (v != kIgnoreLabel && (v < 0 || v >= num_classes)) {
      throw std::invalid_argument("label " + std::to_string(v) +
                                  " outside [0, " + std::to_string(num_classes) +
                                  ") and not 255");
    }
  }
}

LabelMap paste_multi_person(const std::vector<InstanceParsing>& instances,
                            int image_w, int image_h) {
  if (image_w < 1 || image_h < 1) {
    throw std::invalid_argument("paste_multi_person: image size must be positive");
  }
  LabelMap out{image_h, image_w,
               std::vector<int>(static_cast<std::size_t>(image_w) * image_h, 0)};
  std::vector<char> claimed(out.labels.size(), 0);
  for (std::size_t idx : order_by_score(scores_of(instances))) {
    const auto& inst = instances[idx];
    check_map(inst.labels, "paste_multi_person");
    const Placement p = placement_of(inst);
    for (int r = 0; r < inst.labels.height; ++r) {
      const int y = p.oy + r;
      if (y < 0 || y >= image_h) continue;
      for (int c = 0; c < inst.labels.width; ++c) {
        const int x = p.ox + c;
        if (x < 0 || x >= image_w) continue;
        const int label = inst.labels.at(r, c);
        const std::size_t k = static_cast<std::size_t>(y) * image_w + x;
        if (label == 0 || claimed[k]) continue;
        out.labels[k] = label;
        claimed[k] = 1;
      }
    }
  }
  return out;
}

namespace {

void accumulate_confusion(const LabelMap& pred, const LabelMap& gt,
                          int num_classes, std::vector<std::int64_t>& inter,
                          std::vector<std::int64_t>& uni) {
  check_map(pred, "miou pred");
  check_map(gt, "miou gt");
  if (pred.height != gt.height || pred.width != gt.width) {
    throw std::invalid_argument(
        "miou: prediction is " + std::to_string(pred.height) + "x" +
        std::to_string(pred.width) + " but ground truth is " +
        std::to_string(gt.height) + "x" + std::to_string(gt.width));
  }
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const int p = pred.labels[i];
    const int g = gt.labels[i];
    if (p == kIgnoreLabel || g == kIgnoreLabel) continue;
    if (p < 0 || p >= num_classes || g < 0 || g >= num_classes) {
      throw std::invalid_argument("miou: label outside [0, num_classes)");
    }
    if (p == g) {
      ++inter[p];
      ++uni[p];
    } else {
      ++uni[p];
      ++uni[g];
    }
  }
}

MiouResult finish_miou(const std::vector<std::int64_t>& inter,
                       const std::vector<std::int64_t>& uni) {
  const int num_classes = static_cast<int>(uni.size());
  MiouResult r;
  r.per_class_iou.assign(num_classes, std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < num_classes; ++c) {
    if (uni[c] == 0) continue;
    r.per_class_iou[c] = static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
    sum += r.per_class_iou[c];
    ++present;
  }
  r.mean = present > 0 ? sum / present : 0.0;
  return r;
}

}  // namespace

MiouResult miou(const LabelMap& pred, const LabelMap& gt, int num_classes) {
  if (num_classes < 1) throw std::invalid_argument("miou: num_classes must be >= 1");
  std::vector<std::int64_t> inter(num_classes, 0);
  std::vector<std::int64_t> uni(num_classes, 0);
  accumulate_confusion(pred, gt, num_classes, inter, uni);
  return finish_miou(inter, uni);
}

MiouResult miou(std::span<const LabelMap> preds, std::span<const LabelMap> gts,
                int num_classes) {
  if (num_classes < 1) throw std::invalid_argument("miou: num_classes must be >= 1");
  if (preds.size() != gts.size()) {
    throw std::invalid_argument("miou: prediction and ground-truth counts differ");
  }
  std::vector<std::int64_t> inter(num_classes, 0);
  std::vector<std::int64_t> uni(num_classes, 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    accumulate_confusion(preds[i], gts[i], num_classes, inter, uni);
  }
  return finish_miou(inter, uni);
}

std::vector<PartCounts> part_counts(const InstanceParsing& pred,
                                    const InstanceParsing& gt,
                                    int num_classes) {
  check_map(pred.labels, "part_counts pred");
  check_map(gt.labels, "part_counts gt");
  std::vector<PartCounts> counts(std::max(num_classes, 1));
  const Placement pp = placement_of(pred);
  const Placement gp = placement_of(gt);
  const int x0 = std::min(pp.ox, gp.ox);
  const int y0 = std::min(pp.oy, gp.oy);
  const int x1 = std::max(pp.ox + pred.labels.width, gp.ox + gt.labels.width);
  const int y1 = std::max(pp.oy + pred.labels.height, gp.oy + gt.labels.height);
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      const int p = label_at(pred, pp, x, y);
      const int g = label_at(gt, gp, x, y);
      if (p == kIgnoreLabel || g == kIgnoreLabel) continue;
      if (p >= num_classes || g >= num_classes || p < 0 || g < 0) {
        throw std::invalid_argument("part_counts: label outside [0, num_classes)");
      }
      if (p > 0) ++counts[p].pred_pixels;
      if (g > 0) ++counts[g].gt_pixels;
      if (p == g) {
        if (p > 0) {
          ++counts[p].intersection;
          ++counts[p].uni;
        }
      } else {
        if (p > 0) ++counts[p].uni;
        if (g > 0) ++counts[g].uni;
      }
    }
  }
  return counts;
}

double app_score(const InstanceParsing& pred, const InstanceParsing& gt,
                 int num_classes) {
  const auto counts = part_counts(pred, gt, num_classes);
  double sum = 0.0;
  int parts = 0;
  for (int c = 1; c < num_classes; ++c) {
    if (counts[c].uni == 0) continue;
    sum += static_cast<double>(counts[c].intersection) /
           static_cast<double>(counts[c].uni);
    ++parts;
  }
  return parts > 0 ? sum / parts : 0.0;
}

MatchResult greedy_match(const std::vector<double>& scores,
                         const QualityMatrix& quality, double threshold) {
  if (quality.size() != scores.size()) {
    throw std::invalid_argument("greedy_match: quality rows != predictions");
  }
  MatchResult m;
  m.pred_to_gt.assign(scores.size(), -1);
  const std::size_t num_gt = quality.empty() ? 0 : quality.front().size();
  std::vector<char> taken(num_gt, 0);
  for (std::size_t p : order_by_score(scores)) {
    if (quality[p].size() != num_gt) {
      throw std::invalid_argument("greedy_match: ragged quality matrix");
    }
    int best = -1;
    for (std::size_t g = 0; g < num_gt; ++g) {
      if (taken[g]) continue;
      if (best < 0 || quality[p][g] > quality[p][best]) best = static_cast<int>(g);
    }
    if (best >= 0 && quality[p][best] >= threshold) {
      taken[best] = 1;
      m.pred_to_gt[p] = best;
    }
  }
  return m;
}

double interpolated_ap(std::vector<std::pair<double, bool>> detections,
                       std::int64_t num_gt) {
  if (num_gt == 0) return detections.empty() ? 1.0 : 0.0;
  std::stable_sort(detections.begin(), detections.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  const std::size_t n = detections.size();
  std::vector<double> recall(n);
  std::vector<double> precision(n);
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (detections[i].second) {
      ++tp;
    } else {
      ++fp;
    }
    recall[i] = static_cast<double>(tp) / static_cast<double>(num_gt);
    precision[i] = static_cast<double>(tp) / static_cast<double>(tp + fp);
  }
  for (std::size_t i = n; i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double sum = 0.0;
  for (int t = 0; t <= 100; ++t) {
    const double r = static_cast<double>(t) / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) sum += precision[it - recall.begin()];
  }
  return sum / 101.0;
}

std::vector<double> app_vol_thresholds() {
  std::vector<double> t;
  for (int i = 1; i <= 9; ++i) t.push_back(static_cast<double>(i) / 10.0);
  return t;
}

namespace {

std::vector<QualityMatrix> app_matrices(const std::vector<EvalImage>& images,
                                        int num_classes) {
  std::vector<QualityMatrix> q;
  q.reserve(images.size());
  for (const auto& img : images) {
    q.push_back(quality_matrix(img, [&](const auto& p, const auto& g) {
      return app_score(p, g, num_classes);
    }));
  }
  return q;
}

}  // namespace

double ap_p(const std::vector<EvalImage>& images, int num_classes,
            double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw std::invalid_argument("ap_p: threshold must be in (0, 1)");
  }
  return ap_over_thresholds(images, app_matrices(images, num_classes),
                            {threshold})
      .front();
}

double ap_p_vol(const std::vector<EvalImage>& images, int num_classes) {
  const auto per = ap_over_thresholds(images, app_matrices(images, num_classes),
                                      app_vol_thresholds());
  return std::accumulate(per.begin(), per.end(), 0.0) / per.size();
}

double ap_p(const std::vector<InstanceParsing>& preds,
            const std::vector<InstanceParsing>& gts, int num_classes,
            double threshold) {
  return ap_p(std::vector<EvalImage>{{preds, gts}}, num_classes, threshold);
}

double ap_p_vol(const std::vector<InstanceParsing>& preds,
                const std::vector<InstanceParsing>& gts, int num_classes) {
  return ap_p_vol(std::vector<EvalImage>{{preds, gts}}, num_classes);
}

double pcp50(const std::vector<EvalImage>& images, int num_classes,
             PcpMode mode) {
  std::int64_t correct_total = 0;
  std::int64_t parts_total = 0;
  double instance_sum = 0.0;
  std::int64_t instances = 0;
  const auto quality = app_matrices(images, num_classes);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& img = images[i];
    const MatchResult m = greedy_match(scores_of(img.preds), quality[i], 0.5);
    std::vector<int> gt_to_pred(img.gts.size(), -1);
    for (std::size_t p = 0; p < m.pred_to_gt.size(); ++p) {
      if (m.pred_to_gt[p] >= 0) gt_to_pred[m.pred_to_gt[p]] = static_cast<int>(p);
    }
    for (std::size_t g = 0; g < img.gts.size(); ++g) {
      // Parts of this GT, measured against the matched prediction or an
      // empty one.
      InstanceParsing empty;
      empty.box = img.gts[g].box;
      const InstanceParsing& pred =
          gt_to_pred[g] >= 0 ? img.preds[gt_to_pred[g]] : empty;
      const auto counts = part_counts(pred, img.gts[g], num_classes);
      std::int64_t parts = 0;
      std::int64_t correct = 0;
      for (int c = 1; c < num_classes; ++c) {
        if (counts[c].gt_pixels == 0) continue;
        ++parts;
        const double iou = static_cast<double>(counts[c].intersection) /
                           static_cast<double>(counts[c].uni);
        if (iou > 0.5) ++correct;
      }
      correct_total += correct;
      parts_total += parts;
      if (parts > 0) {
        instance_sum += static_cast<double>(correct) / static_cast<double>(parts);
        ++instances;
      }
    }
  }
  if (parts_total == 0) {
    throw std::invalid_argument("pcp50: ground truth contains no parts");
  }
  if (mode == PcpMode::kPerInstanceMean) {
    return instance_sum / static_cast<double>(instances);
  }
  return static_cast<double>(correct_total) / static_cast<double>(parts_total);
}

double pcp50(const std::vector<InstanceParsing>& preds,
             const std::vector<InstanceParsing>& gts, int num_classes,
             PcpMode mode) {
  return pcp50(std::vector<EvalImage>{{preds, gts}}, num_classes, mode);
}

// ---------------------------------------------------------------------------

int GeodesicTable::vertex_of(const DensePosePoint& p) const {
  if (p.part_index < 1 || p.part_index > parts) {
    throw std::invalid_argument("geodesic table: part " +
                                std::to_string(p.part_index) + " outside [1, " +
                                std::to_string(parts) + "]");
  }
  const auto q = [&](double t) {
    return static_cast<int>(std::lround(std::clamp(t, 0.0, 1.0) * (grid - 1)));
  };
  return (p.part_index - 1) * grid * grid + q(p.u) * grid + q(p.v);
}

double GeodesicTable::distance(const DensePosePoint& a,
                               const DensePosePoint& b) const {
  const auto n = static_cast<std::size_t>(vertex_count());
  return distances[static_cast<std::size_t>(vertex_of(a)) * n + vertex_of(b)];
}

void validate_gps_config(const GPSConfig& cfg) {
  if (!(cfg.kappa > 0.0)) throw std::invalid_argument("gps: kappa must be > 0");
  if (cfg.source == GPSConfig::Source::kLookupTable) {
    const auto& t = cfg.table;
    if (t.parts < 1 || t.grid < 1) {
      throw std::invalid_argument("geodesic table: parts and grid must be >= 1");
    }
    const auto n = static_cast<std::size_t>(t.vertex_count());
    if (t.distances.size() != n * n) {
      throw std::invalid_argument("geodesic table: expected " +
                                  std::to_string(n * n) + " distances, got " +
                                  std::to_string(t.distances.size()));
    }
    for (double d : t.distances) {
      if (!(d >= 0.0)) {
        throw std::invalid_argument("geodesic table: distances must be >= 0");
      }
    }
  }
}

double surface_distance(const DensePosePoint& a, const DensePosePoint& b,
                        const GPSConfig& cfg) {
  if (cfg.source == GPSConfig::Source::kLookupTable) {
    return cfg.table.distance(a, b);
  }
  if (a.part_index != b.part_index) {
    return std::numeric_limits<double>::infinity();
  }
  return std::hypot(a.u - b.u, a.v - b.v);
}

namespace {

double gps_kernel(double d, double kappa) {
  if (std::isinf(d)) return 0.0;
  return std::exp(-(d * d) / (2.0 * kappa * kappa));
}

}  // namespace

double gps(const std::vector<DensePosePoint>& pred_points,
           const std::vector<DensePosePoint>& gt_points, const GPSConfig& cfg) {
  validate_gps_config(cfg);
  if (gt_points.empty()) throw std::invalid_argument("gps: no ground-truth points");
  if (pred_points.size() != gt_points.size()) {
    throw std::invalid_argument("gps: " + std::to_string(pred_points.size()) +
                                " predicted points for " +
                                std::to_string(gt_points.size()) +
                                " ground-truth points");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < gt_points.size(); ++i) {
    sum += gps_kernel(surface_distance(pred_points[i], gt_points[i], cfg),
                      cfg.kappa);
  }
  return sum / static_cast<double>(gt_points.size());
}

double instance_gps(const InstanceParsing& pred, const InstanceParsing& gt,
                    const GPSConfig& cfg) {
  if (gt.points.empty()) {
    throw std::invalid_argument("instance_gps: ground-truth instance has no points");
  }
  std::map<std::pair<int, int>, const DensePosePoint*> by_pixel;
  for (const auto& p : pred.points) by_pixel.emplace(std::make_pair(p.x, p.y), &p);
  double sum = 0.0;
  for (const auto& g : gt.points) {
    const auto it = by_pixel.find({g.x, g.y});
    if (it == by_pixel.end()) continue;
    sum += gps_kernel(surface_distance(*it->second, g, cfg), cfg.kappa);
  }
  return sum / static_cast<double>(gt.points.size());
}

std::vector<double> gps_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(static_cast<double>(50 + 5 * i) / 100.0);
  return t;
}

DensePoseAP densepose_ap(const std::vector<EvalImage>& images,
                         const GPSConfig& cfg) {
  validate_gps_config(cfg);
  std::vector<QualityMatrix> quality;
  quality.reserve(images.size());
  for (const auto& img : images) {
    quality.push_back(quality_matrix(img, [&](const auto& p, const auto& g) {
      return instance_gps(p, g, cfg);
    }));
  }
  const auto thresholds = gps_thresholds();
  const auto per = ap_over_thresholds(images, quality, thresholds);
  DensePoseAP r;
  r.ap = std::accumulate(per.begin(), per.end(), 0.0) / per.size();
  r.ap50 = per[0];
  r.ap75 = per[5];
  return r;
}

DensePoseAP densepose_ap(const std::vector<InstanceParsing>& preds,
                         const std::vector<InstanceParsing>& gts,
                         const GPSConfig& cfg) {
  return densepose_ap(std::vector<EvalImage>{{preds, gts}}, cfg);
}

}  // namespace prcnn
