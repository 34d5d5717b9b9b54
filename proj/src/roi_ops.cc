#include "prcnn/roi_ops.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "prcnn/ops.h"
#include "prcnn/parallel.h"

namespace prcnn {

void validate_box(const Box& box) {
  if (!(box.x2 >= box.x1) || !(box.y2 >= box.y1)) {
    throw std::invalid_argument("box has negative extent");
  }
  if (!(box.score >= 0.0 && box.score <= 1.0)) {
    throw std::invalid_argument("box score " + std::to_string(box.score) +
                                " outside [0, 1]");
  }
}

int fpn_assign_level(const Box& box, const AssignConfig& cfg) {
  if (cfg.k_min > cfg.k0 || cfg.k0 > cfg.k_max) {
    throw std::invalid_argument("fpn_assign_level: need k_min <= k0 <= k_max");
  }
  validate_box(box);
  const double area = box.area();
  if (!(area > 0.0)) {
    throw std::invalid_argument("fpn_assign_level: zero-area box");
  }
  const double k =
      std::floor(cfg.k0 + std::log2(std::sqrt(area) / cfg.canonical_scale));
  return static_cast<int>(
      std::clamp(k, static_cast<double>(cfg.k_min),
                 static_cast<double>(cfg.k_max)));
}

namespace {

struct RoiGrid {
  double x0, y0;    // clamped box origin in feature coordinates
  double bin_w, bin_h;
};

RoiGrid make_grid(const Box& box, int stride, int out, int sampling_ratio,
                  int height, int width, const char* op) {
  if (stride < 1) throw std::invalid_argument(std::string(op) + ": stride must be >= 1");
  if (out < 1) throw std::invalid_argument(std::string(op) + ": output size must be >= 1");
  if (sampling_ratio < 1) {
    throw std::invalid_argument(std::string(op) + ": sampling_ratio must be >= 1");
  }
  validate_box(box);
  const double s = static_cast<double>(stride);
  const double x1 = std::clamp(box.x1 / s, 0.0, static_cast<double>(width));
  const double x2 = std::clamp(box.x2 / s, 0.0, static_cast<double>(width));
  const double y1 = std::clamp(box.y1 / s, 0.0, static_cast<double>(height));
  const double y2 = std::clamp(box.y2 / s, 0.0, static_cast<double>(height));
  return {x1, y1, (x2 - x1) / out, (y2 - y1) / out};
}

void check_feature(const Tensor::Shape& shape, int batch_index, const char* op) {
  if (shape[1] == 0) {
    throw std::invalid_argument(std::string(op) + ": feature has no channels");
  }
  if (shape[2] < 1 || shape[3] < 1) {
    throw std::invalid_argument(std::string(op) + ": feature has empty spatial extent");
  }
  if (batch_index < 0 || batch_index >= shape[0]) {
    throw std::invalid_argument(std::string(op) + ": batch index " +
                                std::to_string(batch_index) + " out of range");
  }
}

}  // namespace

Tensor roi_align(const Tensor& feature, const Box& box, int stride, int out,
                 int sampling_ratio, int batch_index) {
  check_feature(feature.shape(), batch_index, "roi_align");
  const int height = feature.h();
  const int width = feature.w();
  const RoiGrid g =
      make_grid(box, stride, out, sampling_ratio, height, width, "roi_align");
  const double count = static_cast<double>(sampling_ratio) * sampling_ratio;
  Tensor y(1, feature.c(), out, out);
  parallel_for(feature.c(), [&](int c) {
    auto plane = feature.plane(batch_index, c);
    for (int by = 0; by < out; ++by) {
      for (int bx = 0; bx < out; ++bx) {
        double acc = 0.0;
        for (int sy = 0; sy < sampling_ratio; ++sy) {
          const double yy =
              g.y0 + (by + (sy + 0.5) / sampling_ratio) * g.bin_h - 0.5;
          for (int sx = 0; sx < sampling_ratio; ++sx) {
            const double xx =
                g.x0 + (bx + (sx + 0.5) / sampling_ratio) * g.bin_w - 0.5;
            acc += bilinear_sample(plane, height, width, yy, xx);
          }
        }
        y.at(0, c, by, bx) = acc / count;
      }
    }
  });
  return y;
}

Tensor roi_align_backward(const Tensor::Shape& feature_shape, const Box& box,
                          int stride, int out, int sampling_ratio,
                          const Tensor& dy, int batch_index) {
  check_feature(feature_shape, batch_index, "roi_align_backward");
  const int height = feature_shape[2];
  const int width = feature_shape[3];
  const RoiGrid g = make_grid(box, stride, out, sampling_ratio, height, width,
                              "roi_align_backward");
  check_same_shape(Tensor(1, feature_shape[1], out, out), dy,
                   "roi_align_backward dy");
  const double count = static_cast<double>(sampling_ratio) * sampling_ratio;
  Tensor dx(feature_shape);
  parallel_for(feature_shape[1], [&](int c) {
    auto plane = dx.plane(batch_index, c);
    const auto add = [&](int r, int col, double v) {
      plane[static_cast<std::size_t>(r) * width + col] += v;
    };
    for (int by = 0; by < out; ++by) {
      for (int bx = 0; bx < out; ++bx) {
        const double grad = dy.at(0, c, by, bx) / count;
        for (int sy = 0; sy < sampling_ratio; ++sy) {
          const double yy =
              g.y0 + (by + (sy + 0.5) / sampling_ratio) * g.bin_h - 0.5;
          for (int sx = 0; sx < sampling_ratio; ++sx) {
            const double xx =
                g.x0 + (bx + (sx + 0.5) / sampling_ratio) * g.bin_w - 0.5;
            const BilinearTap t = bilinear_tap(yy, xx, height, width);
            add(t.y0, t.x0, grad * t.wy0 * t.wx0);
            add(t.y0, t.x1, grad * t.wy0 * t.wx1);
            add(t.y1, t.x0, grad * t.wy1 * t.wx0);
            add(t.y1, t.x1, grad * t.wy1 * t.wx1);
          }
        }
      }
    }
  });
  return dx;
}

std::vector<PooledRoi> pss_pool(const FeaturePyramid& pyramid,
                                const std::vector<Box>& boxes, int out,
                                int sampling_ratio) {
  const auto it = pyramid.levels.find(2);
  if (it == pyramid.levels.end()) {
    throw std::invalid_argument("pss_pool: feature pyramid has no level 2");
  }
  std::vector<PooledRoi> pooled;
  pooled.reserve(boxes.size());
  for (const auto& box : boxes) {
    pooled.push_back({2, roi_align(it->second, box, FeaturePyramid::stride_of(2),
                                   out, sampling_ratio)});
  }
  return pooled;
}

std::vector<PooledRoi> fpn_pool(const FeaturePyramid& pyramid,
                                const std::vector<Box>& boxes, int out,
                                int sampling_ratio, const AssignConfig& cfg) {
  std::vector<PooledRoi> pooled;
  pooled.reserve(boxes.size());
  for (const auto& box : boxes) {
    const int level = fpn_assign_level(box, cfg);
    const auto it = pyramid.levels.find(level);
    if (it == pyramid.levels.end()) {
      throw std::invalid_argument("fpn_pool: feature pyramid has no level " +
                                  std::to_string(level));
    }
    pooled.push_back({level, roi_align(it->second, box,
                                       FeaturePyramid::stride_of(level), out,
                                       sampling_ratio)});
  }
  return pooled;
}

std::vector<Box> subsample_parsing_rois(const std::vector<Box>& boxes,
                                        int cap) {
  if (cap < 1) {
    throw std::invalid_argument("subsample_parsing_rois: cap must be >= 1");
  }
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return boxes[a].score > boxes[b].score;
  });
  const std::size_t keep = std::min(order.size(), static_cast<std::size_t>(cap));
  std::vector<Box> out;
  out.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) out.push_back(boxes[order[i]]);
  return out;
}

double relative_scale(const Box& box, double image_w, double image_h,
                      ScaleMeasure measure) {
  if (!(image_w > 0.0) || !(image_h > 0.0)) {
    throw std::invalid_argument("relative_scale: image dimensions must be positive");
  }
  const double ratio = box.area() / (image_w * image_h);
  return measure == ScaleMeasure::kAreaRatio ? ratio : std::sqrt(ratio);
}

std::vector<std::pair<double, double>> scale_cdf(
    const std::vector<double>& scales, const std::vector<double>& grid) {
  std::vector<double> sorted = scales;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::pair<double, double>> rows;
  rows.reserve(grid.size());
  for (double g : grid) {
    const auto count = static_cast<double>(
        std::upper_bound(sorted.begin(), sorted.end(), g) - sorted.begin());
    rows.emplace_back(g, sorted.empty() ? 0.0 : count / sorted.size());
  }
  return rows;
}

}  // namespace prcnn
