#pragma once

#include <map>
#include <utility>
#include <vector>

#include "prcnn/tensor.h"

namespace prcnn {

// Axis-aligned region in image pixels. Validated by validate_box().
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;
  double score = 1.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
};

// Throws std::invalid_argument unless x2 >= x1, y2 >= y1 and score in [0, 1].
void validate_box(const Box& box);

// P2..P5 feature maps keyed by level; stride of level k is 2^k.
struct FeaturePyramid {
  std::map<int, Tensor> levels;

  static int stride_of(int level) { return 1 << level; }
};

struct AssignConfig {
  int k0 = 4;
  double canonical_scale = 224.0;
  int k_min = 2;
  int k_max = 5;
};

// floor(k0 + log2(sqrt(w*h) / canonical_scale)) clamped to [k_min, k_max].
int fpn_assign_level(const Box& box, const AssignConfig& cfg = {});

inline constexpr int kDefaultSamplingRatio = 2;

// Quantization-free RoI pooling of `feature` (batch 1 is read, index
// `batch_index`) onto an out x out grid. Box coordinates are divided by
// `stride`; continuous coordinate c corresponds to pixel index c - 0.5.
Tensor roi_align(const Tensor& feature, const Box& box, int stride, int out,
                 int sampling_ratio = kDefaultSamplingRatio,
                 int batch_index = 0);
Tensor roi_align_backward(const Tensor::Shape& feature_shape, const Box& box,
                          int stride, int out, int sampling_ratio,
                          const Tensor& dy, int batch_index = 0);

struct PooledRoi {
  int level = 0;
  Tensor features;
};

// Parsing-branch pooling: every box is pooled from P2 regardless of size.
std::vector<PooledRoi> pss_pool(const FeaturePyramid& pyramid,
                                const std::vector<Box>& boxes, int out,
                                int sampling_ratio = kDefaultSamplingRatio);

// Bbox-branch style pooling: each box is pooled from its assigned level.
std::vector<PooledRoi> fpn_pool(const FeaturePyramid& pyramid,
                                const std::vector<Box>& boxes, int out,
                                int sampling_ratio = kDefaultSamplingRatio,
                                const AssignConfig& cfg = {});

// At most `cap` boxes, highest score first, ties by original index.
std::vector<Box> subsample_parsing_rois(const std::vector<Box>& boxes,
                                        int cap = 32);

enum class ScaleMeasure { kAreaRatio, kSqrtAreaRatio };

double relative_scale(const Box& box, double image_w, double image_h,
                      ScaleMeasure measure = ScaleMeasure::kAreaRatio);

// For each grid value g, the fraction of `scales` that are <= g.
std::vector<std::pair<double, double>> scale_cdf(
    const std::vector<double>& scales, const std::vector<double>& grid);

}  // namespace prcnn
