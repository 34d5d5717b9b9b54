#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "prcnn/tensor.h"

namespace prcnn {

// Convolution parameters. For conv2d the weight is [c_out, c_in, k_h, k_w];
// for deconv2d it is [c_in, c_out, k_h, k_w] (transposed layout).
struct ConvParams {
  Tensor weight;
  std::vector<double> bias;
  int stride = 1;
  int padding = 0;
  int dilation = 1;

  int out_channels() const { return static_cast<int>(bias.size()); }
  int kernel_h() const { return weight.h(); }
  int kernel_w() const { return weight.w(); }
  std::int64_t param_count() const {
    return static_cast<std::int64_t>(weight.size() + bias.size());
  }
};

struct ConvGrads {
  Tensor dx;
  Tensor dweight;
  std::vector<double> dbias;
};

struct BNParams {
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double eps = 1e-5;

  int channels() const { return static_cast<int>(gamma.size()); }
  // Learnable scalars only (gamma, beta).
  std::int64_t param_count() const {
    return static_cast<std::int64_t>(gamma.size() + beta.size());
  }
};

struct BNGrads {
  Tensor dx;
  std::vector<double> dgamma;
  std::vector<double> dbeta;
};

struct CrossEntropyResult {
  double loss = 0.0;
  Tensor dlogits;
};

// Label value excluded from loss and metrics.
inline constexpr int kIgnoreLabel = 255;

// Plain 2-D integer grid [n, h, w] of class labels.
struct LabelGrid {
  int n = 0;
  int h = 0;
  int w = 0;
  std::vector<int> labels;

  int at(int b, int y, int x) const {
    return labels[(static_cast<std::size_t>(b) * h + y) * w + x];
  }
};

// Output extent of a dilated convolution along one axis, or <= 0 if invalid.
int conv_output_size(int in, int kernel, int stride, int padding, int dilation);

// Fresh parameters drawn uniformly from [-scale, scale] with a seeded engine.
ConvParams make_conv(int c_in, int c_out, int kernel, int dilation,
                     int padding, std::uint64_t seed, double scale = 0.01);
ConvParams make_deconv(int c_in, int c_out, int kernel, int stride,
                       std::uint64_t seed, double scale = 0.01);
BNParams make_identity_bn(int channels, double eps = 1e-5);

Tensor conv2d_forward(const Tensor& x, const ConvParams& p);
ConvGrads conv2d_backward(const Tensor& x, const ConvParams& p,
                          const Tensor& dy);

Tensor deconv2d_forward(const Tensor& x, const ConvParams& p);
ConvGrads deconv2d_backward(const Tensor& x, const ConvParams& p,
                            const Tensor& dy);

Tensor batchnorm_inference(const Tensor& x, const BNParams& p);
BNGrads batchnorm_inference_backward(const Tensor& x, const BNParams& p,
                                     const Tensor& dy);

Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& x, const Tensor& dy);

Tensor global_avg_pool(const Tensor& x);
Tensor global_avg_pool_backward(const Tensor::Shape& x_shape,
                                const Tensor& dy);

// Half-pixel-center bilinear resampling (align_corners = false).
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);
Tensor bilinear_resize_backward(const Tensor::Shape& x_shape,
                                const Tensor& dy);

// Mean per-pixel softmax cross-entropy over non-ignored pixels.
CrossEntropyResult softmax_cross_entropy(const Tensor& logits,
                                         const LabelGrid& labels);

// Bilinear tap of a single plane at pixel-index coordinates (y, x),
// clamped to the plane. Weights are returned for backward scatter.
struct BilinearTap {
  int y0, y1, x0, x1;
  double wy0, wy1, wx0, wx1;
};
BilinearTap bilinear_tap(double y, double x, int height, int width);
double bilinear_sample(std::span<const double> plane, int height, int width,
                       double y, double x);

}  // namespace prcnn
