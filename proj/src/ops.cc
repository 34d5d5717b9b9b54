#include "prcnn/ops.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include "prcnn/parallel.h"

namespace prcnn {

namespace {

[[noreturn]] void reject(const std::string& what) {
  throw std::invalid_argument(what);
}

void validate_conv(const ConvParams& p, const char* op) {
  if (p.stride < 1) reject(std::string(op) + ": stride must be >= 1");
  if (p.padding < 0) reject(std::string(op) + ": padding must be >= 0");
  if (p.dilation < 1) reject(std::string(op) + ": dilation must be >= 1");
  if (p.weight.h() < 1 || p.weight.w() < 1) {
    reject(std::string(op) + ": kernel size must be >= 1, got " +
           shape_string(p.weight.shape()));
  }
}

// Valid output index range [lo, hi) along one axis for kernel tap k.
void valid_range(int out, int in, int stride, int padding, int offset,
                 int* lo, int* hi) {
  // need 0 <= o*stride - padding + offset < in
  const int shift = padding - offset;
  int l = shift <= 0 ? 0 : (shift + stride - 1) / stride;
  int h = (in - 1 + shift) >= 0 ? (in - 1 + shift) / stride + 1 : 0;
  *lo = std::min(l, out);
  *hi = std::clamp(h, *lo, out);
}

void fill_uniform(std::span<double> values, std::mt19937_64& rng,
                  double scale) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (auto& v : values) v = dist(rng);
}

}  // namespace

int conv_output_size(int in, int kernel, int stride, int padding,
                     int dilation) {
  const int span = in + 2 * padding - dilation * (kernel - 1) - 1;
  if (span < 0) return 0;
  return span / stride + 1;
}

ConvParams make_conv(int c_in, int c_out, int kernel, int dilation,
                     int padding, std::uint64_t seed, double scale) {
  ConvParams p;
  p.weight = Tensor(c_out, c_in, kernel, kernel);
  p.bias.assign(c_out, 0.0);
  p.dilation = dilation;
  p.padding = padding;
  std::mt19937_64 rng(seed);
  fill_uniform(p.weight.data(), rng, scale);
  fill_uniform(p.bias, rng, scale);
  return p;
}

ConvParams make_deconv(int c_in, int c_out, int kernel, int stride,
                       std::uint64_t seed, double scale) {
  ConvParams p;
  p.weight = Tensor(c_in, c_out, kernel, kernel);
  p.bias.assign(c_out, 0.0);
  p.stride = stride;
  std::mt19937_64 rng(seed);
  fill_uniform(p.weight.data(), rng, scale);
  fill_uniform(p.bias, rng, scale);
  return p;
}

BNParams make_identity_bn(int channels, double eps) {
  BNParams p;
  p.gamma.assign(channels, 1.0);
  p.beta.assign(channels, 0.0);
  p.running_mean.assign(channels, 0.0);
  p.running_var.assign(channels, 1.0);
  p.eps = eps;
  return p;
}

// ---------------------------------------------------------------------------
// conv2d
//
// Every output element accumulates its taps in (c_in, k_y, k_x) ascending
// order starting from zero, then adds the bias. Out-of-bounds taps are
// skipped. The accumulation is done plane-at-a-time so the inner loop runs
// over contiguous output columns.

Tensor conv2d_forward(const Tensor& x, const ConvParams& p) {
  validate_conv(p, "conv2d");
  const int c_out = p.weight.n();
  const int c_in = p.weight.c();
  const int kh = p.weight.h();
  const int kw = p.weight.w();
  if (x.c() != c_in) {
    reject("conv2d: input channels " + std::to_string(x.c()) +
           " != weight c_in " + std::to_string(c_in));
  }
  if (static_cast<int>(p.bias.size()) != c_out) {
    reject("conv2d: bias length " + std::to_string(p.bias.size()) +
           " != c_out " + std::to_string(c_out));
  }
  const int oh = conv_output_size(x.h(), kh, p.stride, p.padding, p.dilation);
  const int ow = conv_output_size(x.w(), kw, p.stride, p.padding, p.dilation);
  if (oh <= 0) reject("conv2d: output height is not positive for input height " + std::to_string(x.h()));
  if (ow <= 0) reject("conv2d: output width is not positive for input width " + std::to_string(x.w()));

  Tensor y(x.n(), c_out, oh, ow);
  const int in_h = x.h();
  const int in_w = x.w();
  const int s = p.stride;
  // Output channels are processed in blocks that share each input row load.
  constexpr int kBlock = 4;
  const int blocks = (c_out + kBlock - 1) / kBlock;
  parallel_for(x.n() * blocks, [&](int job) {
    const int n = job / blocks;
    const int co0 = (job % blocks) * kBlock;
    const int nb = std::min(kBlock, c_out - co0);
    double* out[kBlock];
    for (int b = 0; b < nb; ++b) out[b] = y.plane(n, co0 + b).data();
    double wv[kBlock];
    for (int ci = 0; ci < c_in; ++ci) {
      const double* in = x.plane(n, ci).data();
      for (int ky = 0; ky < kh; ++ky) {
        int oy_lo, oy_hi;
        valid_range(oh, in_h, s, p.padding, ky * p.dilation, &oy_lo, &oy_hi);
        for (int kx = 0; kx < kw; ++kx) {
          int ox_lo, ox_hi;
          valid_range(ow, in_w, s, p.padding, kx * p.dilation, &ox_lo, &ox_hi);
          for (int b = 0; b < nb; ++b) wv[b] = p.weight.at(co0 + b, ci, ky, kx);
          const int off = kx * p.dilation - p.padding;
          for (int oy = oy_lo; oy < oy_hi; ++oy) {
            const int iy = oy * s - p.padding + ky * p.dilation;
            const double* row = in + static_cast<std::size_t>(iy) * in_w;
            const std::size_t obase = static_cast<std::size_t>(oy) * ow;
            if (nb == kBlock && s == 1) {
              double* o0 = out[0] + obase;
              double* o1 = out[1] + obase;
              double* o2 = out[2] + obase;
              double* o3 = out[3] + obase;
              for (int ox = ox_lo; ox < ox_hi; ++ox) {
                const double v = row[ox + off];
                o0[ox] += wv[0] * v;
                o1[ox] += wv[1] * v;
                o2[ox] += wv[2] * v;
                o3[ox] += wv[3] * v;
              }
            } else {
              for (int b = 0; b < nb; ++b) {
                double* orow = out[b] + obase;
                for (int ox = ox_lo; ox < ox_hi; ++ox) {
                  orow[ox] += wv[b] * row[ox * s + off];
                }
              }
            }
          }
        }
      }
    }
    for (int b = 0; b < nb; ++b) {
      const double bias = p.bias[co0 + b];
      double* o = out[b];
      for (int i = 0; i < oh * ow; ++i) o[i] += bias;
    }
  });
  return y;
}

ConvGrads conv2d_backward(const Tensor& x, const ConvParams& p,
                          const Tensor& dy) {
  validate_conv(p, "conv2d_backward");
  const int c_out = p.weight.n();
  const int c_in = p.weight.c();
  const int kh = p.weight.h();
  const int kw = p.weight.w();
  if (x.c() != c_in) {
    reject("conv2d_backward: input channels " + std::to_string(x.c()) +
           " != weight c_in " + std::to_string(c_in));
  }
  const int oh = conv_output_size(x.h(), kh, p.stride, p.padding, p.dilation);
  const int ow = conv_output_size(x.w(), kw, p.stride, p.padding, p.dilation);
  check_same_shape(Tensor(x.n(), c_out, oh, ow), dy, "conv2d_backward dy");

  const int in_h = x.h();
  const int in_w = x.w();
  const int s = p.stride;
  ConvGrads g;
  g.dx = Tensor(x.shape());
  g.dweight = Tensor(p.weight.shape());
  g.dbias.assign(c_out, 0.0);

  // Weight and bias gradients: one job per output channel.
  parallel_for(c_out, [&](int co) {
    double db = 0.0;
    for (int n = 0; n < x.n(); ++n) {
      for (double v : dy.plane(n, co)) db += v;
    }
    g.dbias[co] = db;
    for (int ci = 0; ci < c_in; ++ci) {
      for (int ky = 0; ky < kh; ++ky) {
        int oy_lo, oy_hi;
        valid_range(oh, in_h, s, p.padding, ky * p.dilation, &oy_lo, &oy_hi);
        for (int kx = 0; kx < kw; ++kx) {
          int ox_lo, ox_hi;
          valid_range(ow, in_w, s, p.padding, kx * p.dilation, &ox_lo, &ox_hi);
          double acc = 0.0;
          for (int n = 0; n < x.n(); ++n) {
            const double* in = x.plane(n, ci).data();
            const double* grad = dy.plane(n, co).data();
            for (int oy = oy_lo; oy < oy_hi; ++oy) {
              const int iy = oy * s - p.padding + ky * p.dilation;
              const double* row = in + static_cast<std::size_t>(iy) * in_w;
              const int off = kx * p.dilation - p.padding;
              const double* grow = grad + static_cast<std::size_t>(oy) * ow;
              for (int ox = ox_lo; ox < ox_hi; ++ox) {
                acc += grow[ox] * row[ox * s + off];
              }
            }
          }
          g.dweight.at(co, ci, ky, kx) = acc;
        }
      }
    }
  });

  // Input gradient: one job per (n, c_in) plane.
  parallel_for(x.n() * c_in, [&](int job) {
    const int n = job / c_in;
    const int ci = job % c_in;
    double* dxp = g.dx.plane(n, ci).data();
    for (int co = 0; co < c_out; ++co) {
      const double* grad = dy.plane(n, co).data();
      for (int ky = 0; ky < kh; ++ky) {
        int oy_lo, oy_hi;
        valid_range(oh, in_h, s, p.padding, ky * p.dilation, &oy_lo, &oy_hi);
        for (int kx = 0; kx < kw; ++kx) {
          int ox_lo, ox_hi;
          valid_range(ow, in_w, s, p.padding, kx * p.dilation, &ox_lo, &ox_hi);
          const double wv = p.weight.at(co, ci, ky, kx);
          for (int oy = oy_lo; oy < oy_hi; ++oy) {
            const int iy = oy * s - p.padding + ky * p.dilation;
            double* row = dxp + static_cast<std::size_t>(iy) * in_w;
            const int off = kx * p.dilation - p.padding;
            const double* grow = grad + static_cast<std::size_t>(oy) * ow;
            for (int ox = ox_lo; ox < ox_hi; ++ox) {
              row[ox * s + off] += wv * grow[ox];
            }
          }
        }
      }
    }
  });
  return g;
}

// ---------------------------------------------------------------------------
// Transposed convolution (dilation 1). Output extent is
// (in - 1) * stride - 2 * padding + kernel.

namespace {

void validate_deconv(const Tensor& x, const ConvParams& p, const char* op,
                     int* oh, int* ow) {
  validate_conv(p, op);
  if (p.dilation != 1) {
    reject(std::string(op) + ": dilated transposed convolution is not supported");
  }
  if (x.c() != p.weight.n()) {
    reject(std::string(op) + ": input channels " + std::to_string(x.c()) +
           " != weight c_in " + std::to_string(p.weight.n()));
  }
  if (static_cast<int>(p.bias.size()) != p.weight.c()) {
    reject(std::string(op) + ": bias length " + std::to_string(p.bias.size()) +
           " != c_out " + std::to_string(p.weight.c()));
  }
  *oh = (x.h() - 1) * p.stride - 2 * p.padding + p.weight.h();
  *ow = (x.w() - 1) * p.stride - 2 * p.padding + p.weight.w();
  if (*oh <= 0 || *ow <= 0) {
    reject(std::string(op) + ": kernel " + std::to_string(p.weight.h()) +
           " / stride " + std::to_string(p.stride) + " / padding " +
           std::to_string(p.padding) + " yields an empty output");
  }
}

}  // namespace

Tensor deconv2d_forward(const Tensor& x, const ConvParams& p) {
  int oh, ow;
  validate_deconv(x, p, "deconv2d", &oh, &ow);
  const int c_in = p.weight.n();
  const int c_out = p.weight.c();
  const int kh = p.weight.h();
  const int kw = p.weight.w();
  const int s = p.stride;
  Tensor y(x.n(), c_out, oh, ow);
  // Each output pixel accumulates over (c_in, k_y, k_x) ascending.
  const auto input_range = [&](int in, int out, int k, int* lo, int* hi) {
    // need 0 <= i*s - padding + k < out
    const int shift = p.padding - k;
    *lo = shift <= 0 ? 0 : (shift + s - 1) / s;
    const int top = out - 1 + shift;
    *hi = top < 0 ? 0 : std::min(in, top / s + 1);
    *lo = std::min(*lo, *hi);
  };
  parallel_for(x.n() * c_out, [&](int job) {
    const int n = job / c_out;
    const int co = job % c_out;
    double* out = y.plane(n, co).data();
    for (int ci = 0; ci < c_in; ++ci) {
      const double* in = x.plane(n, ci).data();
      for (int ky = 0; ky < kh; ++ky) {
        int iy_lo, iy_hi;
        input_range(x.h(), oh, ky, &iy_lo, &iy_hi);
        for (int kx = 0; kx < kw; ++kx) {
          int ix_lo, ix_hi;
          input_range(x.w(), ow, kx, &ix_lo, &ix_hi);
          const double wv = p.weight.at(ci, co, ky, kx);
          const int xoff = kx - p.padding;
          for (int iy = iy_lo; iy < iy_hi; ++iy) {
            const int oy = iy * s - p.padding + ky;
            double* orow = out + static_cast<std::size_t>(oy) * ow;
            const double* irow = in + static_cast<std::size_t>(iy) * x.w();
            for (int ix = ix_lo; ix < ix_hi; ++ix) {
              orow[ix * s + xoff] += wv * irow[ix];
            }
          }
        }
      }
    }
    const double b = p.bias[co];
    for (int i = 0; i < oh * ow; ++i) out[i] += b;
  });
  return y;
}

ConvGrads deconv2d_backward(const Tensor& x, const ConvParams& p,
                            const Tensor& dy) {
  int oh, ow;
  validate_deconv(x, p, "deconv2d_backward", &oh, &ow);
  const int c_in = p.weight.n();
  const int c_out = p.weight.c();
  const int kh = p.weight.h();
  const int kw = p.weight.w();
  const int s = p.stride;
  check_same_shape(Tensor(x.n(), c_out, oh, ow), dy, "deconv2d_backward dy");

  ConvGrads g;
  g.dx = Tensor(x.shape());
  g.dweight = Tensor(p.weight.shape());
  g.dbias.assign(c_out, 0.0);

  for (int co = 0; co < c_out; ++co) {
    double db = 0.0;
    for (int n = 0; n < x.n(); ++n) {
      for (double v : dy.plane(n, co)) db += v;
    }
    g.dbias[co] = db;
  }

  parallel_for(c_in, [&](int ci) {
    for (int co = 0; co < c_out; ++co) {
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          double acc = 0.0;
          for (int n = 0; n < x.n(); ++n) {
            for (int iy = 0; iy < x.h(); ++iy) {
              const int oy = iy * s - p.padding + ky;
              if (oy < 0 || oy >= oh) continue;
              for (int ix = 0; ix < x.w(); ++ix) {
                const int ox = ix * s - p.padding + kx;
                if (ox < 0 || ox >= ow) continue;
                acc += x.at(n, ci, iy, ix) * dy.at(n, co, oy, ox);
              }
            }
          }
          g.dweight.at(ci, co, ky, kx) = acc;
        }
      }
    }
  });

  parallel_for(x.n() * c_in, [&](int job) {
    const int n = job / c_in;
    const int ci = job % c_in;
    for (int iy = 0; iy < x.h(); ++iy) {
      for (int ix = 0; ix < x.w(); ++ix) {
        double acc = 0.0;
        for (int co = 0; co < c_out; ++co) {
          for (int ky = 0; ky < kh; ++ky) {
            const int oy = iy * s - p.padding + ky;
            if (oy < 0 || oy >= oh) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ox = ix * s - p.padding + kx;
              if (ox < 0 || ox >= ow) continue;
              acc += p.weight.at(ci, co, ky, kx) * dy.at(n, co, oy, ox);
            }
          }
        }
        g.dx.at(n, ci, iy, ix) = acc;
      }
    }
  });
  return g;
}

// ---------------------------------------------------------------------------

namespace {

void validate_bn(const Tensor& x, const BNParams& p, const char* op) {
  const auto c = static_cast<std::size_t>(x.c());
  if (p.gamma.size() != c || p.beta.size() != c ||
      p.running_mean.size() != c || p.running_var.size() != c) {
    reject(std::string(op) + ": input has " + std::to_string(c) +
           " channels but parameters have " + std::to_string(p.gamma.size()));
  }
  if (!(p.eps > 0.0)) reject(std::string(op) + ": eps must be positive");
  for (double v : p.running_var) {
    if (v < 0.0) reject(std::string(op) + ": running_var must be >= 0");
  }
}

}  // namespace

Tensor batchnorm_inference(const Tensor& x, const BNParams& p) {
  validate_bn(x, p, "batchnorm_inference");
  Tensor y(x.shape());
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const double inv_std = 1.0 / std::sqrt(p.running_var[c] + p.eps);
      const double mean = p.running_mean[c];
      auto src = x.plane(n, c);
      auto dst = y.plane(n, c);
      for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i] = p.gamma[c] * ((src[i] - mean) * inv_std) + p.beta[c];
      }
    }
  }
  return y;
}

BNGrads batchnorm_inference_backward(const Tensor& x, const BNParams& p,
                                     const Tensor& dy) {
  validate_bn(x, p, "batchnorm_inference_backward");
  check_same_shape(x, dy, "batchnorm_inference_backward dy");
  BNGrads g;
  g.dx = Tensor(x.shape());
  g.dgamma.assign(x.c(), 0.0);
  g.dbeta.assign(x.c(), 0.0);
  for (int c = 0; c < x.c(); ++c) {
    const double inv_std = 1.0 / std::sqrt(p.running_var[c] + p.eps);
    const double mean = p.running_mean[c];
    double dgamma = 0.0;
    double dbeta = 0.0;
    for (int n = 0; n < x.n(); ++n) {
      auto src = x.plane(n, c);
      auto grad = dy.plane(n, c);
      auto dst = g.dx.plane(n, c);
      for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i] = grad[i] * p.gamma[c] * inv_std;
        dgamma += grad[i] * ((src[i] - mean) * inv_std);
        dbeta += grad[i];
      }
    }
    g.dgamma[c] = dgamma;
    g.dbeta[c] = dbeta;
  }
  return g;
}

Tensor relu(const Tensor& x) {
  Tensor y(x.shape());
  auto src = x.data();
  auto dst = y.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > 0.0 ? src[i] : 0.0;
  return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& dy) {
  check_same_shape(x, dy, "relu_backward dy");
  Tensor dx(x.shape());
  auto src = x.data();
  auto grad = dy.data();
  auto dst = dx.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > 0.0 ? grad[i] : 0.0;
  return dx;
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.h() == 0 || x.w() == 0) {
    reject("global_avg_pool: zero-sized spatial input " + shape_string(x.shape()));
  }
  Tensor y(x.n(), x.c(), 1, 1);
  const double count = static_cast<double>(x.h()) * x.w();
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      double sum = 0.0;
      for (double v : x.plane(n, c)) sum += v;
      y.at(n, c, 0, 0) = sum / count;
    }
  }
  return y;
}

Tensor global_avg_pool_backward(const Tensor::Shape& x_shape,
                                const Tensor& dy) {
  if (x_shape[2] == 0 || x_shape[3] == 0) {
    reject("global_avg_pool_backward: zero-sized spatial input");
  }
  check_same_shape(Tensor(x_shape[0], x_shape[1], 1, 1), dy,
                   "global_avg_pool_backward dy");
  Tensor dx(x_shape);
  const double count = static_cast<double>(x_shape[2]) * x_shape[3];
  for (int n = 0; n < x_shape[0]; ++n) {
    for (int c = 0; c < x_shape[1]; ++c) {
      const double g = dy.at(n, c, 0, 0) / count;
      for (auto& v : dx.plane(n, c)) v = g;
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------

BilinearTap bilinear_tap(double y, double x, int height, int width) {
  y = std::clamp(y, 0.0, static_cast<double>(height - 1));
  x = std::clamp(x, 0.0, static_cast<double>(width - 1));
  BilinearTap t;
  t.y0 = static_cast<int>(std::floor(y));
  t.x0 = static_cast<int>(std::floor(x));
  t.y1 = std::min(t.y0 + 1, height - 1);
  t.x1 = std::min(t.x0 + 1, width - 1);
  const double ly = y - t.y0;
  const double lx = x - t.x0;
  t.wy0 = 1.0 - ly;
  t.wy1 = ly;
  t.wx0 = 1.0 - lx;
  t.wx1 = lx;
  return t;
}

double bilinear_sample(std::span<const double> plane, int height, int width,
                       double y, double x) {
  const BilinearTap t = bilinear_tap(y, x, height, width);
  const auto at = [&](int r, int c) {
    return plane[static_cast<std::size_t>(r) * width + c];
  };
  return t.wy0 * (t.wx0 * at(t.y0, t.x0) + t.wx1 * at(t.y0, t.x1)) +
         t.wy1 * (t.wx0 * at(t.y1, t.x0) + t.wx1 * at(t.y1, t.x1));
}

namespace {

double source_coord(int dst, int in, int out) {
  return (dst + 0.5) * (static_cast<double>(in) / out) - 0.5;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) {
    reject("bilinear_resize: output size must be >= 1, got " +
           std::to_string(out_h) + "x" + std::to_string(out_w));
  }
  if (x.h() < 1 || x.w() < 1) {
    reject("bilinear_resize: empty spatial input " + shape_string(x.shape()));
  }
  Tensor y(x.n(), x.c(), out_h, out_w);
  parallel_for(x.n() * x.c(), [&](int job) {
    const int n = job / x.c();
    const int c = job % x.c();
    auto src = x.plane(n, c);
    auto dst = y.plane(n, c);
    for (int oy = 0; oy < out_h; ++oy) {
      const double sy = source_coord(oy, x.h(), out_h);
      for (int ox = 0; ox < out_w; ++ox) {
        const double sx = source_coord(ox, x.w(), out_w);
        dst[static_cast<std::size_t>(oy) * out_w + ox] =
            bilinear_sample(src, x.h(), x.w(), sy, sx);
      }
    }
  });
  return y;
}

Tensor bilinear_resize_backward(const Tensor::Shape& x_shape,
                                const Tensor& dy) {
  if (dy.n() != x_shape[0] || dy.c() != x_shape[1]) {
    reject("bilinear_resize_backward: dy shape " + shape_string(dy.shape()) +
           " incompatible with input " + shape_string(x_shape));
  }
  Tensor dx(x_shape);
  const int in_h = x_shape[2];
  const int in_w = x_shape[3];
  parallel_for(dy.n() * dy.c(), [&](int job) {
    const int n = job / dy.c();
    const int c = job % dy.c();
    auto grad = dy.plane(n, c);
    auto dst = dx.plane(n, c);
    for (int oy = 0; oy < dy.h(); ++oy) {
      const double sy = source_coord(oy, in_h, dy.h());
      for (int ox = 0; ox < dy.w(); ++ox) {
        const double sx = source_coord(ox, in_w, dy.w());
        const BilinearTap t = bilinear_tap(sy, sx, in_h, in_w);
        const double g = grad[static_cast<std::size_t>(oy) * dy.w() + ox];
        dst[static_cast<std::size_t>(t.y0) * in_w + t.x0] += g * t.wy0 * t.wx0;
        dst[static_cast<std::size_t>(t.y0) * in_w + t.x1] += g * t.wy0 * t.wx1;
        dst[static_cast<std::size_t>(t.y1) * in_w + t.x0] += g * t.wy1 * t.wx0;
        dst[static_cast<std::size_t>(t.y1) * in_w + t.x1] += g * t.wy1 * t.wx1;
      }
    }
  });
  return dx;
}

// ---------------------------------------------------------------------------

CrossEntropyResult softmax_cross_entropy(const Tensor& logits,
                                         const LabelGrid& labels) {
  if (labels.n != logits.n() || labels.h != logits.h() ||
      labels.w != logits.w()) {
    reject("softmax_cross_entropy: label grid [" + std::to_string(labels.n) +
           ", " + std::to_string(labels.h) + ", " + std::to_string(labels.w) +
           "] does not match logits " + shape_string(logits.shape()));
  }
  if (labels.labels.size() !=
      static_cast<std::size_t>(labels.n) * labels.h * labels.w) {
    reject("softmax_cross_entropy: label payload length mismatch");
  }
  const int classes = logits.c();
  for (int v : labels.labels) {
    if (v != kIgnoreLabel && (v < 0 || v >= classes)) {
      reject("softmax_cross_entropy: label " + std::to_string(v) +
             " outside [0, " + std::to_string(classes) + ")");
    }
  }

  CrossEntropyResult r;
  r.dlogits = Tensor(logits.shape());
  std::size_t counted = 0;
  for (int v : labels.labels) counted += v != kIgnoreLabel;
  if (counted == 0) return r;

  const double inv = 1.0 / static_cast<double>(counted);
  double total = 0.0;
  std::vector<double> prob(classes);
  for (int n = 0; n < logits.n(); ++n) {
    for (int y = 0; y < logits.h(); ++y) {
      for (int x = 0; x < logits.w(); ++x) {
        const int label = labels.at(n, y, x);
        if (label == kIgnoreLabel) continue;
        double mx = logits.at(n, 0, y, x);
        for (int c = 1; c < classes; ++c) mx = std::max(mx, logits.at(n, c, y, x));
        double z = 0.0;
        for (int c = 0; c < classes; ++c) {
          prob[c] = std::exp(logits.at(n, c, y, x) - mx);
          z += prob[c];
        }
        total += (std::log(z) + mx) - logits.at(n, label, y, x);
        for (int c = 0; c < classes; ++c) {
          const double pc = prob[c] / z;
          r.dlogits.at(n, c, y, x) = (pc - (c == label ? 1.0 : 0.0)) * inv;
        }
      }
    }
  }
  r.loss = total * inv;
  return r;
}

}  // namespace prcnn
