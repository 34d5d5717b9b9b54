#include "prcnn/gce.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "prcnn/parallel.h"

namespace prcnn {

namespace {

std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t tag) {
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void expect_conv(const ConvParams& p, int c_in, int c_out, int kernel,
                 int dilation, const char* name) {
  const auto& s = p.weight.shape();
  if (s[0] != c_out || s[1] != c_in || s[2] != kernel || s[3] != kernel ||
      p.out_channels() != c_out) {
    throw std::invalid_argument(std::string(name) + ": expected weight [" +
                                std::to_string(c_out) + ", " +
                                std::to_string(c_in) + ", " +
                                std::to_string(kernel) + ", " +
                                std::to_string(kernel) + "], got " +
                                shape_string(s));
  }
  if (p.dilation != dilation || p.padding != (kernel / 2) * dilation ||
      p.stride != 1) {
    throw std::invalid_argument(std::string(name) + ": expected dilation " +
                                std::to_string(dilation) +
                                " with size-preserving padding");
  }
}

void check_channels(const Tensor& x, int channels, const char* op) {
  if (x.c() != channels) {
    throw std::invalid_argument(std::string(op) + ": input has " +
                                std::to_string(x.c()) + " channels, expected " +
                                std::to_string(channels));
  }
}

}  // namespace

ASPPParams make_aspp(int channels, std::uint64_t seed, double scale) {
  ASPPParams p;
  p.branch_1x1 = make_conv(channels, channels, 1, 1, 0, sub_seed(seed, 0), scale);
  p.branch_d6 = make_conv(channels, channels, 3, kAsppRates[0], kAsppRates[0],
                          sub_seed(seed, 1), scale);
  p.branch_d12 = make_conv(channels, channels, 3, kAsppRates[1], kAsppRates[1],
                           sub_seed(seed, 2), scale);
  p.branch_d18 = make_conv(channels, channels, 3, kAsppRates[2], kAsppRates[2],
                           sub_seed(seed, 3), scale);
  p.image_conv = make_conv(channels, channels, 1, 1, 0, sub_seed(seed, 4), scale);
  p.fuse = make_conv(5 * channels, channels, 1, 1, 0, sub_seed(seed, 5), scale);
  return p;
}

NonLocalParams make_nonlocal(int channels, std::uint64_t seed, double scale) {
  NonLocalParams p;
  p.theta = make_conv(channels, channels, 1, 1, 0, sub_seed(seed, 10), scale);
  p.phi = make_conv(channels, channels, 1, 1, 0, sub_seed(seed, 11), scale);
  p.g = make_conv(channels, channels, 1, 1, 0, sub_seed(seed, 12), scale);
  p.w_z = make_conv(channels, channels, 1, 1, 0, sub_seed(seed, 13), scale);
  p.bn = make_identity_bn(channels);
  std::fill(p.bn.gamma.begin(), p.bn.gamma.end(), 0.0);
  return p;
}

GCEParams make_gce(int channels, std::uint64_t seed, double scale) {
  return {make_aspp(channels, sub_seed(seed, 100), scale),
          make_nonlocal(channels, sub_seed(seed, 200), scale)};
}

void validate_aspp(const ASPPParams& p) {
  const int c = p.channels();
  if (c < 1) throw std::invalid_argument("aspp: channel count must be >= 1");
  expect_conv(p.branch_1x1, c, c, 1, 1, "aspp.branch_1x1");
  expect_conv(p.branch_d6, c, c, 3, kAsppRates[0], "aspp.branch_d6");
  expect_conv(p.branch_d12, c, c, 3, kAsppRates[1], "aspp.branch_d12");
  expect_conv(p.branch_d18, c, c, 3, kAsppRates[2], "aspp.branch_d18");
  expect_conv(p.image_conv, c, c, 1, 1, "aspp.image_conv");
  expect_conv(p.fuse, 5 * c, c, 1, 1, "aspp.fuse");
}

void validate_nonlocal(const NonLocalParams& p) {
  const int c = p.channels();
  if (c < 1) throw std::invalid_argument("nonlocal: channel count must be >= 1");
  expect_conv(p.theta, c, c, 1, 1, "nonlocal.theta");
  expect_conv(p.phi, c, c, 1, 1, "nonlocal.phi");
  expect_conv(p.g, c, c, 1, 1, "nonlocal.g");
  expect_conv(p.w_z, c, c, 1, 1, "nonlocal.w_z");
  if (p.bn.channels() != c) {
    throw std::invalid_argument("nonlocal.bn: expected " + std::to_string(c) +
                                " channels, got " +
                                std::to_string(p.bn.channels()));
  }
}

std::int64_t param_count(const ConvParams& p) { return p.param_count(); }
std::int64_t param_count(const BNParams& p) { return p.param_count(); }

std::int64_t param_count(const ASPPParams& p) {
  return param_count(p.branch_1x1) + param_count(p.branch_d6) +
         param_count(p.branch_d12) + param_count(p.branch_d18) +
         param_count(p.image_conv) + param_count(p.fuse);
}

std::int64_t param_count(const NonLocalParams& p) {
  return param_count(p.theta) + param_count(p.phi) + param_count(p.g) +
         param_count(p.w_z) + param_count(p.bn);
}

std::int64_t param_count(const GCEParams& p) {
  return param_count(p.aspp) + param_count(p.nonlocal);
}

// ---------------------------------------------------------------------------

Tensor aspp_forward(const Tensor& x, const ASPPParams& p, ASPPCache* cache) {
  validate_aspp(p);
  check_channels(x, p.channels(), "aspp_forward");
  const ConvParams* convs[4] = {&p.branch_1x1, &p.branch_d6, &p.branch_d12,
                                &p.branch_d18};
  std::array<Tensor, 4> pre;
  std::vector<Tensor> parts;
  parts.reserve(5);
  for (int b = 0; b < 4; ++b) {
    pre[b] = conv2d_forward(x, *convs[b]);
    parts.push_back(relu(pre[b]));
  }
  Tensor pooled = global_avg_pool(x);
  Tensor image_pre = conv2d_forward(pooled, p.image_conv);
  parts.push_back(bilinear_resize(relu(image_pre), x.h(), x.w()));
  Tensor concat = concat_channels(parts);
  Tensor fuse_pre = conv2d_forward(concat, p.fuse);
  Tensor y = relu(fuse_pre);
  if (cache != nullptr) {
    cache->x = x;
    cache->branch_pre = std::move(pre);
    cache->pooled = std::move(pooled);
    cache->image_pre = std::move(image_pre);
    cache->concat = std::move(concat);
    cache->fuse_pre = std::move(fuse_pre);
  }
  return y;
}

ASPPGrads aspp_backward(const ASPPCache& cache, const ASPPParams& p,
                        const Tensor& dy) {
  const Tensor& x = cache.x;
  const int c = p.channels();
  ASPPGrads g;
  g.fuse = conv2d_backward(cache.concat, p.fuse, relu_backward(cache.fuse_pre, dy));
  const std::array<int, 5> blocks{c, c, c, c, c};
  std::vector<Tensor> dparts = split_channels(g.fuse.dx, blocks);
  g.fuse.dx = Tensor();

  ConvGrads* grads[4] = {&g.branch_1x1, &g.branch_d6, &g.branch_d12,
                         &g.branch_d18};
  const ConvParams* convs[4] = {&p.branch_1x1, &p.branch_d6, &p.branch_d12,
                                &p.branch_d18};
  g.dx = Tensor(x.shape());
  for (int b = 0; b < 4; ++b) {
    *grads[b] = conv2d_backward(x, *convs[b],
                                relu_backward(cache.branch_pre[b], dparts[b]));
    add_inplace(g.dx, grads[b]->dx);
    grads[b]->dx = Tensor();
  }
  Tensor dimage = bilinear_resize_backward(cache.image_pre.shape(), dparts[4]);
  g.image_conv = conv2d_backward(cache.pooled, p.image_conv,
                                 relu_backward(cache.image_pre, dimage));
  add_inplace(g.dx, global_avg_pool_backward(x.shape(), g.image_conv.dx));
  g.image_conv.dx = Tensor();
  return g;
}

// ---------------------------------------------------------------------------

namespace {

// Row-softmax of theta^T phi for batch item n; theta/phi are [N, C, h, w].
std::vector<double> attention_from(const Tensor& theta, const Tensor& phi,
                                   int n) {
  const int channels = theta.c();
  const int m = theta.h() * theta.w();
  std::vector<double> a(static_cast<std::size_t>(m) * m, 0.0);
  parallel_for(m, [&](int i) {
    double* row = a.data() + static_cast<std::size_t>(i) * m;
    for (int c = 0; c < channels; ++c) {
      const double ti = theta.plane(n, c)[i];
      const double* pc = phi.plane(n, c).data();
      for (int j = 0; j < m; ++j) row[j] += ti * pc[j];
    }
    double mx = row[0];
    for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < m; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    for (int j = 0; j < m; ++j) row[j] /= z;
  });
  return a;
}

}  // namespace

Tensor nonlocal_forward(const Tensor& x, const NonLocalParams& p,
                        NonLocalCache* cache) {
  validate_nonlocal(p);
  check_channels(x, p.channels(), "nonlocal_forward");
  if (x.h() * x.w() < 1) {
    throw std::invalid_argument("nonlocal_forward: empty spatial extent");
  }
  const int m = x.h() * x.w();
  const int channels = x.c();
  Tensor theta = conv2d_forward(x, p.theta);
  Tensor phi = conv2d_forward(x, p.phi);
  Tensor gx = conv2d_forward(x, p.g);
  Tensor context(x.shape());
  std::vector<std::vector<double>> attention(x.n());
  for (int n = 0; n < x.n(); ++n) {
    attention[n] = attention_from(theta, phi, n);
    const auto& a = attention[n];
    parallel_for(channels, [&](int c) {
      const double* gc = gx.plane(n, c).data();
      auto out = context.plane(n, c);
      for (int i = 0; i < m; ++i) {
        const double* row = a.data() + static_cast<std::size_t>(i) * m;
        double acc = 0.0;
        for (int j = 0; j < m; ++j) acc += row[j] * gc[j];
        out[i] = acc;
      }
    });
  }
  Tensor z = conv2d_forward(context, p.w_z);
  Tensor y = batchnorm_inference(z, p.bn);
  auto yd = y.data();
  auto xd = x.data();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] = xd[i] + yd[i];
  if (cache != nullptr) {
    cache->x = x;
    cache->theta = std::move(theta);
    cache->phi = std::move(phi);
    cache->g = std::move(gx);
    cache->attention = std::move(attention);
    cache->context = std::move(context);
    cache->z = std::move(z);
  }
  return y;
}

NonLocalGrads nonlocal_backward(const NonLocalCache& cache,
                                const NonLocalParams& p, const Tensor& dy) {
  const Tensor& x = cache.x;
  check_same_shape(x, dy, "nonlocal_backward dy");
  const int m = x.h() * x.w();
  const int channels = x.c();
  NonLocalGrads g;
  g.bn = batchnorm_inference_backward(cache.z, p.bn, dy);
  g.w_z = conv2d_backward(cache.context, p.w_z, g.bn.dx);
  g.bn.dx = Tensor();
  const Tensor& dctx = g.w_z.dx;

  Tensor dtheta(x.shape());
  Tensor dphi(x.shape());
  Tensor dg(x.shape());
  for (int n = 0; n < x.n(); ++n) {
    const auto& a = cache.attention[n];
    // dG[c, j] = sum_i A[i, j] * dctx[c, i]
    parallel_for(channels, [&](int c) {
      const double* dc = dctx.plane(n, c).data();
      double* out = dg.plane(n, c).data();
      for (int i = 0; i < m; ++i) {
        const double* row = a.data() + static_cast<std::size_t>(i) * m;
        for (int j = 0; j < m; ++j) out[j] += row[j] * dc[i];
      }
    });
    // dS = A * (dA - rowsum(dA * A)), dA[i, j] = sum_c dctx[c, i] g[c, j]
    std::vector<double> ds(static_cast<std::size_t>(m) * m, 0.0);
    parallel_for(m, [&](int i) {
      double* drow = ds.data() + static_cast<std::size_t>(i) * m;
      for (int c = 0; c < channels; ++c) {
        const double dci = dctx.plane(n, c)[i];
        const double* gc = cache.g.plane(n, c).data();
        for (int j = 0; j < m; ++j) drow[j] += dci * gc[j];
      }
      const double* arow = a.data() + static_cast<std::size_t>(i) * m;
      double dot = 0.0;
      for (int j = 0; j < m; ++j) dot += drow[j] * arow[j];
      for (int j = 0; j < m; ++j) drow[j] = arow[j] * (drow[j] - dot);
    });
    // dTheta[c, i] = sum_j dS[i, j] phi[c, j];  dPhi[c, j] = sum_i dS[i, j] theta[c, i]
    parallel_for(channels, [&](int c) {
      const double* pc = cache.phi.plane(n, c).data();
      const double* tc = cache.theta.plane(n, c).data();
      double* dt = dtheta.plane(n, c).data();
      double* dp = dphi.plane(n, c).data();
      for (int i = 0; i < m; ++i) {
        const double* drow = ds.data() + static_cast<std::size_t>(i) * m;
        double acc = 0.0;
        for (int j = 0; j < m; ++j) {
          acc += drow[j] * pc[j];
          dp[j] += drow[j] * tc[i];
        }
        dt[i] = acc;
      }
    });
  }
  g.w_z.dx = Tensor();

  g.theta = conv2d_backward(x, p.theta, dtheta);
  g.phi = conv2d_backward(x, p.phi, dphi);
  g.g = conv2d_backward(x, p.g, dg);
  g.dx = dy;
  add_inplace(g.dx, g.theta.dx);
  add_inplace(g.dx, g.phi.dx);
  add_inplace(g.dx, g.g.dx);
  g.theta.dx = Tensor();
  g.phi.dx = Tensor();
  g.g.dx = Tensor();
  return g;
}

std::vector<double> nonlocal_attention(const Tensor& x, const NonLocalParams& p,
                                       int n) {
  validate_nonlocal(p);
  check_channels(x, p.channels(), "nonlocal_attention");
  if (n < 0 || n >= x.n()) {
    throw std::invalid_argument("nonlocal_attention: batch index out of range");
  }
  return attention_from(conv2d_forward(x, p.theta), conv2d_forward(x, p.phi), n);
}

// ---------------------------------------------------------------------------

Tensor gce_forward(const Tensor& x, const GCEParams& p, GCECache* cache) {
  if (cache == nullptr) {
    return nonlocal_forward(aspp_forward(x, p.aspp), p.nonlocal);
  }
  cache->aspp_out = aspp_forward(x, p.aspp, &cache->aspp);
  return nonlocal_forward(cache->aspp_out, p.nonlocal, &cache->nonlocal);
}

GCEGrads gce_backward(const GCECache& cache, const GCEParams& p,
                      const Tensor& dy) {
  GCEGrads g;
  g.nonlocal = nonlocal_backward(cache.nonlocal, p.nonlocal, dy);
  g.aspp = aspp_backward(cache.aspp, p.aspp, g.nonlocal.dx);
  g.dx = std::move(g.aspp.dx);
  return g;
}

}  // namespace prcnn
