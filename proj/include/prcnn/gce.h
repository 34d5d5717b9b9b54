#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "prcnn/ops.h"
#include "prcnn/tensor.h"

namespace prcnn {

// Geometric and Context Encoding: an ASPP context block followed by an
// embedded-Gaussian non-local block. All convolutions share one width,
// 256 in the canonical configuration.

inline constexpr int kGceChannels = 256;
inline constexpr std::array<int, 3> kAsppRates{6, 12, 18};

struct ASPPParams {
  ConvParams branch_1x1;
  ConvParams branch_d6;
  ConvParams branch_d12;
  ConvParams branch_d18;
  ConvParams image_conv;  // applied to the globally pooled feature
  ConvParams fuse;        // 5*C -> C

  int channels() const { return branch_1x1.weight.c(); }
};

struct NonLocalParams {
  ConvParams theta;
  ConvParams phi;
  ConvParams g;
  ConvParams w_z;
  BNParams bn;

  int channels() const { return theta.weight.c(); }
};

struct GCEParams {
  ASPPParams aspp;
  NonLocalParams nonlocal;
};

ASPPParams make_aspp(int channels, std::uint64_t seed, double scale = 0.01);
// BN gamma starts at zero, so a fresh block is an identity residual.
NonLocalParams make_nonlocal(int channels, std::uint64_t seed,
                             double scale = 0.01);
GCEParams make_gce(int channels, std::uint64_t seed, double scale = 0.01);

// Throws std::invalid_argument if the ASPP rates, paddings, kernel sizes or
// channel counts are not the fixed layout.
void validate_aspp(const ASPPParams& p);
void validate_nonlocal(const NonLocalParams& p);

std::int64_t param_count(const ConvParams& p);
std::int64_t param_count(const BNParams& p);
std::int64_t param_count(const ASPPParams& p);
std::int64_t param_count(const NonLocalParams& p);
std::int64_t param_count(const GCEParams& p);

// ---------------------------------------------------------------------------
// ASPP

struct ASPPCache {
  Tensor x;
  std::array<Tensor, 4> branch_pre;  // 1x1, d6, d12, d18 before relu
  Tensor pooled;                     // [n, C, 1, 1]
  Tensor image_pre;                  // image conv before relu
  Tensor concat;                     // after branch relus, 5*C channels
  Tensor fuse_pre;                   // fuse conv before relu
};

struct ASPPGrads {
  Tensor dx;
  ConvGrads branch_1x1;
  ConvGrads branch_d6;
  ConvGrads branch_d12;
  ConvGrads branch_d18;
  ConvGrads image_conv;
  ConvGrads fuse;
};

Tensor aspp_forward(const Tensor& x, const ASPPParams& p,
                    ASPPCache* cache = nullptr);
ASPPGrads aspp_backward(const ASPPCache& cache, const ASPPParams& p,
                        const Tensor& dy);

// ---------------------------------------------------------------------------
// Non-local block, y = x + BN(W_z(softmax(theta^T phi) g))

struct NonLocalCache {
  Tensor x;
  Tensor theta;
  Tensor phi;
  Tensor g;
  // Row-softmax attention per batch item, m x m with m = h * w.
  std::vector<std::vector<double>> attention;
  Tensor context;
  Tensor z;  // W_z(context), BN input
};

struct NonLocalGrads {
  Tensor dx;
  ConvGrads theta;
  ConvGrads phi;
  ConvGrads g;
  ConvGrads w_z;
  BNGrads bn;
};

Tensor nonlocal_forward(const Tensor& x, const NonLocalParams& p,
                        NonLocalCache* cache = nullptr);
NonLocalGrads nonlocal_backward(const NonLocalCache& cache,
                                const NonLocalParams& p, const Tensor& dy);

// Attention matrix of batch item `n` (row-major m x m).
std::vector<double> nonlocal_attention(const Tensor& x, const NonLocalParams& p,
                                       int n);

// ---------------------------------------------------------------------------

struct GCECache {
  ASPPCache aspp;
  Tensor aspp_out;
  NonLocalCache nonlocal;
};

struct GCEGrads {
  Tensor dx;
  ASPPGrads aspp;
  NonLocalGrads nonlocal;
};

Tensor gce_forward(const Tensor& x, const GCEParams& p,
                   GCECache* cache = nullptr);
GCEGrads gce_backward(const GCECache& cache, const GCEParams& p,
                      const Tensor& dy);

}  // namespace prcnn
