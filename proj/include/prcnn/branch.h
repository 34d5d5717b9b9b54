#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prcnn/gce.h"
#include "prcnn/ops.h"
#include "prcnn/tensor.h"

namespace prcnn {

// Parsing-branch topologies: the eight-conv baseline and the decoupled
// before-GCE / GCE / after-GCE arrangements.
enum class BranchVariant {
  kBaseline8Conv,
  kGCEOnly,
  kConv4GCE,
  kGCEConv4,
  kConv4GCEConv4,
};

std::string_view variant_name(BranchVariant v);
// Accepts the names returned by variant_name(); throws otherwise.
BranchVariant parse_variant(std::string_view name);
std::vector<BranchVariant> all_variants();

struct BranchConfig {
  BranchVariant variant = BranchVariant::kGCEConv4;
  int roi_resolution = 32;  // one of 14, 32, 64
  int num_classes = 20;
  int conv_width = 512;     // plain 3x3 conv stacks
  int gce_width = kGceChannels;
  int in_channels = 256;    // pooled FPN feature width
};

// Throws std::invalid_argument on an invalid configuration.
void validate_config(const BranchConfig& cfg);

struct BranchLayer {
  enum class Kind { kConvRelu, kGCE };
  Kind kind = Kind::kConvRelu;
  ConvParams conv;  // kConvRelu
  GCEParams gce;    // kGCE
};

struct ParamCounts {
  std::int64_t body = 0;
  std::int64_t tail = 0;
  std::int64_t total() const { return body + tail; }
};

// Exact weight + bias count computed from the declared layer shapes,
// without allocating parameters. The tail is deconv + classifier.
ParamCounts branch_param_count(const BranchConfig& cfg);

struct NamedParam {
  std::string name;
  std::span<double> values;
};

struct BranchCache {
  Tensor input;
  std::vector<Tensor> layer_inputs;
  std::vector<Tensor> conv_pre;  // conv output before relu (conv layers)
  std::vector<GCECache> gce;     // GCE caches (GCE layers)
  Tensor deconv_in;
  Tensor deconv_pre;
  Tensor classifier_in;
  Tensor classifier_out;
};

struct BranchGrads {
  Tensor dx;
  // Same order and sizes as Branch::named_parameters().
  std::vector<std::vector<double>> params;
};

class Branch {
 public:
  // Seeded uniform initialization in [-init_scale, init_scale]. Non-local
  // BN gamma starts at zero.
  static Branch build(const BranchConfig& cfg, std::uint64_t seed,
                      double init_scale = 0.01);

  const BranchConfig& config() const { return config_; }
  const std::vector<BranchLayer>& body() const { return body_; }
  std::vector<BranchLayer>& mutable_body() { return body_; }
  const ConvParams& deconv() const { return deconv_; }
  const ConvParams& classifier() const { return classifier_; }

  // pooled: [n, in_channels, R, R] -> logits [n, num_classes, 4R, 4R].
  Tensor forward(const Tensor& pooled, BranchCache* cache = nullptr) const;
  BranchGrads backward(const BranchCache& cache, const Tensor& dlogits) const;

  ParamCounts param_count() const;
  std::vector<NamedParam> named_parameters();

 private:
  BranchConfig config_;
  std::vector<BranchLayer> body_;
  ConvParams deconv_;
  ConvParams classifier_;
};

struct BenchStats {
  std::vector<double> samples_ms;
  double mean_ms = 0.0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;
};

// Times Branch::forward on synthetic input. `warmup` runs are discarded.
BenchStats bench_forward(const BranchConfig& cfg, int batch, int repeats,
                         int warmup = 1, std::uint64_t seed = 0);

}  // namespace prcnn
