#include "prcnn/branch.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>
#include <string>

#include "prcnn/gradcheck.h"

namespace prcnn {

namespace {

constexpr BranchVariant kVariants[] = {
    BranchVariant::kBaseline8Conv, BranchVariant::kGCEOnly,
    BranchVariant::kConv4GCE, BranchVariant::kGCEConv4,
    BranchVariant::kConv4GCEConv4};

struct LayerSpec {
  BranchLayer::Kind kind;
  int c_in;
  int c_out;
  int kernel;
};

std::vector<LayerSpec> layer_plan(const BranchConfig& cfg) {
  std::vector<LayerSpec> plan;
  int width = cfg.in_channels;
  const auto convs = [&](int count) {
    for (int i = 0; i < count; ++i) {
      plan.push_back({BranchLayer::Kind::kConvRelu, width, cfg.conv_width, 3});
      width = cfg.conv_width;
    }
  };
  const auto gce = [&] {
    if (width != cfg.gce_width) {
      plan.push_back({BranchLayer::Kind::kConvRelu, width, cfg.gce_width, 1});
      width = cfg.gce_width;
    }
    plan.push_back({BranchLayer::Kind::kGCE, width, width, 0});
  };
  switch (cfg.variant) {
    case BranchVariant::kBaseline8Conv:
      convs(8);
      break;
    case BranchVariant::kGCEOnly:
      gce();
      break;
    case BranchVariant::kConv4GCE:
      convs(4);
      gce();
      break;
    case BranchVariant::kGCEConv4:
      gce();
      convs(4);
      break;
    case BranchVariant::kConv4GCEConv4:
      convs(4);
      gce();
      convs(4);
      break;
  }
  return plan;
}

int plan_output_width(const BranchConfig& cfg,
                      const std::vector<LayerSpec>& plan) {
  return plan.empty() ? cfg.in_channels : plan.back().c_out;
}

std::int64_t conv_count(int c_in, int c_out, int kernel) {
  return static_cast<std::int64_t>(c_out) * c_in * kernel * kernel + c_out;
}

std::int64_t gce_count(int c) {
  const std::int64_t aspp = conv_count(c, c, 1) + 3 * conv_count(c, c, 3) +
                            conv_count(c, c, 1) + conv_count(5 * c, c, 1);
  const std::int64_t nonlocal = 4 * conv_count(c, c, 1) + 2 * c;
  return aspp + nonlocal;
}

std::uint64_t layer_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed ^ (0xd1b54a32d192ed03ULL * (index + 1));
  z = (z ^ (z >> 33)) * 0xff51afd7ed558ccdULL;
  return z ^ (z >> 33);
}

// Visits (name, param values, grad values) for a conv.
// P is ConvParams or const ConvParams.
template <typename P, typename Fn>
void visit_conv(const std::string& prefix, P& p, ConvGrads* g, Fn&& fn) {
  fn(prefix + ".weight", p.weight.data(),
     g ? std::span<double>(g->dweight.data()) : std::span<double>());
  fn(prefix + ".bias", std::span(p.bias),
     g ? std::span<double>(g->dbias) : std::span<double>());
}

template <typename P, typename Fn>
void visit_gce(const std::string& prefix, P& p, GCEGrads* g, Fn&& fn) {
  visit_conv(prefix + ".aspp.branch_1x1", p.aspp.branch_1x1,
             g ? &g->aspp.branch_1x1 : nullptr, fn);
  visit_conv(prefix + ".aspp.branch_d6", p.aspp.branch_d6,
             g ? &g->aspp.branch_d6 : nullptr, fn);
  visit_conv(prefix + ".aspp.branch_d12", p.aspp.branch_d12,
             g ? &g->aspp.branch_d12 : nullptr, fn);
  visit_conv(prefix + ".aspp.branch_d18", p.aspp.branch_d18,
             g ? &g->aspp.branch_d18 : nullptr, fn);
  visit_conv(prefix + ".aspp.image_conv", p.aspp.image_conv,
             g ? &g->aspp.image_conv : nullptr, fn);
  visit_conv(prefix + ".aspp.fuse", p.aspp.fuse, g ? &g->aspp.fuse : nullptr,
             fn);
  visit_conv(prefix + ".nonlocal.theta", p.nonlocal.theta,
             g ? &g->nonlocal.theta : nullptr, fn);
  visit_conv(prefix + ".nonlocal.phi", p.nonlocal.phi,
             g ? &g->nonlocal.phi : nullptr, fn);
  visit_conv(prefix + ".nonlocal.g", p.nonlocal.g, g ? &g->nonlocal.g : nullptr,
             fn);
  visit_conv(prefix + ".nonlocal.w_z", p.nonlocal.w_z,
             g ? &g->nonlocal.w_z : nullptr, fn);
  fn(prefix + ".nonlocal.bn.gamma", std::span(p.nonlocal.bn.gamma),
     g ? std::span<double>(g->nonlocal.bn.dgamma) : std::span<double>());
  fn(prefix + ".nonlocal.bn.beta", std::span(p.nonlocal.bn.beta),
     g ? std::span<double>(g->nonlocal.bn.dbeta) : std::span<double>());
}

}  // namespace

std::string_view variant_name(BranchVariant v) {
  switch (v) {
    case BranchVariant::kBaseline8Conv: return "Baseline8Conv";
    case BranchVariant::kGCEOnly: return "GCEOnly";
    case BranchVariant::kConv4GCE: return "Conv4_GCE";
    case BranchVariant::kGCEConv4: return "GCE_Conv4";
    case BranchVariant::kConv4GCEConv4: return "Conv4_GCE_Conv4";
  }
  throw std::invalid_argument("unknown branch variant");
}

BranchVariant parse_variant(std::string_view name) {
  for (auto v : kVariants) {
    if (variant_name(v) == name) return v;
  }
  throw std::invalid_argument("unknown branch variant '" + std::string(name) +
                              "'");
}

std::vector<BranchVariant> all_variants() {
  return {std::begin(kVariants), std::end(kVariants)};
}

void validate_config(const BranchConfig& cfg) {
  variant_name(cfg.variant);
  if (cfg.roi_resolution != 14 && cfg.roi_resolution != 32 &&
      cfg.roi_resolution != 64) {
    throw std::invalid_argument("roi_resolution must be 14, 32 or 64, got " +
                                std::to_string(cfg.roi_resolution));
  }
  if (cfg.num_classes < 2) {
    throw std::invalid_argument("num_classes must be >= 2");
  }
  if (cfg.conv_width < 1 || cfg.gce_width < 1 || cfg.in_channels < 1) {
    throw std::invalid_argument("channel widths must be >= 1");
  }
}

ParamCounts branch_param_count(const BranchConfig& cfg) {
  validate_config(cfg);
  ParamCounts counts;
  const auto plan = layer_plan(cfg);
  for (const auto& spec : plan) {
    counts.body += spec.kind == BranchLayer::Kind::kGCE
                       ? gce_count(spec.c_in)
                       : conv_count(spec.c_in, spec.c_out, spec.kernel);
  }
  const int last = plan_output_width(cfg, plan);
  counts.tail = conv_count(last, last, 2) + conv_count(last, cfg.num_classes, 1);
  return counts;
}

Branch Branch::build(const BranchConfig& cfg, std::uint64_t seed,
                     double init_scale) {
  validate_config(cfg);
  Branch b;
  b.config_ = cfg;
  const auto plan = layer_plan(cfg);
  std::uint64_t index = 0;
  for (const auto& spec : plan) {
    BranchLayer layer;
    layer.kind = spec.kind;
    if (spec.kind == BranchLayer::Kind::kGCE) {
      layer.gce = make_gce(spec.c_in, layer_seed(seed, index), init_scale);
    } else {
      layer.conv = make_conv(spec.c_in, spec.c_out, spec.kernel, 1,
                             spec.kernel / 2, layer_seed(seed, index),
                             init_scale);
    }
    b.body_.push_back(std::move(layer));
    ++index;
  }
  const int last = plan_output_width(cfg, plan);
  b.deconv_ = make_deconv(last, last, 2, 2, layer_seed(seed, 1000), init_scale);
  b.classifier_ = make_conv(last, cfg.num_classes, 1, 1, 0,
                            layer_seed(seed, 1001), init_scale);
  return b;
}

Tensor Branch::forward(const Tensor& pooled, BranchCache* cache) const {
  const int r = config_.roi_resolution;
  if (pooled.c() != config_.in_channels) {
    throw std::invalid_argument("branch_forward: input has " +
                                std::to_string(pooled.c()) +
                                " channels, expected " +
                                std::to_string(config_.in_channels));
  }
  if (pooled.h() != r || pooled.w() != r) {
    throw std::invalid_argument("branch_forward: input resolution " +
                                std::to_string(pooled.h()) + "x" +
                                std::to_string(pooled.w()) +
                                " != roi_resolution " + std::to_string(r));
  }
  if (pooled.n() == 0) {
    return Tensor(0, config_.num_classes, 4 * r, 4 * r);
  }
  if (cache != nullptr) {
    *cache = BranchCache{};
    cache->input = pooled;
  }
  Tensor h = pooled;
  for (const auto& layer : body_) {
    if (cache != nullptr) cache->layer_inputs.push_back(h);
    if (layer.kind == BranchLayer::Kind::kGCE) {
      GCECache* gc = nullptr;
      if (cache != nullptr) gc = &cache->gce.emplace_back();
      h = gce_forward(h, layer.gce, gc);
    } else {
      Tensor pre = conv2d_forward(h, layer.conv);
      h = relu(pre);
      if (cache != nullptr) cache->conv_pre.push_back(std::move(pre));
    }
  }
  Tensor deconv_pre = deconv2d_forward(h, deconv_);
  Tensor act = relu(deconv_pre);
  Tensor logits_small = conv2d_forward(act, classifier_);
  Tensor logits = bilinear_resize(logits_small, 2 * logits_small.h(),
                                  2 * logits_small.w());
  if (cache != nullptr) {
    cache->deconv_in = std::move(h);
    cache->deconv_pre = std::move(deconv_pre);
    cache->classifier_in = std::move(act);
    cache->classifier_out = std::move(logits_small);
  }
  return logits;
}

BranchGrads Branch::backward(const BranchCache& cache,
                             const Tensor& dlogits) const {
  BranchGrads out;
  Tensor d = bilinear_resize_backward(cache.classifier_out.shape(), dlogits);
  ConvGrads classifier = conv2d_backward(cache.classifier_in, classifier_, d);
  d = relu_backward(cache.deconv_pre, classifier.dx);
  ConvGrads deconv = deconv2d_backward(cache.deconv_in, deconv_, d);
  d = std::move(deconv.dx);

  std::vector<ConvGrads> conv_grads(body_.size());
  std::vector<GCEGrads> gce_grads(body_.size());
  std::size_t conv_idx = cache.conv_pre.size();
  std::size_t gce_idx = cache.gce.size();
  for (std::size_t i = body_.size(); i-- > 0;) {
    const auto& layer = body_[i];
    if (layer.kind == BranchLayer::Kind::kGCE) {
      gce_grads[i] = gce_backward(cache.gce[--gce_idx], layer.gce, d);
      d = std::move(gce_grads[i].dx);
    } else {
      conv_grads[i] = conv2d_backward(cache.layer_inputs[i], layer.conv,
                                      relu_backward(cache.conv_pre[--conv_idx], d));
      d = std::move(conv_grads[i].dx);
    }
  }
  out.dx = std::move(d);

  // Flatten in named_parameters() order.
  const auto collect = [&](const std::string&, auto,
                           std::span<double> grad) {
    out.params.emplace_back(grad.begin(), grad.end());
  };
  for (std::size_t i = 0; i < body_.size(); ++i) {
    const std::string prefix = "body." + std::to_string(i);
    if (body_[i].kind == BranchLayer::Kind::kGCE) {
      visit_gce(prefix, body_[i].gce, &gce_grads[i], collect);
    } else {
      visit_conv(prefix, body_[i].conv, &conv_grads[i], collect);
    }
  }
  visit_conv("tail.deconv", deconv_, &deconv, collect);
  visit_conv("tail.classifier", classifier_, &classifier, collect);
  return out;
}

ParamCounts Branch::param_count() const {
  ParamCounts counts;
  for (const auto& layer : body_) {
    counts.body += layer.kind == BranchLayer::Kind::kGCE
                       ? prcnn::param_count(layer.gce)
                       : prcnn::param_count(layer.conv);
  }
  counts.tail = prcnn::param_count(deconv_) + prcnn::param_count(classifier_);
  return counts;
}

std::vector<NamedParam> Branch::named_parameters() {
  std::vector<NamedParam> params;
  const auto collect = [&](const std::string& name, std::span<double> values,
                           std::span<double>) {
    params.push_back({name, values});
  };
  for (std::size_t i = 0; i < body_.size(); ++i) {
    const std::string prefix = "body." + std::to_string(i);
    if (body_[i].kind == BranchLayer::Kind::kGCE) {
      visit_gce(prefix, body_[i].gce, nullptr, collect);
    } else {
      visit_conv(prefix, body_[i].conv, nullptr, collect);
    }
  }
  visit_conv("tail.deconv", deconv_, nullptr, collect);
  visit_conv("tail.classifier", classifier_, nullptr, collect);
  return params;
}

BenchStats bench_forward(const BranchConfig& cfg, int batch, int repeats,
                         int warmup, std::uint64_t seed) {
  if (repeats < 3) throw std::invalid_argument("bench_forward: repeats must be >= 3");
  if (batch < 1) throw std::invalid_argument("bench_forward: batch must be >= 1");
  if (warmup < 0) throw std::invalid_argument("bench_forward: warmup must be >= 0");
  const Branch branch = Branch::build(cfg, seed);
  const Tensor input = random_tensor(
      {batch, cfg.in_channels, cfg.roi_resolution, cfg.roi_resolution},
      seed + 1);
  for (int i = 0; i < warmup; ++i) branch.forward(input);

  BenchStats stats;
  for (int i = 0; i < repeats; ++i) {
    const auto start = std::chrono::steady_clock::now();
    const Tensor out = branch.forward(input);
    const auto stop = std::chrono::steady_clock::now();
    stats.samples_ms.push_back(
        std::chrono::duration<double, std::milli>(stop - start).count());
  }
  double sum = 0.0;
  for (double s : stats.samples_ms) sum += s;
  stats.mean_ms = sum / repeats;
  std::vector<double> sorted = stats.samples_ms;
  std::sort(sorted.begin(), sorted.end());
  const auto rank = [&](double q) {
    const auto idx = static_cast<std::size_t>(std::ceil(q * repeats)) - 1;
    return sorted[std::min(idx, sorted.size() - 1)];
  };
  stats.p50_ms = rank(0.50);
  stats.p95_ms = rank(0.95);
  return stats;
}

}  // namespace prcnn
