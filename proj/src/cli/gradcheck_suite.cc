#include "prcnn/cli/gradcheck_suite.h"

#include <algorithm>
#include <random>
#include <stdexcept>

#include "prcnn/branch.h"
#include "prcnn/gce.h"
#include "prcnn/ops.h"
#include "prcnn/roi_ops.h"

namespace prcnn::cli {

namespace {

constexpr double kElementaryTolerance = 1e-6;
constexpr double kCompositeTolerance = 1e-4;
// Composite targets probe an evenly strided subset of each tensor. Their
// deeper graphs leave some entries with gradients near the central-difference
// rounding noise (about 1e-10 here), and one with an exactly zero gradient
// (the phi bias, which softmax cancels), so the relative-error denominator
// is floored at 1e-4.
const GradcheckOptions kComposite{
    .abs_floor = 1e-4, .max_entries_per_probe = 40, .region = {}};

std::vector<double> to_vec(const Tensor& t) {
  return {t.data().begin(), t.data().end()};
}

GradProbe probe(std::string name, Tensor& values, const Tensor& grad) {
  return {std::move(name), values.data(), to_vec(grad)};
}

GradProbe probe(std::string name, std::vector<double>& values,
                const std::vector<double>& grad) {
  return {std::move(name), std::span<double>(values), grad};
}

// FNV-1a over the relu activation pattern (pre-activation > 0).
class SignHash {
 public:
  void add(const Tensor& pre) {
    for (double v : pre.data()) {
      h_ = (h_ ^ (v > 0.0 ? 1u : 0u)) * 1099511628211ull;
    }
  }
  void add(const ASPPCache& c) {
    for (const auto& t : c.branch_pre) add(t);
    add(c.image_pre);
    add(c.fuse_pre);
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 14695981039346656037ull;
};

void randomize_gamma(GCEParams& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(0.5, 1.5);
  for (auto& g : p.nonlocal.bn.gamma) g = dist(rng);
  for (auto& b : p.nonlocal.bn.beta) b = dist(rng) - 1.0;
}

GradcheckResult check_conv2d(std::uint64_t seed) {
  Tensor x = random_tensor({2, 3, 7, 7}, seed);
  ConvParams dilated = make_conv(3, 4, 3, 2, 2, seed + 1, 0.5);
  ConvParams strided = make_conv(3, 2, 3, 1, 1, seed + 2, 0.5);
  strided.stride = 2;
  const Tensor w1 = random_tensor(conv2d_forward(x, dilated).shape(), seed + 3);
  const Tensor w2 = random_tensor(conv2d_forward(x, strided).shape(), seed + 4);
  const auto loss = [&] {
    return weighted_sum(conv2d_forward(x, dilated), w1) +
           weighted_sum(conv2d_forward(x, strided), w2);
  };
  ConvGrads g1 = conv2d_backward(x, dilated, w1);
  const ConvGrads g2 = conv2d_backward(x, strided, w2);
  add_inplace(g1.dx, g2.dx);
  std::vector<GradProbe> probes{
      probe("x", x, g1.dx),
      probe("dilated.weight", dilated.weight, g1.dweight),
      probe("dilated.bias", dilated.bias, g1.dbias),
      probe("strided.weight", strided.weight, g2.dweight),
      probe("strided.bias", strided.bias, g2.dbias)};
  return numeric_gradcheck(loss, probes);
}

GradcheckResult check_deconv2d(std::uint64_t seed) {
  Tensor x = random_tensor({2, 3, 4, 4}, seed);
  ConvParams p = make_deconv(3, 2, 2, 2, seed + 1, 0.5);
  const Tensor w = random_tensor(deconv2d_forward(x, p).shape(), seed + 2);
  const auto loss = [&] { return weighted_sum(deconv2d_forward(x, p), w); };
  const ConvGrads g = deconv2d_backward(x, p, w);
  std::vector<GradProbe> probes{probe("x", x, g.dx),
                                probe("weight", p.weight, g.dweight),
                                probe("bias", p.bias, g.dbias)};
  return numeric_gradcheck(loss, probes);
}

GradcheckResult check_batchnorm(std::uint64_t seed) {
  Tensor x = random_tensor({2, 3, 4, 4}, seed);
  BNParams p = make_identity_bn(3);
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<double> dist(0.5, 1.5);
  for (int c = 0; c < 3; ++c) {
    p.gamma[c] = dist(rng);
    p.beta[c] = dist(rng) - 1.0;
    p.running_mean[c] = dist(rng) - 1.0;
    p.running_var[c] = dist(rng);
  }
  const Tensor w = random_tensor(x.shape(), seed + 2);
  const auto loss = [&] { return weighted_sum(batchnorm_inference(x, p), w); };
  const BNGrads g = batchnorm_inference_backward(x, p, w);
  std::vector<GradProbe> probes{probe("x", x, g.dx),
                                probe("gamma", p.gamma, g.dgamma),
                                probe("beta", p.beta, g.dbeta)};
  return numeric_gradcheck(loss, probes);
}

GradcheckResult check_relu(std::uint64_t seed) {
  // Inputs stay at least 0.1 away from the kink.
  Tensor x = random_tensor({2, 3, 5, 5}, seed, 0.1, 1.0);
  std::mt19937_64 rng(seed + 1);
  for (auto& v : x.data()) {
    if (rng() & 1) v = -v;
  }
  const Tensor w = random_tensor(x.shape(), seed + 2);
  const auto loss = [&] { return weighted_sum(relu(x), w); };
  std::vector<GradProbe> probes{probe("x", x, relu_backward(x, w))};
  return numeric_gradcheck(loss, probes);
}

GradcheckResult check_gap(std::uint64_t seed) {
  Tensor x = random_tensor({2, 3, 5, 4}, seed);
  const Tensor w = random_tensor({2, 3, 1, 1}, seed + 1);
  const auto loss = [&] { return weighted_sum(global_avg_pool(x), w); };
  std::vector<GradProbe> probes{
      probe("x", x, global_avg_pool_backward(x.shape(), w))};
  return numeric_gradcheck(loss, probes);
}

GradcheckResult check_bilinear(std::uint64_t seed) {
  Tensor x = random_tensor({1, 2, 3, 5}, seed);
  const Tensor w_up = random_tensor({1, 2, 7, 11}, seed + 1);
  const Tensor w_down = random_tensor({1, 2, 2, 3}, seed + 2);
  const auto loss = [&] {
    return weighted_sum(bilinear_resize(x, 7, 11), w_up) +
           weighted_sum(bilinear_resize(x, 2, 3), w_down);
  };
  Tensor dx = bilinear_resize_backward(x.shape(), w_up);
  add_inplace(dx, bilinear_resize_backward(x.shape(), w_down));
  std::vector<GradProbe> probes{probe("x", x, dx)};
  return numeric_gradcheck(loss, probes);
}

GradcheckResult check_softmax_ce(std::uint64_t seed) {
  Tensor logits = random_tensor({2, 4, 3, 3}, seed, -2.0, 2.0);
  LabelGrid labels{2, 3, 3, {}};
  std::mt19937_64 rng(seed + 1);
  for (int i = 0; i < 18; ++i) {
    labels.labels.push_back(i % 7 == 3 ? kIgnoreLabel : static_cast<int>(rng() % 4));
  }
  const auto loss = [&] { return softmax_cross_entropy(logits, labels).loss; };
  const auto r = softmax_cross_entropy(logits, labels);
  std::vector<GradProbe> probes{probe("logits", logits, r.dlogits)};
  return numeric_gradcheck(loss, probes);
}

GradcheckResult check_roi_align(std::uint64_t seed) {
  Tensor feature = random_tensor({1, 2, 9, 9}, seed);
  const Box box{2.3, 1.7, 13.9, 15.2, 1.0};
  const int stride = 2;
  const int out = 4;
  const Tensor w = random_tensor({1, 2, out, out}, seed + 1);
  const auto loss = [&] {
    return weighted_sum(roi_align(feature, box, stride, out, 2), w);
  };
  std::vector<GradProbe> probes{probe(
      "feature", feature,
      roi_align_backward(feature.shape(), box, stride, out, 2, w))};
  return numeric_gradcheck(loss, probes);
}

GradcheckResult check_nonlocal(std::uint64_t seed) {
  Tensor x = random_tensor({2, 4, 4, 5}, seed);
  NonLocalParams p = make_nonlocal(4, seed + 1, 0.5);
  std::mt19937_64 rng(seed + 2);
  std::uniform_real_distribution<double> dist(0.5, 1.5);
  for (auto& g : p.bn.gamma) g = dist(rng);
  for (auto& b : p.bn.beta) b = dist(rng) - 1.0;
  const Tensor w = random_tensor(x.shape(), seed + 3);
  const auto loss = [&] { return weighted_sum(nonlocal_forward(x, p), w); };
  NonLocalCache cache;
  nonlocal_forward(x, p, &cache);
  const NonLocalGrads g = nonlocal_backward(cache, p, w);
  std::vector<GradProbe> probes{
      probe("x", x, g.dx),
      probe("theta.weight", p.theta.weight, g.theta.dweight),
      probe("theta.bias", p.theta.bias, g.theta.dbias),
      probe("phi.weight", p.phi.weight, g.phi.dweight),
      probe("phi.bias", p.phi.bias, g.phi.dbias),
      probe("g.weight", p.g.weight, g.g.dweight),
      probe("g.bias", p.g.bias, g.g.dbias),
      probe("w_z.weight", p.w_z.weight, g.w_z.dweight),
      probe("w_z.bias", p.w_z.bias, g.w_z.dbias),
      probe("bn.gamma", p.bn.gamma, g.bn.dgamma),
      probe("bn.beta", p.bn.beta, g.bn.dbeta)};
  return numeric_gradcheck(loss, probes, kComposite);
}

GradcheckResult check_aspp(std::uint64_t seed) {
  Tensor x = random_tensor({1, 3, 6, 6}, seed);
  ASPPParams p = make_aspp(3, seed + 1, 0.5);
  const Tensor w = random_tensor(x.shape(), seed + 2);
  ASPPCache probe_cache;
  const auto loss = [&] { return weighted_sum(aspp_forward(x, p, &probe_cache), w); };
  ASPPCache cache;
  aspp_forward(x, p, &cache);
  const ASPPGrads g = aspp_backward(cache, p, w);
  std::vector<GradProbe> probes{
      probe("x", x, g.dx),
      probe("branch_1x1.weight", p.branch_1x1.weight, g.branch_1x1.dweight),
      probe("branch_d6.weight", p.branch_d6.weight, g.branch_d6.dweight),
      probe("branch_d12.weight", p.branch_d12.weight, g.branch_d12.dweight),
      probe("branch_d18.weight", p.branch_d18.weight, g.branch_d18.dweight),
      probe("image_conv.weight", p.image_conv.weight, g.image_conv.dweight),
      probe("image_conv.bias", p.image_conv.bias, g.image_conv.dbias),
      probe("fuse.weight", p.fuse.weight, g.fuse.dweight),
      probe("fuse.bias", p.fuse.bias, g.fuse.dbias)};
  GradcheckOptions options = kComposite;
  options.region = [&] {
    SignHash h;
    h.add(probe_cache);
    return h.value();
  };
  return numeric_gradcheck(loss, probes, options);
}

GradcheckResult check_gce(std::uint64_t seed) {
  Tensor x = random_tensor({1, 4, 8, 8}, seed);
  GCEParams p = make_gce(4, seed + 1, 0.5);
  randomize_gamma(p, seed + 2);
  const Tensor w = random_tensor(x.shape(), seed + 3);
  GCECache probe_cache;
  const auto loss = [&] { return weighted_sum(gce_forward(x, p, &probe_cache), w); };
  GCECache cache;
  gce_forward(x, p, &cache);
  const GCEGrads g = gce_backward(cache, p, w);
  std::vector<GradProbe> probes{
      probe("x", x, g.dx),
      probe("aspp.branch_d6.weight", p.aspp.branch_d6.weight,
            g.aspp.branch_d6.dweight),
      probe("aspp.image_conv.weight", p.aspp.image_conv.weight,
            g.aspp.image_conv.dweight),
      probe("aspp.fuse.weight", p.aspp.fuse.weight, g.aspp.fuse.dweight),
      probe("nonlocal.theta.weight", p.nonlocal.theta.weight,
            g.nonlocal.theta.dweight),
      probe("nonlocal.phi.weight", p.nonlocal.phi.weight,
            g.nonlocal.phi.dweight),
      probe("nonlocal.g.weight", p.nonlocal.g.weight, g.nonlocal.g.dweight),
      probe("nonlocal.w_z.weight", p.nonlocal.w_z.weight,
            g.nonlocal.w_z.dweight),
      probe("nonlocal.bn.gamma", p.nonlocal.bn.gamma, g.nonlocal.bn.dgamma)};
  GradcheckOptions options = kComposite;
  options.region = [&] {
    SignHash h;
    h.add(probe_cache.aspp);
    return h.value();
  };
  return numeric_gradcheck(loss, probes, options);
}

// Toy-width branch at R = 14 with 2 classes, trained through the per-pixel
// softmax loss.
GradcheckResult check_branch(BranchVariant variant, std::uint64_t seed) {
  BranchConfig cfg;
  cfg.variant = variant;
  cfg.roi_resolution = 14;
  cfg.num_classes = 2;
  cfg.in_channels = 3;
  cfg.conv_width = 4;
  cfg.gce_width = 4;
  Branch branch = Branch::build(cfg, seed, 0.4);
  for (std::size_t i = 0; i < branch.body().size(); ++i) {
    auto& layer = branch.mutable_body()[i];
    if (layer.kind == BranchLayer::Kind::kGCE) randomize_gamma(layer.gce, seed + 10 + i);
  }
  Tensor x = random_tensor({1, 3, 14, 14}, seed + 1);
  LabelGrid labels{1, 56, 56, {}};
  std::mt19937_64 rng(seed + 2);
  for (int i = 0; i < 56 * 56; ++i) {
    labels.labels.push_back(rng() % 10 == 0 ? kIgnoreLabel : static_cast<int>(rng() % 2));
  }
  BranchCache probe_cache;
  const auto loss = [&] {
    return softmax_cross_entropy(branch.forward(x, &probe_cache), labels).loss;
  };
  BranchCache cache;
  const Tensor logits = branch.forward(x, &cache);
  const auto ce = softmax_cross_entropy(logits, labels);
  BranchGrads g = branch.backward(cache, ce.dlogits);

  std::vector<GradProbe> probes{probe("x", x, g.dx)};
  auto params = branch.named_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    probes.push_back({params[i].name, params[i].values, std::move(g.params[i])});
  }
  GradcheckOptions options = kComposite;
  options.region = [&] {
    SignHash h;
    for (const auto& t : probe_cache.conv_pre) h.add(t);
    for (const auto& c : probe_cache.gce) h.add(c.aspp);
    h.add(probe_cache.deconv_pre);
    return h.value();
  };
  return numeric_gradcheck(loss, probes, options);
}

}  // namespace

std::vector<GradcheckTarget> gradcheck_targets() {
  std::vector<GradcheckTarget> t{
      {"conv2d", true},         {"deconv2d", true},
      {"batchnorm", true},      {"relu", true},
      {"global_avg_pool", true}, {"bilinear_resize", true},
      {"softmax_cross_entropy", true}, {"roi_align", true},
      {"nonlocal", false},      {"aspp", false},
      {"gce", false}};
  for (auto v : all_variants()) {
    t.push_back({"branch:" + std::string(variant_name(v)), false});
  }
  return t;
}

bool is_gradcheck_target(const std::string& name) {
  const auto targets = gradcheck_targets();
  return std::any_of(targets.begin(), targets.end(),
                     [&](const auto& t) { return t.name == name; });
}

double default_tolerance(const GradcheckTarget& target) {
  return target.elementary ? kElementaryTolerance : kCompositeTolerance;
}

GradcheckResult run_gradcheck_target(const std::string& name,
                                     std::uint64_t seed) {
  if (name == "conv2d") return check_conv2d(seed);
  if (name == "deconv2d") return check_deconv2d(seed);
  if (name == "batchnorm") return check_batchnorm(seed);
  if (name == "relu") return check_relu(seed);
  if (name == "global_avg_pool") return check_gap(seed);
  if (name == "bilinear_resize") return check_bilinear(seed);
  if (name == "softmax_cross_entropy") return check_softmax_ce(seed);
  if (name == "roi_align") return check_roi_align(seed);
  if (name == "nonlocal") return check_nonlocal(seed);
  if (name == "aspp") return check_aspp(seed);
  if (name == "gce") return check_gce(seed);
  constexpr std::string_view kBranch = "branch:";
  if (name.starts_with(kBranch)) {
    return check_branch(parse_variant(name.substr(kBranch.size())), seed);
  }
  throw std::invalid_argument("unknown gradcheck target '" + name + "'");
}

}  // namespace prcnn::cli
