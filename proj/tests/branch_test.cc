#include <doctest.h>

#include <filesystem>
#include <stdexcept>

#include "prcnn/branch.h"
#include "prcnn/cli/formats.h"
#include "prcnn/gradcheck.h"
#include "support/thread_guard.h"

using namespace prcnn;

namespace {

BranchConfig toy(BranchVariant v, int resolution, int classes = 3) {
  BranchConfig cfg;
  cfg.variant = v;
  cfg.roi_resolution = resolution;
  cfg.num_classes = classes;
  cfg.in_channels = 3;
  cfg.conv_width = 4;
  cfg.gce_width = 4;
  return cfg;
}

std::int64_t conv3(std::int64_t c_in, std::int64_t c_out) { return 9 * c_in * c_out + c_out; }

}  // namespace

TEST_CASE("Baseline8Conv at 14x14 emits 56x56 logits at full width") {
  BranchConfig cfg;
  cfg.variant = BranchVariant::kBaseline8Conv;
  cfg.roi_resolution = 14;
  cfg.num_classes = 20;
  const Branch b = Branch::build(cfg, 1);
  const Tensor y = b.forward(random_tensor({1, 256, 14, 14}, 2));
  CHECK(y.shape() == Tensor::Shape{1, 20, 56, 56});
  CHECK(y.all_finite());
}

TEST_CASE("every variant emits 4R at R in {14, 32, 64}") {
  for (BranchVariant v : all_variants()) {
    for (int r : {14, 32, 64}) {
      CAPTURE(variant_name(v));
      CAPTURE(r);
      const Branch b = Branch::build(toy(v, r), 3);
      const Tensor y = b.forward(random_tensor({2, 3, r, r}, 4));
      CHECK(y.shape() == Tensor::Shape{2, 3, 4 * r, 4 * r});
    }
  }
}

TEST_CASE("variant names round-trip and unknown names are rejected") {
  for (BranchVariant v : all_variants()) CHECK(parse_variant(variant_name(v)) == v);
  CHECK(variant_name(BranchVariant::kConv4GCEConv4) == "Conv4_GCE_Conv4");
  CHECK_THROWS_AS(parse_variant("GCE_Conv8"), std::invalid_argument);
}

TEST_CASE("configuration and input validation") {
  BranchConfig cfg = toy(BranchVariant::kGCEOnly, 14);
  cfg.roi_resolution = 16;
  CHECK_THROWS_AS(validate_config(cfg), std::invalid_argument);
  cfg = toy(BranchVariant::kGCEOnly, 14, 1);
  CHECK_THROWS_AS(validate_config(cfg), std::invalid_argument);

  const Branch b = Branch::build(toy(BranchVariant::kGCEOnly, 14), 5);
  CHECK_THROWS_AS(b.forward(Tensor(1, 3, 15, 15)), std::invalid_argument);
  CHECK_THROWS_AS(b.forward(Tensor(1, 2, 14, 14)), std::invalid_argument);
  const Tensor empty = b.forward(Tensor(0, 3, 14, 14));
  CHECK(empty.shape() == Tensor::Shape{0, 3, 56, 56});
}

TEST_CASE("parameter counts at canonical widths") {
  BranchConfig cfg;
  cfg.num_classes = 20;
  const auto count = [&](BranchVariant v) {
    cfg.variant = v;
    return branch_param_count(cfg);
  };
  const std::int64_t baseline = conv3(256, 512) + 7 * conv3(512, 512);
  CHECK(baseline == 17'698'816);
  CHECK(count(BranchVariant::kBaseline8Conv).body == baseline);
  CHECK(count(BranchVariant::kGCEOnly).body == 2'493'440);
  CHECK(count(BranchVariant::kGCEOnly).body < baseline);
  CHECK(count(BranchVariant::kGCEOnly).body < count(BranchVariant::kGCEConv4).body);
  CHECK(count(BranchVariant::kGCEConv4).body < count(BranchVariant::kConv4GCEConv4).body);

  // Conv4_GCE needs a 1x1 512 -> 256 transition into the GCE block.
  const std::int64_t conv4 = conv3(256, 512) + 3 * conv3(512, 512);
  CHECK(count(BranchVariant::kConv4GCE).body == conv4 + (512 * 256 + 256) + 2'493'440);

  // Deconv 2x2 stride 2 plus the 1x1 classifier.
  const auto tail = [](std::int64_t c) { return c * c * 4 + c + c * 20 + 20; };
  CHECK(count(BranchVariant::kGCEConv4).tail == tail(512));
  CHECK(count(BranchVariant::kGCEOnly).tail == tail(256));
}

TEST_CASE("declared counts agree with allocated parameters") {
  for (BranchVariant v : all_variants()) {
    const BranchConfig cfg = toy(v, 14);
    Branch b = Branch::build(cfg, 6);
    std::int64_t allocated = 0;
    for (const auto& p : b.named_parameters()) allocated += static_cast<std::int64_t>(p.values.size());
    CAPTURE(variant_name(v));
    CHECK(b.param_count().total() == allocated);
    CHECK(branch_param_count(cfg).total() == allocated);
  }
}

TEST_CASE("same seed builds bit-identical parameters, a different seed does not") {
  const BranchConfig cfg = toy(BranchVariant::kConv4GCEConv4, 14);
  Branch a = Branch::build(cfg, 7);
  Branch b = Branch::build(cfg, 7);
  Branch c = Branch::build(cfg, 8);
  const auto pa = a.named_parameters();
  const auto pb = b.named_parameters();
  const auto pc = c.named_parameters();
  REQUIRE(pa.size() == pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(std::ranges::equal(pa[i].values, pb[i].values));
    any_diff = any_diff || !std::ranges::equal(pa[i].values, pc[i].values);
  }
  CHECK(any_diff);
}

TEST_CASE("forward of a batch equals per-RoI forwards bit-exactly") {
  for (BranchVariant v : all_variants()) {
    Branch b = Branch::build(toy(v, 14), 9, 0.3);
    for (auto& layer : b.mutable_body()) {
      if (layer.kind == BranchLayer::Kind::kGCE) {
        std::fill(layer.gce.nonlocal.bn.gamma.begin(), layer.gce.nonlocal.bn.gamma.end(), 0.8);
      }
    }
    const Tensor x = random_tensor({3, 3, 14, 14}, 10);
    const Tensor all = b.forward(x);
    for (int n = 0; n < 3; ++n) {
      CAPTURE(variant_name(v));
      CHECK(slice_batch(all, n, n + 1) == b.forward(slice_batch(x, n, n + 1)));
    }
  }
}

TEST_CASE("forward is identical across thread counts") {
  const ThreadGuard guard;
  Branch b = Branch::build(toy(BranchVariant::kGCEConv4, 14), 11, 0.3);
  const Tensor x = random_tensor({2, 3, 14, 14}, 12);
  set_num_threads(1);
  const Tensor ref = b.forward(x);
  for (int t : {2, 4, 6}) {
    set_num_threads(t);
    CHECK(b.forward(x) == ref);
  }
}

TEST_CASE("GCE_Conv4 end-to-end gradient through the softmax loss") {
  BranchConfig cfg = toy(BranchVariant::kGCEConv4, 14, 2);
  Branch b = Branch::build(cfg, 13, 0.4);
  Tensor x = random_tensor({1, 3, 14, 14}, 14);
  LabelGrid labels{1, 56, 56, std::vector<int>(56 * 56)};
  for (std::size_t i = 0; i < labels.labels.size(); ++i) labels.labels[i] = (i * 7 / 13) % 2;

  BranchCache cache;
  const auto loss_of = [&] { return softmax_cross_entropy(b.forward(x), labels).loss; };
  const auto ce = softmax_cross_entropy(b.forward(x, &cache), labels);
  const BranchGrads g = b.backward(cache, ce.dlogits);

  auto named = b.named_parameters();
  std::vector<GradProbe> probes{{"x", x.data(), {g.dx.data().begin(), g.dx.data().end()}}};
  for (std::size_t i = 0; i < named.size(); i += 5) {
    probes.push_back({named[i].name, named[i].values, g.params[i]});
  }
  GradcheckOptions opt;
  opt.abs_floor = 1e-4;
  opt.max_entries_per_probe = 12;
  const auto r = numeric_gradcheck(loss_of, probes, opt);
  CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("parameter blob round trip") {
  Branch a = Branch::build(toy(BranchVariant::kConv4GCE, 14), 15);
  Branch b = Branch::build(toy(BranchVariant::kConv4GCE, 14), 16);
  const auto path = std::filesystem::temp_directory_path() / "prcnn_branch_test.prb";
  cli::save_param_blob(path, a.named_parameters());
  cli::load_param_blob(path, b.named_parameters());
  const Tensor x = random_tensor({1, 3, 14, 14}, 17);
  CHECK(a.forward(x) == b.forward(x));

  Branch other = Branch::build(toy(BranchVariant::kGCEOnly, 14), 18);
  CHECK_THROWS(cli::load_param_blob(path, other.named_parameters()));
  std::filesystem::remove(path);
}

TEST_CASE("bench_forward records the requested number of samples") {
  const BenchStats s = bench_forward(toy(BranchVariant::kGCEOnly, 14), 1, 10, 2);
  CHECK(s.samples_ms.size() == 10);
  CHECK(s.p50_ms <= s.p95_ms);
  for (double v : s.samples_ms) CHECK(v >= 0.0);
  CHECK_THROWS_AS(bench_forward(toy(BranchVariant::kGCEOnly, 14), 1, 2), std::invalid_argument);
}
