#include <doctest.h>

#include <cmath>
#include <limits>
#include <stdexcept>

#include "prcnn/metrics.h"
#include "support/oracles.h"

using namespace prcnn;

namespace {

LabelMap grid(int h, int w, std::vector<int> v) { return LabelMap{h, w, std::move(v)}; }

InstanceParsing instance(LabelMap labels, double x, double y, double score = 1.0) {
  InstanceParsing inst;
  inst.box = Box{x, y, x + labels.width, y + labels.height, 1.0};
  inst.labels = std::move(labels);
  inst.score = score;
  return inst;
}

DensePosePoint point(int part, double u, double v, int x = 0, int y = 0) {
  return DensePosePoint{part, u, v, x, y};
}

bool has_gt_parts(const std::vector<EvalImage>& images) {
  for (const auto& img : images)
    for (const auto& g : img.gts)
      for (int v : g.labels.labels)
        if (v != 0 && v != 255) return true;
  return false;
}

}  // namespace

// ---------------------------------------------------------------------------
// Pasting and mIoU

TEST_CASE("paste_multi_person: single, empty and overlapping instances") {
  const auto single = paste_multi_person({instance(grid(1, 2, {2, 0}), 1, 1)}, 4, 3);
  CHECK(single.labels == std::vector<int>{0, 0, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0});

  const auto empty = paste_multi_person({}, 3, 2);
  CHECK(empty.labels == std::vector<int>(6, 0));

  const auto low = instance(grid(1, 3, {1, 1, 1}), 0, 0, 0.5);
  const auto high = instance(grid(1, 2, {2, 0}), 1, 0, 0.9);
  const auto both = paste_multi_person({low, high}, 3, 1);
  CHECK(both.labels == std::vector<int>{1, 2, 1});

  // Only the ordering of scores matters.
  auto low2 = low;
  auto high2 = high;
  low2.score = 0.01;
  high2.score = 0.02;
  CHECK(paste_multi_person({low2, high2}, 3, 1).labels == both.labels);

  // Parts hanging off the image are clipped.
  const auto clipped = paste_multi_person({instance(grid(2, 2, {1, 2, 3, 4}), -1, -1)}, 2, 2);
  CHECK(clipped.labels == std::vector<int>{4, 0, 0, 0});
}

TEST_CASE("miou: identity, disjoint and the 2x2 toy") {
  const auto a = grid(2, 2, {1, 1, 0, 0});
  CHECK(miou(a, a, 3).mean == 1.0);

  const auto r = miou(grid(2, 2, {1, 0, 0, 0}), a, 2);
  CHECK(r.per_class_iou[1] == 0.5);
  CHECK(r.per_class_iou[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(r.mean == doctest::Approx(0.5833333333333333).epsilon(1e-15));

  const auto disjoint = miou(grid(1, 2, {1, 0}), grid(1, 2, {0, 1}), 2);
  CHECK(disjoint.per_class_iou[1] == 0.0);

  const auto ignored = miou(grid(1, 3, {1, 255, 2}), grid(1, 3, {1, 2, 255}), 3);
  CHECK(ignored.mean == 1.0);
  CHECK(std::isnan(ignored.per_class_iou[2]));

  CHECK_THROWS_AS(miou(grid(1, 2, {0, 0}), grid(2, 1, {0, 0}), 2), std::invalid_argument);
  CHECK_THROWS_AS(miou(grid(1, 1, {3}), grid(1, 1, {0}), 3), std::invalid_argument);
}

TEST_CASE("miou matches the hand count on every pair of 3-class grids up to 4 cells") {
  std::int64_t pairs = 0;
  for (int h = 1; h <= 4; ++h) {
    for (int w = 1; h * w <= 4; ++w) {
      const int cells = h * w;
      int total = 1;
      for (int i = 0; i < 2 * cells; ++i) total *= 3;
      LabelMap pred{h, w, std::vector<int>(cells)};
      LabelMap gt{h, w, std::vector<int>(cells)};
      for (int code = 0; code < total; ++code) {
        int k = code;
        for (int i = 0; i < cells; ++i, k /= 3) pred.labels[i] = k % 3;
        for (int i = 0; i < cells; ++i, k /= 3) gt.labels[i] = k % 3;
        const double lib = miou(pred, gt, 3).mean;
        if (std::abs(lib - oracle::miou(pred, gt, 3)) > 1e-12) {
          FAIL("mismatch at h=" << h << " w=" << w << " code=" << code);
        }
        // Swapping pred and gt leaves IoU unchanged.
        if (lib != miou(gt, pred, 3).mean) FAIL("asymmetric at code=" << code);
        ++pairs;
      }
    }
  }
  CHECK(pairs == 9 + 2 * 81 + 2 * 729 + 3 * 6561);
}

TEST_CASE("dataset-level mIoU pools counts across images") {
  const std::vector<LabelMap> preds{grid(1, 2, {1, 1}), grid(1, 2, {0, 0})};
  const std::vector<LabelMap> gts{grid(1, 2, {1, 0}), grid(1, 2, {0, 1})};
  const auto r = miou(std::span<const LabelMap>(preds), std::span<const LabelMap>(gts), 2);
  // Class 0: inter 1, union 3. Class 1: inter 1, union 3.
  CHECK(r.per_class_iou[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(r.per_class_iou[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

// ---------------------------------------------------------------------------
// Instance scores

TEST_CASE("app_score examples") {
  const auto g = instance(grid(2, 2, {1, 1, 2, 0}), 0, 0);
  CHECK(app_score(g, g, 3) == 1.0);
  CHECK(app_score(instance(grid(1, 1, {1}), 5, 5), g, 3) == 0.0);
  // Part 1: IoU 1/2, part 2 only in GT.
  const auto p = instance(grid(2, 2, {1, 0, 0, 0}), 0, 0);
  CHECK(app_score(p, g, 3) == 0.25);
  const auto bg = instance(grid(1, 1, {0}), 0, 0);
  CHECK(app_score(bg, bg, 3) == 0.0);
}

TEST_CASE("interpolated_ap conventions") {
  CHECK(interpolated_ap({}, 0) == 1.0);
  CHECK(interpolated_ap({{0.5, false}}, 0) == 0.0);
  CHECK(interpolated_ap({}, 3) == 0.0);
  CHECK(interpolated_ap({{0.9, true}}, 1) == 1.0);
  // TP, FP, TP over 2 GTs: precision 1 up to recall 0.5, 2/3 up to 1.
  const double expect = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
  CHECK(interpolated_ap({{0.9, true}, {0.8, false}, {0.7, true}}, 2) ==
        doctest::Approx(expect).epsilon(1e-15));
}

TEST_CASE("greedy_match visits by score and prefers the lower GT index on ties") {
  const QualityMatrix q{{0.6, 0.6}, {0.9, 0.2}};
  const auto m = greedy_match({0.5, 0.9}, q, 0.5);
  CHECK(m.pred_to_gt == std::vector<int>{1, 0});
  const auto tie = greedy_match({0.5, 0.5}, {{0.7, 0.7}, {0.7, 0.7}}, 0.5);
  CHECK(tie.pred_to_gt == std::vector<int>{0, 1});
  CHECK(greedy_match({0.9}, {{0.49}}, 0.5).pred_to_gt == std::vector<int>{-1});
}

TEST_CASE("ap_p, ap_p_vol and pcp50 hand examples") {
  const auto g = instance(grid(2, 3, {1, 1, 2, 2, 3, 0}), 1, 1);
  auto p = g;
  p.score = 0.8;
  CHECK(ap_p({p}, {g}, 4, 0.5) == 1.0);
  CHECK(ap_p_vol({p}, {g}, 4) == 1.0);
  CHECK(pcp50({p}, {g}, 4) == 1.0);
  CHECK(ap_p({}, {g}, 4, 0.5) == 0.0);
  CHECK(pcp50({}, {g}, 4) == 0.0);
  CHECK(ap_p({}, {}, 4, 0.5) == 1.0);
  CHECK(ap_p({p}, {}, 4, 0.5) == 0.0);

  // Four parts, two predicted exactly, two missed: app 0.5 so it matches.
  const auto four = instance(grid(1, 4, {1, 2, 3, 4}), 0, 0);
  const auto half = instance(grid(1, 4, {1, 2, 0, 0}), 0, 0, 0.7);
  CHECK(app_score(half, four, 5) == 0.5);
  CHECK(pcp50({half}, {four}, 5) == 0.5);

  CHECK_THROWS_AS(pcp50({p}, {instance(grid(1, 1, {0}), 0, 0)}, 4), std::invalid_argument);
}

TEST_CASE("ap_p is non-increasing in threshold and invariant to score rescaling") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto scene = oracle::random_scene(seed, false);
    double prev = 2.0;
    for (double t : app_vol_thresholds()) {
      const double ap = ap_p(scene.images, scene.classes, t);
      CHECK(ap <= prev);
      prev = ap;
    }
    const double vol = ap_p_vol(scene.images, scene.classes);
    for (auto& img : scene.images)
      for (auto& p : img.preds) p.score *= 0.37;
    CHECK(ap_p_vol(scene.images, scene.classes) == vol);
  }
}

// ---------------------------------------------------------------------------
// GPS

TEST_CASE("gps examples and validation") {
  GPSConfig cfg;
  CHECK(gps({point(1, 0.2, 0.3)}, {point(1, 0.2, 0.3)}, cfg) == 1.0);

  const double d = cfg.kappa * std::sqrt(2.0 * std::log(2.0));
  CHECK(gps({point(1, 0.1 + d, 0.4)}, {point(1, 0.1, 0.4)}, cfg) ==
        doctest::Approx(0.5).epsilon(1e-12));
  CHECK(gps({point(1, 0.0, 0.0), point(2, 0.0, 0.0)}, {point(1, 0.0, 0.0), point(1, 1.0, 1.0)},
            cfg) == 0.5);
  CHECK(gps({point(1, 0, 0), point(1, 0, 0)}, {point(1, 0, 0), point(1, 1, 1)}, cfg) ==
        doctest::Approx(0.5).epsilon(1e-3));

  CHECK_THROWS_AS(gps({}, {}, cfg), std::invalid_argument);
  GPSConfig bad;
  bad.kappa = 0.0;
  CHECK_THROWS_AS(validate_gps_config(bad), std::invalid_argument);
}

TEST_CASE("gps decreases with distance and ignores point order") {
  GPSConfig cfg;
  const std::vector<DensePosePoint> gt{point(1, 0.5, 0.5), point(2, 0.1, 0.9), point(1, 0.3, 0.3)};
  auto pred = gt;
  double prev = gps(pred, gt, cfg);
  for (int k = 1; k < 10; ++k) {
    pred[1].u = 0.1 + 0.05 * k;
    const double s = gps(pred, gt, cfg);
    CHECK(s < prev);
    prev = s;
  }
  std::vector<DensePosePoint> pred_r(pred.rbegin(), pred.rend());
  std::vector<DensePosePoint> gt_r(gt.rbegin(), gt.rend());
  CHECK(gps(pred_r, gt_r, cfg) == doctest::Approx(prev).epsilon(1e-15));
}

TEST_CASE("geodesic lookup table") {
  GeodesicTable t;
  t.parts = 1;
  t.grid = 2;
  t.distances = std::vector<double>(16, 0.0);
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b) t.distances[a * 4 + b] = std::abs(a - b) * 0.1;
  CHECK(t.vertex_of(point(1, 0.0, 0.0)) == 0);
  CHECK(t.vertex_of(point(1, 0.9, 0.2)) == 2);
  CHECK(t.distance(point(1, 0, 0), point(1, 1, 1)) == doctest::Approx(0.3).epsilon(1e-15));
  GPSConfig cfg;
  cfg.source = GPSConfig::Source::kLookupTable;
  cfg.table = t;
  CHECK(surface_distance(point(1, 0, 0), point(1, 0, 1), cfg) ==
        doctest::Approx(0.1).epsilon(1e-15));
  CHECK_THROWS_AS(t.vertex_of(point(2, 0, 0)), std::invalid_argument);
}

TEST_CASE("densepose_ap: perfect, hopeless and crafted two-instance cases") {
  GPSConfig cfg;
  InstanceParsing g1;
  g1.box = Box{0, 0, 4, 4, 1};
  g1.points = {point(1, 0.2, 0.2, 1, 1), point(2, 0.7, 0.1, 2, 3)};
  InstanceParsing g2;
  g2.box = Box{4, 0, 8, 4, 1};
  g2.points = {point(1, 0.5, 0.5, 5, 1), point(1, 0.6, 0.4, 6, 2)};
  auto p1 = g1;
  auto p2 = g2;
  p1.score = 0.9;
  p2.score = 0.6;
  const auto perfect = densepose_ap({p1, p2}, {g1, g2}, cfg);
  CHECK(perfect.ap == 1.0);
  CHECK(perfect.ap50 == 1.0);
  CHECK(perfect.ap75 == 1.0);

  auto w1 = p1;
  auto w2 = p2;
  for (auto& q : w1.points) q.part_index = 3 - q.part_index;
  for (auto& q : w2.points) q.part_index = 2;
  CHECK(densepose_ap({w1, w2}, {g1, g2}, cfg).ap == 0.0);

  auto c2 = p2;
  c2.points[1].u = 0.9;
  c2.score = 0.95;
  const EvalImage img{{p1, c2}, {g1, g2}};
  const auto lib = densepose_ap({img}, cfg);
  const auto ref = oracle::densepose_ap({img}, cfg.kappa);
  CHECK(std::abs(lib.ap - ref.ap) < 1e-12);
  CHECK(std::abs(lib.ap50 - ref.ap50) < 1e-12);
  CHECK(std::abs(lib.ap75 - ref.ap75) < 1e-12);
}

// ---------------------------------------------------------------------------
// Randomized scenes against the brute-force oracle

TEST_CASE("100 random scenes match the brute-force oracle to 1e-12") {
  GPSConfig cfg;
  int pcp_checked = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    CAPTURE(seed);
    const auto s = oracle::random_scene(1000 + seed, true);
    for (double t : app_vol_thresholds()) {
      CHECK(std::abs(ap_p(s.images, s.classes, t) - oracle::ap_p(s.images, s.classes, t)) < 1e-12);
    }
    CHECK(std::abs(ap_p_vol(s.images, s.classes) - oracle::ap_p_vol(s.images, s.classes)) <
          1e-12);
    if (has_gt_parts(s.images)) {
      ++pcp_checked;
      CHECK(std::abs(pcp50(s.images, s.classes) - oracle::pcp50(s.images, s.classes, false)) <
            1e-12);
      CHECK(std::abs(pcp50(s.images, s.classes, PcpMode::kPerInstanceMean) -
                     oracle::pcp50(s.images, s.classes, true)) < 1e-12);
    } else {
      CHECK_THROWS_AS(pcp50(s.images, s.classes), std::invalid_argument);
    }
    const auto lib = densepose_ap(s.images, cfg);
    const auto ref = oracle::densepose_ap(s.images, cfg.kappa);
    CHECK(std::abs(lib.ap - ref.ap) < 1e-12);
    CHECK(std::abs(lib.ap50 - ref.ap50) < 1e-12);
    CHECK(std::abs(lib.ap75 - ref.ap75) < 1e-12);
  }
  CHECK(pcp_checked > 80);
}
