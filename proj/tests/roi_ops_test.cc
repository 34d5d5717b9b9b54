#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>
#include <stdexcept>

#include "prcnn/gradcheck.h"
#include "prcnn/ops.h"
#include "prcnn/roi_ops.h"
#include "support/oracles.h"
#include "support/thread_guard.h"

using namespace prcnn;

namespace {

Box square(double side, double x = 0.0, double y = 0.0) {
  return Box{x, y, x + side, y + side, 1.0};
}

Box random_box(std::mt19937_64& rng, double w, double h) {
  std::uniform_real_distribution<double> ux(-0.2 * w, 1.2 * w);
  std::uniform_real_distribution<double> uy(-0.2 * h, 1.2 * h);
  double x1 = ux(rng), x2 = ux(rng), y1 = uy(rng), y2 = uy(rng);
  if (x1 > x2) std::swap(x1, x2);
  if (y1 > y2) std::swap(y1, y2);
  return Box{x1, y1, x2, y2, 1.0};
}

FeaturePyramid pyramid_for(int image, int channels, std::uint64_t seed) {
  FeaturePyramid p;
  for (int k = 2; k <= 5; ++k) {
    const int s = (image + FeaturePyramid::stride_of(k) - 1) / FeaturePyramid::stride_of(k);
    p.levels[k] = random_tensor({1, channels, s, s}, seed + k);
  }
  return p;
}

}  // namespace

TEST_CASE("fpn_assign_level: canonical examples and clamping") {
  CHECK(fpn_assign_level(square(224)) == 4);
  CHECK(fpn_assign_level(square(112)) == 3);
  CHECK(fpn_assign_level(square(10000)) == 5);
  CHECK(fpn_assign_level(square(1)) == 2);
  CHECK(fpn_assign_level(square(448)) == 5);
  CHECK_THROWS_AS(fpn_assign_level(Box{3, 3, 3, 9, 1.0}), std::invalid_argument);
}

TEST_CASE("fpn_assign_level is monotone in box area") {
  int prev = 0;
  for (double side = 1.0; side < 2000.0; side *= 1.07) {
    const int level = fpn_assign_level(square(side));
    CHECK(level >= prev);
    prev = level;
  }
}

TEST_CASE("validate_box rejects inverted boxes and out-of-range scores") {
  CHECK_NOTHROW(validate_box(Box{0, 0, 0, 0, 0.0}));
  CHECK_THROWS_AS(validate_box(Box{2, 0, 1, 1, 0.5}), std::invalid_argument);
  CHECK_THROWS_AS(validate_box(Box{0, 0, 1, 1, 1.5}), std::invalid_argument);
}

TEST_CASE("roi_align: hand-computed 2x2 bin center") {
  const Tensor f({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  const Tensor y = roi_align(f, Box{0, 0, 2, 2, 1.0}, 1, 1, 1);
  REQUIRE(y.shape() == Tensor::Shape{1, 1, 1, 1});
  CHECK(y.at(0, 0, 0, 0) == 2.5);
}

TEST_CASE("roi_align: constant feature gives a constant output for any box") {
  const Tensor f({1, 3, 9, 7}, -0.625);
  std::mt19937_64 rng(1);
  for (int t = 0; t < 20; ++t) {
    const Tensor y = roi_align(f, random_box(rng, 28, 36), 4, 7);
    for (double v : y.data()) CHECK(v == doctest::Approx(-0.625).epsilon(1e-15));
  }
}

TEST_CASE("roi_align: random 8x8 feature matches the brute-force oracle") {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 50; ++t) {
    const Tensor f = random_tensor({1, 2, 8, 8}, rng());
    const Box b = random_box(rng, 16, 16);
    const int sr = std::uniform_int_distribution<int>(1, 3)(rng);
    CAPTURE(t);
    CHECK(max_abs_diff(roi_align(f, b, 2, 4, sr), oracle::roi_align(f, b, 2, 4, sr)) < 1e-12);
  }
}

TEST_CASE("roi_align: reads the requested batch entry, rejects bad arguments") {
  const Tensor f = random_tensor({3, 2, 6, 6}, 3);
  const Box b{1.0, 0.5, 5.0, 4.5, 1.0};
  const Tensor second = slice_batch(f, 1, 2);
  CHECK(roi_align(f, b, 1, 3, 2, 1) == roi_align(second, b, 1, 3, 2, 0));
  CHECK_THROWS_AS(roi_align(f, b, 1, 3, 2, 3), std::invalid_argument);
  CHECK_THROWS_AS(roi_align(f, b, 1, 0), std::invalid_argument);
  CHECK_THROWS_AS(roi_align(f, b, 1, 3, 0), std::invalid_argument);
  CHECK_THROWS_AS(roi_align(Tensor(1, 0, 6, 6), b, 1, 3), std::invalid_argument);
}

TEST_CASE("roi_align is invariant under whole-stride translation") {
  std::mt19937_64 rng(4);
  const int stride = 4;
  for (int t = 0; t < 20; ++t) {
    const Tensor f = random_tensor({1, 2, 6, 6}, rng());
    // Embed f at offset (dy, dx) in a larger map and shift the box to match.
    const int dy = 1 + t % 3;
    const int dx = 2 + t % 2;
    Tensor big(1, 2, 6 + dy + 2, 6 + dx + 3, 0.0);
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) big.at(0, c, i + dy, j + dx) = f.at(0, c, i, j);
    // Keep the samples away from the border so clamping does not differ.
    std::uniform_real_distribution<double> u(2.5, 21.5);
    double x1 = u(rng), x2 = u(rng), y1 = u(rng), y2 = u(rng);
    if (x1 > x2) std::swap(x1, x2);
    if (y1 > y2) std::swap(y1, y2);
    const Box b{x1, y1, x2, y2, 1.0};
    const Box moved{x1 + dx * stride, y1 + dy * stride, x2 + dx * stride, y2 + dy * stride, 1.0};
    CHECK(max_abs_diff(roi_align(f, b, stride, 5), roi_align(big, moved, stride, 5)) < 1e-12);
  }
}

TEST_CASE("roi_align_backward: zeros, partition of unity and gradcheck") {
  const Tensor::Shape shape{1, 2, 7, 6};
  const Box b{1.3, 0.8, 9.6, 11.1, 1.0};
  const Tensor zero = roi_align_backward(shape, b, 2, 3, 2, Tensor(1, 2, 3, 3, 0.0));
  for (double v : zero.data()) CHECK(v == 0.0);

  Tensor dy(1, 1, 2, 2, 0.0);
  dy.at(0, 0, 1, 0) = 1.0;
  const Tensor df = roi_align_backward({1, 1, 6, 6}, b, 2, 2, 1, dy);
  double sum = 0.0;
  int touched = 0;
  for (double v : df.data()) {
    sum += v;
    touched += v != 0.0;
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(touched <= 4);

  Tensor f = random_tensor(shape, 5);
  const Tensor w = random_tensor({1, 2, 4, 4}, 6);
  const Tensor g = roi_align_backward(shape, b, 2, 4, 2, w);
  std::vector<GradProbe> probes{{"feature", f.data(), {g.data().begin(), g.data().end()}}};
  const auto r = numeric_gradcheck([&] { return weighted_sum(roi_align(f, b, 2, 4), w); }, probes);
  CHECK(r.max_relative_error < 1e-6);
}

TEST_CASE("pss_pool pools every box from P2") {
  const FeaturePyramid pyr = pyramid_for(512, 3, 7);
  const std::vector<Box> boxes{square(8, 3, 5), square(60, 10, 20), square(150, 40, 30),
                               square(250, 2, 1), square(480, 20, 16), Box{0, 0, 255, 40, 0.7}};
  std::set<int> fpn_levels;
  for (const auto& b : boxes) fpn_levels.insert(fpn_assign_level(b));
  CHECK(fpn_levels == std::set<int>{2, 3, 4, 5});

  const auto pooled = pss_pool(pyr, boxes, 14);
  REQUIRE(pooled.size() == boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    CHECK(pooled[i].level == 2);
    CHECK(pooled[i].features == roi_align(pyr.levels.at(2), boxes[i], 4, 14));
  }

  const auto by_level = fpn_pool(pyr, boxes, 7);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const int k = fpn_assign_level(boxes[i]);
    CHECK(by_level[i].level == k);
    CHECK(by_level[i].features ==
          roi_align(pyr.levels.at(k), boxes[i], FeaturePyramid::stride_of(k), 7));
  }
}

TEST_CASE("pss_pool: empty list, missing P2, thread independence") {
  const ThreadGuard guard;
  FeaturePyramid pyr = pyramid_for(64, 2, 8);
  CHECK(pss_pool(pyr, {}, 7).empty());
  std::vector<Box> boxes;
  std::mt19937_64 rng(9);
  for (int i = 0; i < 9; ++i) boxes.push_back(random_box(rng, 64, 64));
  set_num_threads(1);
  const auto one = pss_pool(pyr, boxes, 7);
  set_num_threads(4);
  const auto four = pss_pool(pyr, boxes, 7);
  for (std::size_t i = 0; i < boxes.size(); ++i) CHECK(one[i].features == four[i].features);
  pyr.levels.erase(2);
  CHECK_THROWS_AS(pss_pool(pyr, boxes, 7), std::invalid_argument);
}

TEST_CASE("subsample_parsing_rois keeps the top scores with index tie-break") {
  std::vector<Box> few(10, Box{0, 0, 1, 1, 0.5});
  CHECK(subsample_parsing_rois(few).size() == 10);

  std::vector<Box> many;
  std::vector<double> scores;
  std::mt19937_64 rng(10);
  for (int i = 0; i < 100; ++i) {
    const double s = (i * 37 % 100) / 100.0;
    many.push_back(Box{static_cast<double>(i), 0, i + 1.0, 1, s});
    scores.push_back(s);
  }
  std::shuffle(many.begin(), many.end(), rng);
  const auto top = subsample_parsing_rois(many);
  REQUIRE(top.size() == 32);
  std::sort(scores.rbegin(), scores.rend());
  for (int i = 0; i < 32; ++i) CHECK(top[i].score == scores[i]);

  std::vector<Box> tied;
  for (int i = 0; i < 50; ++i) tied.push_back(Box{static_cast<double>(i), 0, i + 1.0, 1, 0.3});
  const auto first = subsample_parsing_rois(tied);
  for (int i = 0; i < 32; ++i) CHECK(first[i].x1 == i);
  CHECK_THROWS_AS(subsample_parsing_rois(tied, 0), std::invalid_argument);
}

TEST_CASE("relative_scale and scale_cdf") {
  CHECK(relative_scale(Box{0, 0, 40, 30, 1}, 40, 30) == 1.0);
  CHECK(relative_scale(Box{5, 5, 25, 20, 1}, 40, 30) == 0.25);
  CHECK(relative_scale(Box{5, 5, 25, 20, 1}, 40, 30, ScaleMeasure::kSqrtAreaRatio) == 0.5);
  CHECK_THROWS_AS(relative_scale(Box{0, 0, 1, 1, 1}, 0, 30), std::invalid_argument);

  const auto one = scale_cdf({0.05, 0.15, 0.5}, {0.1});
  REQUIRE(one.size() == 1);
  CHECK(one[0].second == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(scale_cdf({1.0}, {1.0})[0].second == 1.0);

  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> scales(200);
  for (auto& s : scales) s = u(rng);
  std::vector<double> grid;
  for (int i = 0; i <= 20; ++i) grid.push_back(i / 20.0);
  const auto cdf = scale_cdf(scales, grid);
  double prev = 0.0;
  for (const auto& [g, f] : cdf) {
    CHECK(f >= prev);
    CHECK(f <= 1.0);
    prev = f;
  }
  CHECK(cdf.back().second == 1.0);
}
