#include "prcnn/gradcheck.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace prcnn {

namespace {

double finite_or_throw(double v, const std::string& what) {
  if (!std::isfinite(v)) {
    throw std::domain_error("numeric_gradcheck: non-finite " + what);
  }
  return v;
}

}  // namespace

GradcheckResult numeric_gradcheck(const std::function<double()>& loss,
                                  std::span<GradProbe> probes,
                                  const GradcheckOptions& options) {
  if (!(options.step > 0.0)) {
    throw std::invalid_argument("numeric_gradcheck: step must be positive");
  }
  GradcheckResult result;
  finite_or_throw(loss(), "loss at the base point");
  const std::uint64_t base_region = options.region ? options.region() : 0;
  for (auto& probe : probes) {
    if (probe.analytic.size() != probe.values.size()) {
      throw std::invalid_argument("numeric_gradcheck: probe '" + probe.name +
                                  "' has " + std::to_string(probe.values.size()) +
                                  " values but " +
                                  std::to_string(probe.analytic.size()) +
                                  " analytic entries");
    }
    const std::size_t total = probe.values.size();
    std::size_t stride = 1;
    if (options.max_entries_per_probe > 0 &&
        total > options.max_entries_per_probe) {
      stride = (total + options.max_entries_per_probe - 1) /
               options.max_entries_per_probe;
    }
    for (std::size_t i = 0; i < total; i += stride) {
      const double a = finite_or_throw(probe.analytic[i],
                                       "analytic gradient in " + probe.name);
      double& v = probe.values[i];
      const double saved = v;
      v = saved + options.step;
      const double plus = finite_or_throw(loss(), "loss in " + probe.name);
      const bool plus_same = !options.region || options.region() == base_region;
      v = saved - options.step;
      const double minus = finite_or_throw(loss(), "loss in " + probe.name);
      const bool minus_same = !options.region || options.region() == base_region;
      v = saved;
      if (!plus_same || !minus_same) {
        ++result.entries_skipped;
        continue;
      }
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double denom =
          std::max({std::abs(a), std::abs(numeric), options.abs_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++result.entries_checked;
      if (result.worst_probe.empty() || rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst_probe = probe.name;
        result.worst_index = i;
      }
    }
  }
  return result;
}

double weighted_sum(const Tensor& a, const Tensor& weights) {
  check_same_shape(a, weights, "weighted_sum");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    s += a.data()[i] * weights.data()[i];
  }
  return s;
}

Tensor random_tensor(const Tensor::Shape& shape, std::uint64_t seed, double lo,
                     double hi) {
  Tensor t(shape);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace prcnn
