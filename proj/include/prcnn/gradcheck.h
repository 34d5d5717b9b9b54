#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "prcnn/tensor.h"

namespace prcnn {

// One perturbable input of a scalar function together with the analytic
// gradient computed for it at the unperturbed point.
struct GradProbe {
  std::string name;
  std::span<double> values;
  std::vector<double> analytic;
};

struct GradcheckOptions {
  double step = 1e-5;
  double abs_floor = 1e-8;
  // 0 checks every entry; otherwise an evenly strided subset of this size.
  std::size_t max_entries_per_probe = 0;
  // Optional fingerprint of the piecewise-linear region the last loss()
  // call evaluated in (e.g. a hash of relu activation signs). Entries whose
  // +step or -step evaluation lands in a different region straddle a kink,
  // where central differences are meaningless; they are skipped and counted.
  std::function<std::uint64_t()> region;
};

struct GradcheckResult {
  double max_relative_error = 0.0;
  std::string worst_probe;
  std::size_t worst_index = 0;
  std::size_t entries_checked = 0;
  std::size_t entries_skipped = 0;
};

// Central finite differences of `loss` against each probe's analytic
// gradient. Relative error is |a - n| / max(|a|, |n|, abs_floor).
// Throws std::domain_error if a non-finite value is encountered.
GradcheckResult numeric_gradcheck(const std::function<double()>& loss,
                                  std::span<GradProbe> probes,
                                  const GradcheckOptions& options = {});

// sum_i a_i * w_i; used to reduce tensor outputs to a scalar loss whose
// gradient with respect to the output is exactly `weights`.
double weighted_sum(const Tensor& a, const Tensor& weights);

// Tensor of the given shape filled uniformly from [lo, hi].
Tensor random_tensor(const Tensor::Shape& shape, std::uint64_t seed,
                     double lo = -1.0, double hi = 1.0);

}  // namespace prcnn
