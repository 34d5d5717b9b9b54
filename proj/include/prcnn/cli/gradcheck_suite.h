#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "prcnn/gradcheck.h"

namespace prcnn::cli {

// Named finite-difference checks over small fixed shapes. Elementary
// targets are held to 1e-6, composites to 1e-4.
struct GradcheckTarget {
  std::string name;
  bool elementary = false;
};

std::vector<GradcheckTarget> gradcheck_targets();
bool is_gradcheck_target(const std::string& name);
double default_tolerance(const GradcheckTarget& target);

// Throws std::invalid_argument for an unknown name.
GradcheckResult run_gradcheck_target(const std::string& name,
                                     std::uint64_t seed);

}  // namespace prcnn::cli
