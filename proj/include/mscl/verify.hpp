#pragma once

#include <string>
#include <vector>

namespace mscl {

struct GradCheckEntry {
  std::string name;
  double max_error = 0.0;
  double threshold = 1e-4;
  bool passed = false;
};

// Central finite-difference verification of every differentiable operation
// and loss in the pipeline, 20 random seeds each, 64-bit mode.
std::vector<GradCheckEntry> gradcheck_suite();

}  // namespace mscl
