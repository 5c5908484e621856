#pragma once

#include <functional>
#include <string>

#include "lorakey/grad_vector.hpp"
#include "lorakey/rng.hpp"

namespace lorakey {

// Scalar objective over a parameter set. When `grad` is non-null the
// analytic gradient is written to it.
using Objective = std::function<double(const GradVector& params, GradVector* grad)>;

struct GradCheckOptions {
  double step = 1e-5;
  // Coordinates checked; every coordinate when the parameter count is smaller.
  std::size_t max_coordinates = 400;
  double denominator_floor = 1e-12;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_entry;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Central-difference check: max over sampled coordinates of
// |analytic - numeric| / max(|analytic|, |numeric|, floor).
GradCheckReport grad_check(const Objective& f, const GradVector& params, Rng& rng, GradCheckOptions options = {});

}  // namespace lorakey
