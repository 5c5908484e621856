#include "lorakey/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lorakey/error.hpp"

namespace lorakey {

GradCheckReport grad_check(const Objective& f, const GradVector& params, Rng& rng, GradCheckOptions options) {
  GradVector analytic;
  const double f0 = f(params, &analytic);
  if (!std::isfinite(f0)) throw NonFiniteError("grad_check: objective is not finite");
  if (!analytic.same_structure(params)) throw DimensionError("grad_check: gradient structure differs from params");

  // (entry, offset) for every coordinate, then a seeded subset.
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t e = 0; e < params.entries(); ++e) {
    for (std::size_t i = 0; i < params[e].size(); ++i) coords.emplace_back(e, i);
  }
  if (coords.size() > options.max_coordinates) {
    for (std::size_t i = 0; i < options.max_coordinates; ++i) {
      std::size_t j = i + rng.uniform_index(coords.size() - i);
      std::swap(coords[i], coords[j]);
    }
    coords.resize(options.max_coordinates);
  }

  GradCheckReport report;
  GradVector probe = params;
  for (const auto& [e, i] : coords) {
    const double original = probe[e][i];
    probe[e][i] = original + options.step;
    const double up = f(probe, nullptr);
    probe[e][i] = original - options.step;
    const double down = f(probe, nullptr);
    probe[e][i] = original;
    if (!std::isfinite(up) || !std::isfinite(down)) throw NonFiniteError("grad_check: objective is not finite");

    const double numeric = (up - down) / (2.0 * options.step);
    const double a = analytic[e][i];
    const double denom = std::max({std::abs(a), std::abs(numeric), options.denominator_floor});
    const double rel = std::abs(a - numeric) / denom;
    ++report.coordinates;
    if (rel >= report.max_relative_error) {
      report.max_relative_error = rel;
      report.worst_entry = params.name(e);
      report.worst_index = i;
      report.worst_analytic = a;
      report.worst_numeric = numeric;
    }
  }
  return report;
}

}  // namespace lorakey
