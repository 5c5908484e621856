#include "lorakey/losses.hpp"

#include <algorithm>
#include <cmath>

#include "lorakey/error.hpp"

namespace lorakey {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

LossResult loss_mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "loss_mse");
  const double n = static_cast<double>(a.size());
  LossResult r;
  r.grad = a - b;
  r.value = r.grad.vec().squaredNorm() / n;
  r.grad *= 2.0 / n;
  return r;
}

LossResult loss_bce_logits(const Tensor& logits, const Tensor& targets) {
  require_same_shape(logits, targets, "loss_bce_logits");
  const double n = static_cast<double>(logits.size());
  LossResult r;
  r.grad = Tensor(logits.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double x = logits[i];
    const double t = targets[i];
    if (t != 0.0 && t != 1.0) throw Error("loss_bce_logits: target " + std::to_string(t) + " is not binary");
    // -[t log s(x) + (1-t) log(1-s(x))] = max(x,0) - t x + log(1 + e^{-|x|})
    total += std::max(x, 0.0) - t * x + std::log1p(std::exp(-std::abs(x)));
    r.grad[i] = (sigmoid(x) - t) / n;
  }
  r.value = total / n;
  return r;
}

namespace {

// Writes d(1 - cos(ref, f))/df into `grad` and returns the distance.
double cosine_distance_into(std::span<const double> ref, std::span<const double> f, std::span<double> grad) {
  const double nr = norm(ref);
  const double nf = norm(f);
  if (nr == 0.0 || nf == 0.0) throw DimensionError("cosine distance of a zero-norm feature");
  const double c = dot(ref, f) / (nr * nf);
  // d cos / df = ref/(|r||f|) - cos * f/|f|^2
  for (std::size_t i = 0; i < f.size(); ++i) grad[i] = -(ref[i] / (nr * nf) - c * f[i] / (nf * nf));
  return 1.0 - c;
}

}  // namespace

LossResult loss_cosine_distance(const Tensor& reference, const Tensor& f) {
  if (reference.size() != f.size()) throw DimensionError("loss_cosine_distance: length mismatch");
  LossResult r;
  r.grad = Tensor(f.shape());
  r.value = cosine_distance_into(reference.values(), f.values(), r.grad.values());
  return r;
}

LossResult loss_cosine_distance_rows(const Tensor& reference, const Tensor& f) {
  require_same_shape(reference, f, "loss_cosine_distance_rows");
  const std::size_t rows = f.rows();
  LossResult r;
  r.grad = Tensor(f.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < rows; ++i) total += cosine_distance_into(reference.row(i), f.row(i), r.grad.row(i));
  r.value = total / static_cast<double>(rows);
  r.grad *= 1.0 / static_cast<double>(rows);
  return r;
}

}  // namespace lorakey
