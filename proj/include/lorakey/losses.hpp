#pragma once

#include "lorakey/tensor.hpp"

namespace lorakey {

struct LossResult {
  double value = 0.0;
  Tensor grad;  // d value / d prediction (the first argument, or f for cosine losses)
};

// Mean of squared differences over all entries; grad = 2(a - b)/N.
LossResult loss_mse(const Tensor& a, const Tensor& b);

// Mean binary cross-entropy on logits, computed without overflow for large |x|.
// Targets must be exactly 0 or 1.
LossResult loss_bce_logits(const Tensor& logits, const Tensor& targets);

// 1 - cos(reference, f), with the reference held constant. Value lies in [0, 2].
LossResult loss_cosine_distance(const Tensor& reference, const Tensor& f);

// Row-wise cosine distance averaged over rows of [N x d] inputs.
LossResult loss_cosine_distance_rows(const Tensor& reference, const Tensor& f);

double sigmoid(double x);

}  // namespace lorakey
