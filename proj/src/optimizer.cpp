#include "lorakey/optimizer.hpp"

#include <cmath>

#include "lorakey/error.hpp"

namespace lorakey {

void AdamW::step(std::span<Tensor* const> params, const GradVector& grads) {
  if (params.size() != grads.entries()) {
    throw DimensionError("AdamW: " + std::to_string(grads.entries()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape()) {
      throw DimensionError("AdamW: gradient '" + grads.name(i) + "' has shape " + shape_string(grads[i].shape()) +
                           ", parameter has " + shape_string(params[i]->shape()));
    }
  }
  if (m_.empty()) {
    for (Tensor* p : params) {
      m_.emplace_back(p->shape());
      v_.emplace_back(p->shape());
    }
  } else if (m_.size() != params.size()) {
    throw DimensionError("AdamW: parameter count changed between steps");
  }

  ++step_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double lr = config_.learning_rate;
  const double bias1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double bias2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->vec().array();
    auto g = grads[i].vec().array();
    auto m = m_[i].vec().array();
    auto v = v_[i].vec().array();
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.square();
    p -= lr * config_.weight_decay * p;
    p -= lr * (m / bias1) / ((v / bias2).sqrt() + config_.epsilon);
  }
}

}  // namespace lorakey
