#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "lorakey/grad_vector.hpp"
#include "lorakey/mlp.hpp"

namespace lorakey {

enum class AdapterRole { kWatermark, kStyle, kOther };

std::string to_string(AdapterRole role);
AdapterRole adapter_role_from_string(const std::string& s);

struct LoraEntry {
  std::string layer;
  Tensor a;  // [r x in]
  Tensor b;  // [out x r]
};

// Low-rank update on a set of named layers: delta W(layer) = scale * B A.
struct LoraAdapter {
  std::vector<LoraEntry> entries;
  std::size_t rank = 0;
  double scale = 1.0;
  AdapterRole role = AdapterRole::kOther;
  nlohmann::json metadata = nlohmann::json::object();

  const LoraEntry& entry(const std::string& layer) const;
  bool targets(const std::string& layer) const;

  // Forward-pass terms with effective scale coefficient * scale.
  std::vector<LowRankTerm> terms(double coefficient = 1.0) const;

  // "<layer>.A", "<layer>.B" per entry in order.
  GradVector parameters() const;
  void set_parameters(const GradVector& values);
  std::vector<Tensor*> parameter_refs();
};

// (adapter, coefficient) as attached to a host network.
struct AttachedAdapter {
  const LoraAdapter* adapter = nullptr;
  double coefficient = 1.0;
};

std::vector<LowRankTerm> collect_terms(const std::vector<AttachedAdapter>& adapters);

// Gradient of adapter `which` assembled from per-term gradients produced by
// mlp_backward over collect_terms(adapters).
GradVector adapter_gradient(const std::vector<AttachedAdapter>& adapters, std::size_t which,
                            const std::vector<LowRankGrad>& term_grads);

}  // namespace lorakey
