#include "lorakey/lora_adapter.hpp"

#include "lorakey/error.hpp"

namespace lorakey {

std::string to_string(AdapterRole role) {
  switch (role) {
    case AdapterRole::kWatermark:
      return "watermark";
    case AdapterRole::kStyle:
      return "style";
    case AdapterRole::kOther:
      return "other";
  }
  return "other";
}

AdapterRole adapter_role_from_string(const std::string& s) {
  if (s == "watermark") return AdapterRole::kWatermark;
  if (s == "style") return AdapterRole::kStyle;
  if (s == "other") return AdapterRole::kOther;
  throw FormatError("unknown adapter role '" + s + "'");
}

const LoraEntry& LoraAdapter::entry(const std::string& layer) const {
  for (const LoraEntry& e : entries) {
    if (e.layer == layer) return e;
  }
  throw DimensionError("adapter does not target layer '" + layer + "'");
}

bool LoraAdapter::targets(const std::string& layer) const {
  for (const LoraEntry& e : entries) {
    if (e.layer == layer) return true;
  }
  return false;
}

std::vector<LowRankTerm> LoraAdapter::terms(double coefficient) const {
  std::vector<LowRankTerm> out;
  out.reserve(entries.size());
  for (const LoraEntry& e : entries) out.push_back(LowRankTerm{e.layer, &e.a, &e.b, coefficient * scale});
  return out;
}

GradVector LoraAdapter::parameters() const {
  GradVector out;
  for (const LoraEntry& e : entries) {
    out.add(e.layer + ".A", e.a);
    out.add(e.layer + ".B", e.b);
  }
  return out;
}

void LoraAdapter::set_parameters(const GradVector& values) {
  if (!parameters().same_structure(values)) throw DimensionError("adapter set_parameters: structure mismatch");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    entries[i].a = values[2 * i];
    entries[i].b = values[2 * i + 1];
  }
}

std::vector<Tensor*> LoraAdapter::parameter_refs() {
  std::vector<Tensor*> refs;
  for (LoraEntry& e : entries) {
    refs.push_back(&e.a);
    refs.push_back(&e.b);
  }
  return refs;
}

std::vector<LowRankTerm> collect_terms(const std::vector<AttachedAdapter>& adapters) {
  std::vector<LowRankTerm> out;
  for (const AttachedAdapter& a : adapters) {
    auto t = a.adapter->terms(a.coefficient);
    out.insert(out.end(), t.begin(), t.end());
  }
  return out;
}

GradVector adapter_gradient(const std::vector<AttachedAdapter>& adapters, std::size_t which,
                            const std::vector<LowRankGrad>& term_grads) {
  std::size_t offset = 0;
  for (std::size_t i = 0; i < which; ++i) offset += adapters.at(i).adapter->entries.size();
  const LoraAdapter& target = *adapters.at(which).adapter;
  if (offset + target.entries.size() > term_grads.size()) throw DimensionError("adapter_gradient: too few term grads");
  GradVector out;
  for (std::size_t k = 0; k < target.entries.size(); ++k) {
    out.add(target.entries[k].layer + ".A", term_grads[offset + k].a);
    out.add(target.entries[k].layer + ".B", term_grads[offset + k].b);
  }
  return out;
}

}  // namespace lorakey
