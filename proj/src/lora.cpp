#include "lorakey/lora.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lorakey/container.hpp"
#include "lorakey/error.hpp"

namespace lorakey {

LoraAdapter init_lora(const Mlp& host, const std::vector<std::string>& layers, std::size_t rank, Rng& rng,
                      AdapterRole role) {
  if (layers.empty()) throw DimensionError("init_lora: no target layers");
  LoraAdapter adapter;
  adapter.rank = rank;
  adapter.role = role;
  adapter.metadata["seed"] = rng.seed();
  adapter.metadata["stream"] = rng.label();
  for (const std::string& name : layers) {
    const Layer& layer = host.layer(host.index_of(name));
    if (rank < 1 || rank > std::min(layer.in_dim(), layer.out_dim())) {
      throw DimensionError("rank " + std::to_string(rank) + " invalid for layer '" + name + "' (" +
                           std::to_string(layer.out_dim()) + "x" + std::to_string(layer.in_dim()) + ")");
    }
    if (adapter.targets(name)) throw DimensionError("layer '" + name + "' targeted twice");
    LoraEntry e;
    e.layer = name;
    e.a = rng.normal_tensor({rank, layer.in_dim()}, 1.0 / std::sqrt(static_cast<double>(layer.in_dim())));
    e.b = Tensor({layer.out_dim(), rank});
    adapter.entries.push_back(std::move(e));
  }
  return adapter;
}

LoraAdapter init_lora(const Denoiser& host, const std::vector<std::string>& layers, std::size_t rank, Rng& rng,
                      AdapterRole role) {
  return init_lora(host.net(), layers, rank, rng, role);
}

Tensor materialize_delta(const LoraAdapter& adapter, const std::string& layer) {
  const LoraEntry& e = adapter.entry(layer);
  return matmul(e.b, e.a) * adapter.scale;
}

double delta_norm(const LoraAdapter& adapter) {
  double sq = 0.0;
  for (const LoraEntry& e : adapter.entries) sq += materialize_delta(adapter, e.layer).mat().squaredNorm();
  return std::sqrt(sq);
}

void check_compatible(const Mlp& host, const LoraAdapter& adapter) {
  for (const LoraEntry& e : adapter.entries) {
    if (!host.has_layer(e.layer)) throw DimensionError("adapter targets unknown layer '" + e.layer + "'");
    const Layer& l = host.layer(host.index_of(e.layer));
    if (e.a.rank() != 2 || e.b.rank() != 2 || e.a.cols() != l.in_dim() || e.b.rows() != l.out_dim() ||
        e.a.rows() != e.b.cols()) {
      throw DimensionError("adapter factors for '" + e.layer + "' do not fit the host layer");
    }
  }
}

MergedModel::MergedModel(const Denoiser& base, std::vector<LoraAdapter> adapters, std::vector<double> coefficients)
    : base_(&base), adapters_(std::move(adapters)), coefficients_(std::move(coefficients)) {
  if (adapters_.size() != coefficients_.size()) throw DimensionError("one coefficient per adapter is required");
  for (const LoraAdapter& a : adapters_) check_compatible(base.net(), a);
}

std::vector<AttachedAdapter> MergedModel::attached() const {
  std::vector<AttachedAdapter> out;
  for (std::size_t i = 0; i < adapters_.size(); ++i) out.push_back({&adapters_[i], coefficients_[i]});
  return out;
}

MergedModel MergedModel::with(const LoraAdapter& adapter, double coefficient) const {
  std::vector<LoraAdapter> a = adapters_;
  std::vector<double> c = coefficients_;
  a.push_back(adapter);
  c.push_back(coefficient);
  return MergedModel(*base_, std::move(a), std::move(c));
}

Tensor MergedModel::predict(const Tensor& z_t, std::span<const std::size_t> t, std::span<const std::size_t> c) const {
  return predict_eps(*base_, attached(), z_t, t, c).eps;
}

Denoiser MergedModel::materialize() const {
  Mlp net = base_->net();
  for (Layer& layer : net.layers()) {
    for (std::size_t i = 0; i < adapters_.size(); ++i) {
      if (!adapters_[i].targets(layer.name)) continue;
      layer.weight += materialize_delta(adapters_[i], layer.name) * coefficients_[i];
    }
  }
  Denoiser out(std::move(net), base_->class_embedding(), base_->latent_dim(), base_->steps(), base_->config());
  if (base_->frozen()) out.freeze();
  return out;
}

MergedModel merge_adapters(const Denoiser& base, const std::vector<std::pair<LoraAdapter, double>>& pairs) {
  std::vector<LoraAdapter> adapters;
  std::vector<double> coefficients;
  for (const auto& [a, c] : pairs) {
    adapters.push_back(a);
    coefficients.push_back(c);
  }
  return MergedModel(base, std::move(adapters), std::move(coefficients));
}

double delta_cosine(const LoraAdapter& a, const LoraAdapter& b, DeltaSpace space) {
  std::vector<double> fa, fb;
  for (const LoraEntry& e : a.entries) {
    if (!b.targets(e.layer)) throw DimensionError("delta_cosine: adapters target different layers");
    if (space == DeltaSpace::kMaterialized) {
      const Tensor da = materialize_delta(a, e.layer);
      const Tensor db = materialize_delta(b, e.layer);
      fa.insert(fa.end(), da.values().begin(), da.values().end());
      fb.insert(fb.end(), db.values().begin(), db.values().end());
    } else {
      const LoraEntry& f = b.entry(e.layer);
      if (f.a.shape() != e.a.shape() || f.b.shape() != e.b.shape()) {
        throw DimensionError("delta_cosine: factor shapes differ for '" + e.layer + "'");
      }
      fa.insert(fa.end(), e.a.values().begin(), e.a.values().end());
      fa.insert(fa.end(), e.b.values().begin(), e.b.values().end());
      fb.insert(fb.end(), f.a.values().begin(), f.a.values().end());
      fb.insert(fb.end(), f.b.values().begin(), f.b.values().end());
    }
  }
  if (b.entries.size() != a.entries.size()) throw DimensionError("delta_cosine: adapters target different layers");
  return cosine(fa, fb);
}

LoraAdapter prune_adapter(const LoraAdapter& adapter, double fraction) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw Error("prune fraction must lie in [0, 1]");
  LoraAdapter out = adapter;
  std::vector<double*> entries;
  for (Tensor* t : out.parameter_refs()) {
    for (double& v : t->values()) entries.push_back(&v);
  }
  const std::size_t k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(entries.size()) + 1e-9));
  std::vector<std::size_t> order(entries.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return std::abs(*entries[i]) < std::abs(*entries[j]); });
  for (std::size_t i = 0; i < k; ++i) *entries[order[i]] = 0.0;
  out.metadata["pruned_fraction"] = fraction;
  return out;
}

void save_adapter(const LoraAdapter& adapter, const std::filesystem::path& path) {
  Container c;
  nlohmann::json layers = nlohmann::json::array();
  for (const LoraEntry& e : adapter.entries) {
    c.add(e.layer + ".A", e.a);
    c.add(e.layer + ".B", e.b);
    layers.push_back(e.layer);
  }
  c.metadata()["kind"] = "lora_adapter";
  c.metadata()["rank"] = adapter.rank;
  c.metadata()["scale"] = adapter.scale;
  c.metadata()["role"] = to_string(adapter.role);
  c.metadata()["layers"] = layers;
  c.metadata()["info"] = adapter.metadata;
  c.save(path);
}

LoraAdapter load_adapter(const std::filesystem::path& path) {
  const Container c = Container::load(path);
  const nlohmann::json& m = c.metadata();
  if (m.value("kind", "") != "lora_adapter") throw FormatError("'" + path.string() + "' is not an adapter container");
  LoraAdapter adapter;
  try {
    adapter.rank = m.at("rank").get<std::size_t>();
    adapter.scale = m.at("scale").get<double>();
    adapter.role = adapter_role_from_string(m.at("role").get<std::string>());
    adapter.metadata = m.value("info", nlohmann::json::object());
    for (const auto& layer : m.at("layers")) {
      LoraEntry e;
      e.layer = layer.get<std::string>();
      e.a = c.get(e.layer + ".A");
      e.b = c.get(e.layer + ".B");
      if (e.a.rows() != adapter.rank || e.b.cols() != adapter.rank) {
        throw FormatError("adapter factors for '" + e.layer + "' do not have the declared rank");
      }
      adapter.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed adapter metadata: ") + e.what());
  }
  return adapter;
}

}  // namespace lorakey
