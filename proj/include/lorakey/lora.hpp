#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "lorakey/diffusion.hpp"
#include "lorakey/lora_adapter.hpp"

namespace lorakey {

// A fresh adapter: A ~ N(0, 1/in), B = 0, so the initial delta is exactly zero.
LoraAdapter init_lora(const Mlp& host, const std::vector<std::string>& layers, std::size_t rank, Rng& rng,
                      AdapterRole role = AdapterRole::kOther);
LoraAdapter init_lora(const Denoiser& host, const std::vector<std::string>& layers, std::size_t rank, Rng& rng,
                      AdapterRole role = AdapterRole::kOther);

// scale * B * A for one targeted layer.
Tensor materialize_delta(const LoraAdapter& adapter, const std::string& layer);
// Frobenius norm of all materialized deltas together.
double delta_norm(const LoraAdapter& adapter);

// Throws DimensionError unless every entry fits a layer of `host`.
void check_compatible(const Mlp& host, const LoraAdapter& adapter);

// Base denoiser plus (adapter, coefficient) pairs, evaluated lazily as
// W + sum coefficient * scale * B A per layer.
class MergedModel {
 public:
  MergedModel(const Denoiser& base, std::vector<LoraAdapter> adapters, std::vector<double> coefficients);

  const Denoiser& base() const { return *base_; }
  const std::vector<LoraAdapter>& adapters() const { return adapters_; }
  const std::vector<double>& coefficients() const { return coefficients_; }
  std::vector<AttachedAdapter> attached() const;

  // Adds one more pair.
  MergedModel with(const LoraAdapter& adapter, double coefficient) const;

  Tensor predict(const Tensor& z_t, std::span<const std::size_t> t, std::span<const std::size_t> c) const;

  // Dense denoiser with every delta folded into the base weights.
  Denoiser materialize() const;

 private:
  const Denoiser* base_;
  std::vector<LoraAdapter> adapters_;
  std::vector<double> coefficients_;
};

MergedModel merge_adapters(const Denoiser& base, const std::vector<std::pair<LoraAdapter, double>>& pairs);

enum class DeltaSpace { kMaterialized, kFactors };

// Cosine between two adapters over the common layer set, concatenated in the
// first adapter's entry order.
double delta_cosine(const LoraAdapter& a, const LoraAdapter& b, DeltaSpace space = DeltaSpace::kMaterialized);

// Zeroes the smallest-magnitude fraction p of all A and B entries.
LoraAdapter prune_adapter(const LoraAdapter& adapter, double fraction);

void save_adapter(const LoraAdapter& adapter, const std::filesystem::path& path);
LoraAdapter load_adapter(const std::filesystem::path& path);

}  // namespace lorakey
