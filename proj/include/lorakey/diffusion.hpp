#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "lorakey/lora_adapter.hpp"
#include "lorakey/mlp.hpp"
#include "lorakey/optimizer.hpp"
#include "lorakey/rng.hpp"
#include "lorakey/world.hpp"

namespace lorakey {

// beta_t, alpha_t = 1 - beta_t and alpha_bar_t = prod alpha_s for t in [1..T].
class NoiseSchedule {
 public:
  static NoiseSchedule linear(std::size_t steps, double beta_start = 1e-4, double beta_end = 0.02);
  static NoiseSchedule from_betas(std::vector<double> betas);

  std::size_t steps() const { return betas_.size(); }
  double beta(std::size_t t) const { return betas_[index(t)]; }
  double alpha(std::size_t t) const { return 1.0 - betas_[index(t)]; }
  double alpha_bar(std::size_t t) const { return alpha_bars_[index(t)]; }

 private:
  explicit NoiseSchedule(std::vector<double> betas);
  std::size_t index(std::size_t t) const;

  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
};

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, row-wise with per-row timesteps.
Tensor forward_diffuse(const NoiseSchedule& schedule, const Tensor& z0, std::span<const std::size_t> t,
                       const Tensor& eps);
Tensor forward_diffuse(const NoiseSchedule& schedule, const Tensor& z0, std::size_t t, const Tensor& eps);

// z0_hat = (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t).
Tensor estimate_z0(const NoiseSchedule& schedule, const Tensor& z_t, std::span<const std::size_t> t,
                   const Tensor& eps_hat);
Tensor estimate_z0(const NoiseSchedule& schedule, const Tensor& z_t, std::size_t t, const Tensor& eps_hat);

// Bayes-optimal E[eps | z_t, c] for the Gaussian world. Class index
// world.classes() denotes the unconditional mixture.
Tensor analytic_gmm_eps(const SyntheticWorld& world, const NoiseSchedule& schedule, const Tensor& z_t,
                        std::size_t t, std::size_t c);

struct DenoiserConfig {
  std::size_t hidden_width = 256;
  std::size_t hidden_layers = 2;
  std::size_t time_dim = 16;
  std::size_t class_dim = 16;
  double latent_input_scale = 0.5;
  Activation activation = Activation::kTanh;
};

// eps-prediction network over [scaled z_t | time embedding | class embedding].
// Layer names ("fc1", ...) key the adapter targets.
class Denoiser {
 public:
  static Denoiser build(std::uint64_t seed, std::size_t latent_dim, std::size_t classes, std::size_t steps,
                        DenoiserConfig config = {});
  Denoiser(Mlp net, Tensor class_embed, std::size_t latent_dim, std::size_t steps, DenoiserConfig config);

  const Mlp& net() const { return net_; }
  Mlp& mutable_net();
  const Tensor& class_embedding() const { return class_embed_; }
  Tensor& mutable_class_embedding();
  const DenoiserConfig& config() const { return config_; }

  std::size_t latent_dim() const { return latent_dim_; }
  std::size_t classes() const { return class_embed_.rows() - 1; }
  std::size_t null_class() const { return classes(); }
  std::size_t steps() const { return steps_; }
  std::vector<std::string> layer_names() const;

  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  Tensor time_embedding(std::size_t t) const;
  // Network input rows for a batch.
  Tensor assemble_input(const Tensor& z_t, std::span<const std::size_t> t, std::span<const std::size_t> c) const;

  // Parameter snapshot: network parameters then "class_embed".
  GradVector parameters() const;

 private:
  Mlp net_;
  Tensor class_embed_;  // [(K + 1) x class_dim], last row is the null class
  std::size_t latent_dim_ = 0;
  std::size_t steps_ = 0;
  DenoiserConfig config_;
  bool frozen_ = false;
};

struct EpsPrediction {
  Tensor eps;  // [N x D_z]
  MlpCache cache;
  std::vector<LowRankTerm> terms;  // references the adapters passed to predict_eps
};

// eps_{theta + sum coefficient * delta}(z_t, t, c). Adapters must outlive the prediction
// when it is passed to eps_backward.
EpsPrediction predict_eps(const Denoiser& denoiser, const std::vector<AttachedAdapter>& adapters, const Tensor& z_t,
                          std::span<const std::size_t> t, std::span<const std::size_t> c);

MlpGradients eps_backward(const Denoiser& denoiser, const EpsPrediction& prediction, const Tensor& grad_eps,
                          BackwardOptions options = {});

struct DenoiserTrainConfig {
  std::size_t steps = 20000;
  std::size_t batch = 64;
  double learning_rate = 2e-3;
  double final_learning_rate = 2e-5;
  double weight_decay = 0.0;
  double null_class_probability = 0.1;
};

struct DenoiserTrainLog {
  std::vector<double> losses;  // per step
};

// Standard eps-prediction MSE on (z0, t, eps, c) draws from the world; the
// returned denoiser is frozen.
Denoiser train_base_denoiser(const SyntheticWorld& world, const NoiseSchedule& schedule, const Denoiser& init,
                             const DenoiserTrainConfig& config, Rng& rng, DenoiserTrainLog* log = nullptr);

// Held-out mean ||eps_hat - eps*||^2 / D_z against analytic_gmm_eps.
double oracle_relative_mse(const Denoiser& denoiser, const SyntheticWorld& world, const NoiseSchedule& schedule,
                           std::size_t samples, Rng& rng);

struct SampleOptions {
  std::optional<double> guidance;  // eps = eps_null + w (eps_c - eps_null)
};

struct SampleResult {
  Tensor latents;  // [N x D_z]
  Tensor images;   // [N x D_img], clamped to [0, 1]
};

// Ancestral reverse chain from z_T ~ N(0, I). Item i draws from rng.fork(i), so
// results do not depend on how a request is batched.
SampleResult sample(const Denoiser& denoiser, const std::vector<AttachedAdapter>& adapters,
                    const NoiseSchedule& schedule, const LatentCodec& codec, std::span<const std::size_t> classes,
                    const Rng& rng, SampleOptions options = {});

// Clamps pixel intensities into [0, 1].
Tensor clamp_unit(Tensor images);

}  // namespace lorakey
