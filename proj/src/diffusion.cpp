#include "lorakey/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "lorakey/error.hpp"
#include "lorakey/losses.hpp"

namespace lorakey {

// ---------------------------------------------------------------------------
// NoiseSchedule

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
  if (betas_.empty()) throw Error("noise schedule needs at least one step");
  double prod = 1.0;
  for (std::size_t i = 0; i < betas_.size(); ++i) {
    const double b = betas_[i];
    if (!(b > 0.0 && b < 1.0)) throw Error("noise schedule betas must lie in (0, 1)");
    if (i > 0 && b < betas_[i - 1]) throw Error("noise schedule betas must be non-decreasing");
    prod *= 1.0 - b;
    alpha_bars_.push_back(prod);
  }
  if (!(alpha_bars_.back() > 0.0)) throw Error("noise schedule alpha_bar_T must be positive");
}

NoiseSchedule NoiseSchedule::linear(std::size_t steps, double beta_start, double beta_end) {
  if (steps == 0) throw Error("noise schedule needs at least one step");
  std::vector<double> betas(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const double f = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    betas[i] = beta_start + f * (beta_end - beta_start);
  }
  return NoiseSchedule(std::move(betas));
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) { return NoiseSchedule(std::move(betas)); }

std::size_t NoiseSchedule::index(std::size_t t) const {
  if (t < 1 || t > betas_.size()) {
    throw Error("timestep " + std::to_string(t) + " outside [1, " + std::to_string(betas_.size()) + "]");
  }
  return t - 1;
}

namespace {

std::vector<std::size_t> broadcast_t(std::size_t t, std::size_t rows) { return std::vector<std::size_t>(rows, t); }

void check_rows(const Tensor& x, std::span<const std::size_t> t, const char* what) {
  if (x.rows() != t.size()) {
    throw DimensionError(std::string(what) + ": " + std::to_string(t.size()) + " timesteps for " +
                         std::to_string(x.rows()) + " rows");
  }
}

}  // namespace

Tensor forward_diffuse(const NoiseSchedule& schedule, const Tensor& z0, std::span<const std::size_t> t,
                       const Tensor& eps) {
  require_same_shape(z0, eps, "forward_diffuse");
  check_rows(z0, t, "forward_diffuse");
  Tensor out(z0.shape());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double ab = schedule.alpha_bar(t[i]);
    const double s = std::sqrt(ab);
    const double n = std::sqrt(1.0 - ab);
    auto o = out.row(i);
    auto a = z0.row(i);
    auto e = eps.row(i);
    for (std::size_t j = 0; j < o.size(); ++j) o[j] = s * a[j] + n * e[j];
  }
  return out;
}

Tensor forward_diffuse(const NoiseSchedule& schedule, const Tensor& z0, std::size_t t, const Tensor& eps) {
  return forward_diffuse(schedule, z0, broadcast_t(t, z0.rows()), eps);
}

Tensor estimate_z0(const NoiseSchedule& schedule, const Tensor& z_t, std::span<const std::size_t> t,
                   const Tensor& eps_hat) {
  require_same_shape(z_t, eps_hat, "estimate_z0");
  check_rows(z_t, t, "estimate_z0");
  Tensor out(z_t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double ab = schedule.alpha_bar(t[i]);
    if (!(ab > 0.0)) throw Error("estimate_z0: alpha_bar must be positive");
    const double s = std::sqrt(ab);
    const double n = std::sqrt(1.0 - ab);
    auto o = out.row(i);
    auto z = z_t.row(i);
    auto e = eps_hat.row(i);
    for (std::size_t j = 0; j < o.size(); ++j) o[j] = (z[j] - n * e[j]) / s;
  }
  return out;
}

Tensor estimate_z0(const NoiseSchedule& schedule, const Tensor& z_t, std::size_t t, const Tensor& eps_hat) {
  return estimate_z0(schedule, z_t, broadcast_t(t, z_t.rows()), eps_hat);
}

// ---------------------------------------------------------------------------
// Analytic posterior oracle

namespace {

// Per-row eps* and log marginal density of z_t under one diagonal component.
void component_posterior(const ClassComponent& comp, double ab, std::span<const double> z, std::span<double> eps,
                         double* log_density) {
  const double s = std::sqrt(ab);
  const double n2 = 1.0 - ab;
  double logp = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    const double var = ab * comp.variance[j] + n2;  // marginal variance of z_t
    const double r = z[j] - s * comp.mean[j];
    eps[j] = std::sqrt(n2) * r / var;
    logp += -0.5 * (r * r / var + std::log(2.0 * std::numbers::pi * var));
  }
  if (log_density != nullptr) *log_density = logp;
}

}  // namespace

Tensor analytic_gmm_eps(const SyntheticWorld& world, const NoiseSchedule& schedule, const Tensor& z_t, std::size_t t,
                        std::size_t c) {
  const double ab = schedule.alpha_bar(t);
  if (ab >= 1.0) throw Error("analytic_gmm_eps: alpha_bar = 1 makes the posterior singular");
  if (z_t.cols() != world.latent_dim()) throw DimensionError("analytic_gmm_eps: latent width mismatch");
  if (c > world.classes()) throw DimensionError("analytic_gmm_eps: class out of range");
  Tensor out(z_t.shape());
  const std::size_t d = world.latent_dim();
  for (std::size_t i = 0; i < z_t.rows(); ++i) {
    auto z = z_t.row(i);
    auto o = out.row(i);
    if (c < world.classes()) {
      component_posterior(world.component(c), ab, z, o, nullptr);
      continue;
    }
    // Mixture: responsibility-weighted component posteriors.
    std::vector<std::vector<double>> parts(world.classes(), std::vector<double>(d));
    std::vector<double> logw(world.classes());
    for (std::size_t k = 0; k < world.classes(); ++k) {
      double lp = 0.0;
      component_posterior(world.component(k), ab, z, parts[k], &lp);
      logw[k] = std::log(world.weights()[k]) + lp;
    }
    const double mx = *std::max_element(logw.begin(), logw.end());
    double total = 0.0;
    for (double& w : logw) total += (w = std::exp(w - mx));
    std::fill(o.begin(), o.end(), 0.0);
    for (std::size_t k = 0; k < world.classes(); ++k) {
      for (std::size_t j = 0; j < d; ++j) o[j] += logw[k] / total * parts[k][j];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Denoiser

Denoiser Denoiser::build(std::uint64_t seed, std::size_t latent_dim, std::size_t classes, std::size_t steps,
                         DenoiserConfig config) {
  Rng rng(seed, "denoiser");
  std::vector<std::size_t> widths{latent_dim + config.time_dim + config.class_dim};
  std::vector<Activation> acts;
  std::vector<std::string> names;
  for (std::size_t l = 0; l < config.hidden_layers; ++l) {
    widths.push_back(config.hidden_width);
    acts.push_back(config.activation);
    names.push_back("fc" + std::to_string(l + 1));
  }
  widths.push_back(latent_dim);
  acts.push_back(Activation::kIdentity);
  names.push_back("fc" + std::to_string(config.hidden_layers + 1));
  Mlp net = Mlp::build(widths, acts, names, rng);
  Tensor embed = rng.normal_tensor({classes + 1, config.class_dim}, 1.0);
  return Denoiser(std::move(net), std::move(embed), latent_dim, steps, config);
}

Denoiser::Denoiser(Mlp net, Tensor class_embed, std::size_t latent_dim, std::size_t steps, DenoiserConfig config)
    : net_(std::move(net)), class_embed_(std::move(class_embed)), latent_dim_(latent_dim), steps_(steps),
      config_(config) {
  if (net_.in_dim() != latent_dim_ + config_.time_dim + config_.class_dim || net_.out_dim() != latent_dim_) {
    throw DimensionError("denoiser network widths do not match latent/time/class dimensions");
  }
  if (class_embed_.rank() != 2 || class_embed_.cols() != config_.class_dim || class_embed_.rows() < 2) {
    throw DimensionError("denoiser class embedding must be [(K+1) x class_dim]");
  }
  if (config_.time_dim % 2 != 0) throw DimensionError("time embedding width must be even");
}

Mlp& Denoiser::mutable_net() {
  if (frozen_) throw Error("denoiser is frozen");
  return net_;
}

Tensor& Denoiser::mutable_class_embedding() {
  if (frozen_) throw Error("denoiser is frozen");
  return class_embed_;
}

std::vector<std::string> Denoiser::layer_names() const {
  std::vector<std::string> names;
  for (const Layer& l : net_.layers()) names.push_back(l.name);
  return names;
}

Tensor Denoiser::time_embedding(std::size_t t) const {
  const std::size_t half = config_.time_dim / 2;
  const double tau = static_cast<double>(t) / static_cast<double>(steps_);
  Tensor e({config_.time_dim});
  for (std::size_t k = 0; k < half; ++k) {
    // angular frequencies geometrically spaced in [1, 64]
    const double w = half == 1 ? 1.0 : std::exp(std::log(64.0) * static_cast<double>(k) / static_cast<double>(half - 1));
    e[2 * k] = std::sin(w * tau);
    e[2 * k + 1] = std::cos(w * tau);
  }
  return e;
}

Tensor Denoiser::assemble_input(const Tensor& z_t, std::span<const std::size_t> t,
                                std::span<const std::size_t> c) const {
  if (z_t.cols() != latent_dim_) {
    throw DimensionError("denoiser input " + shape_string(z_t.shape()) + " does not match latent dim " +
                         std::to_string(latent_dim_));
  }
  const std::size_t n = z_t.rows();
  if (t.size() != n || c.size() != n) throw DimensionError("denoiser: timestep/class count does not match batch");
  Tensor in({n, net_.in_dim()});
  for (std::size_t i = 0; i < n; ++i) {
    if (t[i] < 1 || t[i] > steps_) throw Error("timestep " + std::to_string(t[i]) + " out of range");
    if (c[i] > classes()) throw DimensionError("class " + std::to_string(c[i]) + " out of range");
    auto row = in.row(i);
    auto z = z_t.row(i);
    for (std::size_t j = 0; j < latent_dim_; ++j) row[j] = config_.latent_input_scale * z[j];
    const Tensor te = time_embedding(t[i]);
    std::copy(te.values().begin(), te.values().end(), row.begin() + latent_dim_);
    auto ce = class_embed_.row(c[i]);
    std::copy(ce.begin(), ce.end(), row.begin() + latent_dim_ + config_.time_dim);
  }
  return in;
}

GradVector Denoiser::parameters() const {
  GradVector p = net_.parameters();
  p.add("class_embed", class_embed_);
  return p;
}

EpsPrediction predict_eps(const Denoiser& denoiser, const std::vector<AttachedAdapter>& adapters, const Tensor& z_t,
                          std::span<const std::size_t> t, std::span<const std::size_t> c) {
  EpsPrediction p;
  p.terms = collect_terms(adapters);
  const Tensor in = denoiser.assemble_input(z_t.rank() == 1 ? z_t.reshaped({1, z_t.size()}) : z_t, t, c);
  MlpForward fwd = mlp_forward(denoiser.net(), in, p.terms);
  p.eps = std::move(fwd.y);
  p.cache = std::move(fwd.cache);
  return p;
}

MlpGradients eps_backward(const Denoiser& denoiser, const EpsPrediction& prediction, const Tensor& grad_eps,
                          BackwardOptions options) {
  return mlp_backward(prediction.cache, grad_eps, denoiser.net(), prediction.terms, options);
}

// ---------------------------------------------------------------------------
// Training

Denoiser train_base_denoiser(const SyntheticWorld& world, const NoiseSchedule& schedule, const Denoiser& init,
                             const DenoiserTrainConfig& config, Rng& rng, DenoiserTrainLog* log) {
  if (init.classes() != world.classes() || init.latent_dim() != world.latent_dim() ||
      init.steps() != schedule.steps()) {
    throw DimensionError("denoiser does not match world/schedule");
  }
  Denoiser den = init;
  if (den.frozen()) throw Error("cannot train a frozen denoiser");
  AdamWConfig opt_cfg;
  opt_cfg.learning_rate = config.learning_rate;
  opt_cfg.weight_decay = config.weight_decay;
  AdamW opt(opt_cfg);

  const std::size_t d = world.latent_dim();
  const std::size_t embed_offset = d + den.config().time_dim;
  std::vector<std::size_t> ts(config.batch), cs(config.batch), data_cs(config.batch);
  for (std::size_t step = 0; step < config.steps; ++step) {
    // cosine decay from learning_rate to final_learning_rate
    const double progress = static_cast<double>(step) / static_cast<double>(config.steps);
    opt.set_learning_rate(config.final_learning_rate + 0.5 * (config.learning_rate - config.final_learning_rate) *
                                                           (1.0 + std::cos(std::numbers::pi * progress)));
    for (std::size_t i = 0; i < config.batch; ++i) {
      data_cs[i] = world.draw_class(rng);
      ts[i] = 1 + rng.uniform_index(schedule.steps());
      cs[i] = rng.uniform() < config.null_class_probability ? den.null_class() : data_cs[i];
    }
    const Tensor z0 = sample_latents(world, data_cs, rng);
    const Tensor eps = rng.normal_tensor({config.batch, d});
    const Tensor zt = forward_diffuse(schedule, z0, ts, eps);

    const Tensor in = den.assemble_input(zt, ts, cs);
    MlpForward fwd = mlp_forward(den.net(), in);
    LossResult loss = loss_mse(fwd.y, eps);
    if (!std::isfinite(loss.value)) throw NonFiniteError("base denoiser training diverged at step " + std::to_string(step));
    if (log != nullptr) log->losses.push_back(loss.value);

    MlpGradients g = mlp_backward(fwd.cache, loss.grad, den.net());
    Tensor embed_grad(den.class_embedding().shape());
    for (std::size_t i = 0; i < config.batch; ++i) {
      auto src = g.input.row(i);
      auto dst = embed_grad.row(cs[i]);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[embed_offset + j];
    }
    GradVector grads = std::move(g.params);
    grads.add("class_embed", std::move(embed_grad));
    std::vector<Tensor*> refs = den.mutable_net().parameter_refs();
    refs.push_back(&den.mutable_class_embedding());
    opt.step(refs, grads);
  }
  den.freeze();
  return den;
}

double oracle_relative_mse(const Denoiser& denoiser, const SyntheticWorld& world, const NoiseSchedule& schedule,
                           std::size_t samples, Rng& rng) {
  const std::size_t d = world.latent_dim();
  double total = 0.0;
  for (std::size_t i = 0; i < samples; ++i) {
    const std::size_t c = world.draw_class(rng);
    const std::size_t t = 1 + rng.uniform_index(schedule.steps());
    const Tensor z0 = sample_latents(world, {c}, rng);
    const Tensor eps = rng.normal_tensor({1, d});
    const Tensor zt = forward_diffuse(schedule, z0, t, eps);
    const std::size_t ts[] = {t};
    const std::size_t cs[] = {c};
    const Tensor pred = predict_eps(denoiser, {}, zt, ts, cs).eps;
    const Tensor star = analytic_gmm_eps(world, schedule, zt, t, c);
    total += (pred.vec() - star.vec()).squaredNorm() / static_cast<double>(d);
  }
  return total / static_cast<double>(samples);
}

// ---------------------------------------------------------------------------
// Sampling

Tensor clamp_unit(Tensor images) {
  for (double& v : images.values()) v = std::clamp(v, 0.0, 1.0);
  return images;
}

SampleResult sample(const Denoiser& denoiser, const std::vector<AttachedAdapter>& adapters,
                    const NoiseSchedule& schedule, const LatentCodec& codec, std::span<const std::size_t> classes,
                    const Rng& rng, SampleOptions options) {
  if (schedule.steps() != denoiser.steps()) throw Error("sample: schedule does not match denoiser");
  if (codec.latent_dim() != denoiser.latent_dim()) throw DimensionError("sample: codec does not match denoiser");
  const std::size_t n = classes.size();
  const std::size_t d = denoiser.latent_dim();
  std::vector<Rng> streams;
  streams.reserve(n);
  for (std::size_t i = 0; i < n; ++i) streams.push_back(rng.fork(static_cast<std::uint64_t>(i)));

  Tensor z({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (double& v : z.row(i)) v = streams[i].normal();
  }
  const std::vector<std::size_t> cs(classes.begin(), classes.end());
  const std::vector<std::size_t> null_cs(n, denoiser.null_class());
  for (std::size_t t = schedule.steps(); t >= 1; --t) {
    const std::vector<std::size_t> ts(n, t);
    Tensor eps = predict_eps(denoiser, adapters, z, ts, cs).eps;
    if (options.guidance && *options.guidance != 1.0) {
      const Tensor uncond = predict_eps(denoiser, adapters, z, ts, null_cs).eps;
      const double w = *options.guidance;
      eps = uncond + (eps - uncond) * w;
    }
    const double beta = schedule.beta(t);
    const double ab = schedule.alpha_bar(t);
    const double coef = beta / std::sqrt(1.0 - ab);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha(t));
    const double sigma = t > 1 ? std::sqrt(beta * (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - ab)) : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      auto zr = z.row(i);
      auto er = eps.row(i);
      for (std::size_t j = 0; j < d; ++j) {
        zr[j] = inv_sqrt_alpha * (zr[j] - coef * er[j]);
        if (t > 1) zr[j] += sigma * streams[i].normal();
      }
    }
    require_finite(z, "sampler state");
  }
  SampleResult out;
  out.images = clamp_unit(codec.decode(z));
  out.latents = std::move(z);
  return out;
}

}  // namespace lorakey
