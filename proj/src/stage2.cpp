#include "lorakey/stage2.hpp"

#include <cmath>
#include <map>

#include "lorakey/error.hpp"
#include "lorakey/losses.hpp"
#include "lorakey/optimizer.hpp"

namespace lorakey {

std::string to_string(ProjectionMode m) {
  switch (m) {
    case ProjectionMode::kGlobal:
      return "global";
    case ProjectionMode::kPerLayer:
      return "per_layer";
    case ProjectionMode::kOff:
      return "off";
  }
  return "global";
}

ProjectionMode projection_mode_from_string(const std::string& s) {
  if (s == "global") return ProjectionMode::kGlobal;
  if (s == "per_layer") return ProjectionMode::kPerLayer;
  if (s == "off") return ProjectionMode::kOff;
  throw ConfigError("unknown projection mode '" + s + "'");
}

void GopConfig::validate() const {
  if (!(epsilon > 0.0)) throw ConfigError("gop epsilon must be > 0");
  if (accumulation < 1) throw ConfigError("gop accumulation must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("gop learning rate must be > 0");
  if (lambda_sem < 0.0) throw ConfigError("lambda_sem must be >= 0");
}

// ---------------------------------------------------------------------------
// Projection

GopResult gop_project(const GradVector& g_wm, const GradVector& g_sem, double epsilon) {
  if (!g_wm.same_structure(g_sem)) throw DimensionError("gop_project: gradient structures differ");
  GopResult r;
  const double denom = dot(g_sem, g_sem) + epsilon;
  r.alpha = denom > 0.0 ? dot(g_wm, g_sem) / denom : 0.0;
  r.projected = g_wm;
  r.projected.axpy(-r.alpha, g_sem);
  return r;
}

namespace {

std::string layer_of(const std::string& param) {
  const auto dot_pos = param.rfind('.');
  return dot_pos == std::string::npos ? param : param.substr(0, dot_pos);
}

double safe_cosine(const GradVector& u, const GradVector& v) {
  const double nu = norm(u), nv = norm(v);
  if (nu == 0.0 || nv == 0.0) return 0.0;
  return dot(u, v) / (nu * nv);
}

}  // namespace

GopResult gop_project_per_layer(const GradVector& g_wm, const GradVector& g_sem, double epsilon) {
  if (!g_wm.same_structure(g_sem)) throw DimensionError("gop_project: gradient structures differ");
  std::map<std::string, std::pair<double, double>> sums;  // layer -> (<wm,sem>, ||sem||^2)
  std::vector<std::string> order;
  for (std::size_t i = 0; i < g_wm.entries(); ++i) {
    const std::string layer = layer_of(g_wm.name(i));
    if (!sums.contains(layer)) order.push_back(layer);
    auto& s = sums[layer];
    s.first += dot(g_wm[i].values(), g_sem[i].values());
    s.second += dot(g_sem[i].values(), g_sem[i].values());
  }
  std::map<std::string, double> alphas;
  GopResult r;
  for (const std::string& layer : order) {
    const auto& s = sums[layer];
    const double denom = s.second + epsilon;
    alphas[layer] = denom > 0.0 ? s.first / denom : 0.0;
    r.alpha += alphas[layer];
  }
  r.alpha /= static_cast<double>(std::max<std::size_t>(order.size(), 1));
  r.projected = g_wm;
  for (std::size_t i = 0; i < g_wm.entries(); ++i) axpy(-alphas[layer_of(g_wm.name(i))], g_sem[i], r.projected[i]);
  return r;
}

GopResult gop_apply(const GradVector& g_wm, const GradVector& g_sem, const GopConfig& config) {
  switch (config.mode) {
    case ProjectionMode::kGlobal:
      return gop_project(g_wm, g_sem, config.epsilon);
    case ProjectionMode::kPerLayer:
      return gop_project_per_layer(g_wm, g_sem, config.epsilon);
    case ProjectionMode::kOff:
      break;
  }
  return {g_wm, 0.0};
}

// ---------------------------------------------------------------------------
// Losses

WatermarkBatch draw_watermark_batch(const SyntheticWorld& world, const NoiseSchedule& schedule, std::size_t n,
                                    Rng& rng) {
  WatermarkBatch b;
  b.c.resize(n);
  b.t.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    b.c[i] = world.draw_class(rng);
    b.t[i] = 1 + rng.uniform_index(schedule.steps());
  }
  b.z0 = sample_latents(world, b.c, rng);
  b.eps = rng.normal_tensor({n, world.latent_dim()});
  return b;
}

WatermarkLoss watermark_consistency_loss(const Denoiser& base, const LoraAdapter& key, const MessageEncoder& encoder,
                                         const Message& message, const NoiseSchedule& schedule,
                                         const WatermarkBatch& batch, bool want_grad) {
  if (batch.z0.rank() != 2 || batch.z0.cols() != base.latent_dim()) {
    throw DimensionError("watermark batch latents must be [N x " + std::to_string(base.latent_dim()) + "]");
  }
  const std::size_t n = batch.z0.rows();
  if (batch.t.size() != n || batch.c.size() != n) throw DimensionError("watermark batch t/c length mismatch");
  require_same_shape(batch.z0, batch.eps, "watermark batch eps");

  WatermarkLoss out;
  WatermarkCache& cache = out.cache;
  const Tensor z_wm = embed_message(encoder, batch.z0, message);
  const Tensor z_t = forward_diffuse(schedule, batch.z0, batch.t, batch.eps);
  cache.z_wm_t = forward_diffuse(schedule, z_wm, batch.t, batch.eps);
  cache.t = batch.t;
  cache.z0 = batch.z0;
  cache.attached = {{&key, 1.0}};

  const Tensor eps_base = predict_eps(base, {}, z_t, batch.t, batch.c).eps;
  cache.key = predict_eps(base, cache.attached, cache.z_wm_t, batch.t, batch.c);
  // Squared L2 norm per row, averaged over the batch.
  LossResult mse = loss_mse(cache.key.eps, eps_base);
  const double d = static_cast<double>(base.latent_dim());
  mse.value *= d;
  mse.grad *= d;
  out.value = mse.value;
  if (!std::isfinite(out.value)) throw NonFiniteError("watermark consistency loss is not finite");
  if (want_grad) {
    BackwardOptions opts;
    opts.param_grads = false;
    opts.input_grad = false;
    const MlpGradients g = eps_backward(base, cache.key, mse.grad, opts);
    out.grad = adapter_gradient(cache.attached, 0, g.terms);
  }
  return out;
}

SemanticLoss semantic_consistency_loss(const Denoiser& base, const NoiseSchedule& schedule, const LatentCodec& codec,
                                       const PerceptionNet& perception, const WatermarkCache& cache, bool want_grad) {
  const Tensor& eps_key = cache.key.eps;
  const Tensor z0_hat = estimate_z0(schedule, cache.z_wm_t, cache.t, eps_key);
  const Tensor ref_features = perception.perceive(codec.decode(cache.z0)).features;
  const Perception wm = perception.perceive(codec.decode(z0_hat));
  LossResult cos = loss_cosine_distance_rows(ref_features, wm.features);

  SemanticLoss out;
  out.value = cos.value;
  if (!std::isfinite(out.value)) throw NonFiniteError("semantic consistency loss is not finite");
  if (!want_grad) return out;
  Tensor grad_z0 = codec.decode_backward(perception.backward(wm, cos.grad));
  // d z0_hat / d eps_hat = -sqrt(1 - abar) / sqrt(abar), row-wise
  for (std::size_t i = 0; i < grad_z0.rows(); ++i) {
    const double ab = schedule.alpha_bar(cache.t[i]);
    const double f = -std::sqrt(1.0 - ab) / std::sqrt(ab);
    for (double& v : grad_z0.row(i)) v *= f;
  }
  BackwardOptions opts;
  opts.param_grads = false;
  opts.input_grad = false;
  const MlpGradients g = eps_backward(base, cache.key, grad_z0, opts);
  out.grad = adapter_gradient(cache.attached, 0, g.terms);
  return out;
}

// ---------------------------------------------------------------------------
// Training

namespace {

std::vector<std::string> target_layers(const Denoiser& base, const std::vector<std::string>& requested) {
  return requested.empty() ? base.layer_names() : requested;
}

}  // namespace

WatermarkTrainResult train_watermark_lora(const Denoiser& base, const SyntheticWorld& world, const LatentCodec& codec,
                                          const PerceptionNet& perception, const MessageEncoder& encoder,
                                          const Message& message, const NoiseSchedule& schedule,
                                          const WatermarkTrainConfig& config, Rng& rng) {
  config.gop.validate();
  if (!base.frozen()) throw Error("watermark training requires a frozen base denoiser");
  if (message.size() != encoder.message_length()) throw DimensionError("message length does not match the encoder");
  WatermarkTrainResult result;
  Rng init_rng = rng.fork("key-init");
  result.adapter = init_lora(base, target_layers(base, config.layers), config.rank, init_rng, AdapterRole::kWatermark);
  LoraAdapter& key = result.adapter;
  key.metadata["message_length"] = message.size();

  AdamWConfig opt_cfg;
  opt_cfg.learning_rate = config.gop.learning_rate;
  opt_cfg.weight_decay = config.weight_decay;
  AdamW opt(opt_cfg);
  const std::vector<Tensor*> refs = key.parameter_refs();
  GradVector accumulated = key.parameters().zeros_like();
  std::size_t pending = 0;

  for (std::size_t step = 0; step < config.steps; ++step) {
    const WatermarkBatch batch = draw_watermark_batch(world, schedule, config.batch, rng);
    const WatermarkLoss wm = watermark_consistency_loss(base, key, encoder, message, schedule, batch);
    const SemanticLoss sem = semantic_consistency_loss(base, schedule, codec, perception, wm.cache);
    GopResult gop = gop_apply(wm.grad, sem.grad, config.gop);
    result.log.push_back({step, wm.value, sem.value, gop.alpha, safe_cosine(wm.grad, sem.grad),
                          safe_cosine(gop.projected, sem.grad)});
    if (config.gop.include_sem_update) gop.projected.axpy(config.gop.lambda_sem, sem.grad);
    // Micro-step updates are summed, then applied once per accumulation window.
    accumulated += gop.projected;
    if (++pending == config.gop.accumulation || step + 1 == config.steps) {
      opt.step(refs, accumulated);
      accumulated *= 0.0;
      pending = 0;
    }
  }
  return result;
}

WatermarkLossEval evaluate_watermark_losses(const Denoiser& base, const std::vector<AttachedAdapter>& others,
                                            const LoraAdapter& key, double gamma, const SyntheticWorld& world,
                                            const LatentCodec& codec, const PerceptionNet& perception,
                                            const MessageEncoder& encoder, const Message& message,
                                            const NoiseSchedule& schedule, std::size_t batches, std::size_t batch,
                                            Rng& rng) {
  // Fold the other adapters and gamma into a single evaluation: key terms are
  // scaled through a copy of the adapter.
  LoraAdapter scaled = key;
  scaled.scale *= gamma;
  Denoiser host = others.empty() ? base : [&] {
    std::vector<LoraAdapter> a;
    std::vector<double> c;
    for (const AttachedAdapter& o : others) {
      a.push_back(*o.adapter);
      c.push_back(o.coefficient);
    }
    return MergedModel(base, std::move(a), std::move(c)).materialize();
  }();
  WatermarkLossEval ev;
  for (std::size_t i = 0; i < batches; ++i) {
    const WatermarkBatch b = draw_watermark_batch(world, schedule, batch, rng);
    const WatermarkLoss wm = watermark_consistency_loss(host, scaled, encoder, message, schedule, b, false);
    ev.l_wm += wm.value;
    ev.l_sem += semantic_consistency_loss(host, schedule, codec, perception, wm.cache, false).value;
  }
  ev.l_wm /= static_cast<double>(batches);
  ev.l_sem /= static_cast<double>(batches);
  return ev;
}

// ---------------------------------------------------------------------------
// Style

StyleSpec StyleSpec::identity() { return {}; }

StyleSpec StyleSpec::coordinate_shift(std::size_t latent_dim, std::size_t coordinate, double amount) {
  if (coordinate >= latent_dim) throw DimensionError("style shift coordinate out of range");
  StyleSpec s;
  s.shift = Tensor({latent_dim});
  s.shift[coordinate] = amount;
  return s;
}

bool StyleSpec::is_identity() const {
  const bool no_shift = shift.empty() || max_abs(shift) == 0.0;
  bool no_transform = transform.empty();
  if (!no_transform) {
    no_transform = true;
    for (std::size_t i = 0; i < transform.rows(); ++i) {
      for (std::size_t j = 0; j < transform.cols(); ++j) {
        if (transform.at(i, j) != (i == j ? 1.0 : 0.0)) no_transform = false;
      }
    }
  }
  return no_shift && no_transform;
}

void StyleSpec::validate(std::size_t latent_dim) const {
  if (!shift.empty() && shift.size() != latent_dim) throw DimensionError("style shift has the wrong length");
  if (!transform.empty()) {
    if (transform.rank() != 2 || transform.rows() != latent_dim || transform.cols() != latent_dim) {
      throw DimensionError("style transform must be square over the latent");
    }
    const double det = transform.mat().fullPivLu().determinant();
    if (!std::isfinite(det) || std::abs(det) < 1e-12) throw ConfigError("style transform is not invertible");
  }
}

Tensor StyleSpec::apply(const Tensor& z) const {
  Tensor out = transform.empty() ? z : matmul_nt(z, transform);
  if (!shift.empty()) {
    for (std::size_t i = 0; i < out.rows(); ++i) {
      auto row = out.row(i);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += shift[j];
    }
  }
  return out;
}

StyleTrainResult train_style_lora(const Denoiser& base, const SyntheticWorld& world, const StyleSpec& style,
                                  const NoiseSchedule& schedule, const StyleTrainConfig& config, Rng& rng) {
  if (!base.frozen()) throw Error("style training requires a frozen base denoiser");
  style.validate(world.latent_dim());
  StyleTrainResult result;
  Rng init_rng = rng.fork("style-init");
  result.adapter = init_lora(base, target_layers(base, config.layers), config.rank, init_rng, AdapterRole::kStyle);
  LoraAdapter& adapter = result.adapter;

  AdamWConfig opt_cfg;
  opt_cfg.learning_rate = config.learning_rate;
  opt_cfg.weight_decay = config.weight_decay;
  AdamW opt(opt_cfg);
  const std::vector<Tensor*> refs = adapter.parameter_refs();
  const std::vector<AttachedAdapter> attached = {{&adapter, 1.0}};
  BackwardOptions opts;
  opts.param_grads = false;
  opts.input_grad = false;
  for (std::size_t step = 0; step < config.steps; ++step) {
    const WatermarkBatch b = draw_watermark_batch(world, schedule, config.batch, rng);
    const Tensor z_t = forward_diffuse(schedule, style.apply(b.z0), b.t, b.eps);
    const EpsPrediction pred = predict_eps(base, attached, z_t, b.t, b.c);
    LossResult mse = loss_mse(pred.eps, b.eps);
    if (!std::isfinite(mse.value)) throw NonFiniteError("style loss diverged");
    result.losses.push_back(mse.value);
    opt.step(refs, adapter_gradient(attached, 0, eps_backward(base, pred, mse.grad, opts).terms));
  }
  return result;
}

}  // namespace lorakey
