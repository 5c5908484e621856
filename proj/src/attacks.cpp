#include "lorakey/attacks.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <sstream>

#include "lorakey/error.hpp"
#include "lorakey/losses.hpp"
#include "lorakey/optimizer.hpp"
#include "lorakey/stage2.hpp"

namespace lorakey {

// ---------------------------------------------------------------------------
// Distortion descriptors

ImageDistortion ImageDistortion::identity() { return {"identity", 0.0, 1.0, 1.0}; }
ImageDistortion ImageDistortion::resize(double scale) { return {"resize", scale, 1.0, 1.0}; }
ImageDistortion ImageDistortion::gaussian_blur(double sigma) { return {"gaussian_blur", sigma, 1.0, 1.0}; }
ImageDistortion ImageDistortion::gaussian_noise(double intensity) { return {"gaussian_noise", intensity, 1.0, 1.0}; }
ImageDistortion ImageDistortion::jpeg(double quality) { return {"jpeg", quality, 1.0, 1.0}; }
ImageDistortion ImageDistortion::brightness(double low, double high) { return {"brightness", 0.0, low, high}; }
ImageDistortion ImageDistortion::contrast(double low, double high) { return {"contrast", 0.0, low, high}; }
ImageDistortion ImageDistortion::saturation(double low, double high) { return {"saturation", 0.0, low, high}; }
ImageDistortion ImageDistortion::sharpen(double factor) { return {"sharpen", factor, 1.0, 1.0}; }

namespace {

bool is_jitter(const std::string& name) {
  return name == "brightness" || name == "contrast" || name == "saturation";
}

std::string format_number(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

}  // namespace

std::string ImageDistortion::label() const {
  if (name == "identity") return name;
  if (is_jitter(name)) return name + "(" + format_number(low) + "-" + format_number(high) + ")";
  return name + "(" + format_number(value) + ")";
}

DistortionSuite default_distortion_suite() {
  return {ImageDistortion::resize(0.5),          ImageDistortion::gaussian_blur(4.0),
          ImageDistortion::gaussian_noise(0.10), ImageDistortion::jpeg(50),
          ImageDistortion::brightness(0.8, 1.2), ImageDistortion::contrast(0.8, 1.2),
          ImageDistortion::saturation(0.8, 1.2), ImageDistortion::sharpen(10.0)};
}

DistortionSuite neutral_distortion_suite() {
  return {ImageDistortion::resize(1.0),          ImageDistortion::gaussian_noise(0.0),
          ImageDistortion::jpeg(100),            ImageDistortion::brightness(1.0, 1.0),
          ImageDistortion::contrast(1.0, 1.0),   ImageDistortion::saturation(1.0, 1.0),
          ImageDistortion::sharpen(1.0)};
}

// ---------------------------------------------------------------------------
// Pixel operations on one [C,H,W] image

namespace {

struct Plane {
  std::size_t h, w;
  double* p;
  double at(std::ptrdiff_t y, std::ptrdiff_t x) const {
    y = std::clamp<std::ptrdiff_t>(y, 0, static_cast<std::ptrdiff_t>(h) - 1);
    x = std::clamp<std::ptrdiff_t>(x, 0, static_cast<std::ptrdiff_t>(w) - 1);
    return p[y * static_cast<std::ptrdiff_t>(w) + x];
  }
};

// Bilinear sample with half-pixel centers and edge clamping; written as lerps
// so constant regions are reproduced exactly.
double bilinear(const Plane& src, double sy, double sx) {
  sy = std::clamp(sy, 0.0, static_cast<double>(src.h - 1));
  sx = std::clamp(sx, 0.0, static_cast<double>(src.w - 1));
  const auto y0 = static_cast<std::ptrdiff_t>(std::floor(sy));
  const auto x0 = static_cast<std::ptrdiff_t>(std::floor(sx));
  const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
  const double a = src.at(y0, x0), b = src.at(y0, x0 + 1);
  const double c = src.at(y0 + 1, x0), d = src.at(y0 + 1, x0 + 1);
  const double top = a + fx * (b - a);
  const double bottom = c + fx * (d - c);
  return top + fy * (bottom - top);
}

std::vector<double> resample(const Plane& src, std::size_t out_h, std::size_t out_w) {
  std::vector<double> out(out_h * out_w);
  const double ry = static_cast<double>(src.h) / static_cast<double>(out_h);
  const double rx = static_cast<double>(src.w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    for (std::size_t x = 0; x < out_w; ++x) {
      out[y * out_w + x] = bilinear(src, (y + 0.5) * ry - 0.5, (x + 0.5) * rx - 0.5);
    }
  }
  return out;
}

void resize_image(std::span<double> img, const ImageShape& s, double scale) {
  if (!(scale > 0.0 && scale <= 1.0)) throw ConfigError("resize scale must lie in (0, 1]");
  if (scale == 1.0) return;
  const std::size_t sh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(s.height * scale)));
  const std::size_t sw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(s.width * scale)));
  for (std::size_t c = 0; c < s.channels; ++c) {
    double* base = img.data() + c * s.height * s.width;
    std::vector<double> small = resample({s.height, s.width, base}, sh, sw);
    std::vector<double> back = resample({sh, sw, small.data()}, s.height, s.width);
    std::copy(back.begin(), back.end(), base);
  }
}

void convolve3(std::span<double> img, const ImageShape& s, const std::array<double, 9>& k, bool keep_border) {
  for (std::size_t c = 0; c < s.channels; ++c) {
    double* base = img.data() + c * s.height * s.width;
    const std::vector<double> src(base, base + s.height * s.width);
    const Plane p{s.height, s.width, const_cast<double*>(src.data())};
    for (std::size_t y = 0; y < s.height; ++y) {
      for (std::size_t x = 0; x < s.width; ++x) {
        if (keep_border && (y == 0 || x == 0 || y + 1 == s.height || x + 1 == s.width)) continue;
        double acc = 0.0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            acc += k[(dy + 1) * 3 + (dx + 1)] * p.at(static_cast<std::ptrdiff_t>(y) + dy,
                                                     static_cast<std::ptrdiff_t>(x) + dx);
          }
        }
        base[y * s.width + x] = acc;
      }
    }
  }
}

std::array<double, 9> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("blur sigma must be > 0");
  std::array<double, 9> k{};
  double total = 0.0;
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx) {
      const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      k[(dy + 1) * 3 + (dx + 1)] = v;
      total += v;
    }
  }
  for (double& v : k) v /= total;
  return k;
}

void sharpen_image(std::span<double> img, const ImageShape& s, double factor) {
  // Blend away from the 3x3 smoothing filter [[1,1,1],[1,5,1],[1,1,1]]/13;
  // border pixels are left unfiltered.
  std::vector<double> smooth(img.begin(), img.end());
  std::array<double, 9> k;
  k.fill(1.0 / 13.0);
  k[4] = 5.0 / 13.0;
  convolve3(smooth, s, k, true);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] += (factor - 1.0) * (img[i] - smooth[i]);
}

void brightness_image(std::span<double> img, double f) {
  for (double& v : img) v *= f;
}

void contrast_image(std::span<double> img, double f) {
  double mean = 0.0;
  for (double v : img) mean += v;
  mean /= static_cast<double>(img.size());
  for (double& v : img) v += (f - 1.0) * (v - mean);
}

void saturation_image(std::span<double> img, const ImageShape& s, double f) {
  const std::size_t hw = s.height * s.width;
  for (std::size_t i = 0; i < hw; ++i) {
    double gray = 0.0;
    for (std::size_t c = 0; c < s.channels; ++c) gray += img[c * hw + i];
    gray /= static_cast<double>(s.channels);
    for (std::size_t c = 0; c < s.channels; ++c) img[c * hw + i] += (f - 1.0) * (img[c * hw + i] - gray);
  }
}

constexpr std::array<int, 64> kLuminanceTable = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,  14, 13, 16, 24,  40,  57,
    69, 56, 14, 17, 22,  29,  51,  87,  80, 62, 18, 22, 37,  56,  68,  109, 103, 77, 24, 35, 55,  64,
    81, 104, 113, 92, 49, 64, 78,  87,  103, 121, 120, 101, 72, 92, 95, 98,  112, 100, 103, 99};

// Orthonormal 8-point DCT-II basis, cos_table[u][x].
const std::array<std::array<double, 8>, 8>& dct_basis() {
  static const auto table = [] {
    std::array<std::array<double, 8>, 8> t{};
    for (int u = 0; u < 8; ++u) {
      const double a = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int x = 0; x < 8; ++x) t[u][x] = a * std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
    }
    return t;
  }();
  return table;
}

}  // namespace

std::vector<int> jpeg_quant_table(double quality) {
  if (!(quality >= 1.0 && quality <= 100.0)) throw ConfigError("JPEG quality must lie in [1, 100]");
  // IJG convention: scale = 5000/q below 50, 200 - 2q from 50 up.
  const double scale = quality < 50.0 ? 5000.0 / quality : 200.0 - 2.0 * quality;
  std::vector<int> q(64);
  for (std::size_t i = 0; i < 64; ++i) {
    q[i] = std::clamp(static_cast<int>(std::floor((kLuminanceTable[i] * scale + 50.0) / 100.0)), 1, 255);
  }
  return q;
}

std::vector<double> jpeg_plane(const std::vector<double>& plane, std::size_t height, std::size_t width,
                               double quality) {
  if (plane.size() != height * width) throw DimensionError("jpeg_plane: plane size mismatch");
  const std::vector<int> q = jpeg_quant_table(quality);
  const auto& basis = dct_basis();
  const std::size_t ph = (height + 7) / 8 * 8, pw = (width + 7) / 8 * 8;
  std::vector<double> out(plane.size());
  std::array<double, 64> block{}, tmp{}, coef{};
  for (std::size_t by = 0; by < ph; by += 8) {
    for (std::size_t bx = 0; bx < pw; bx += 8) {
      for (std::size_t y = 0; y < 8; ++y) {
        for (std::size_t x = 0; x < 8; ++x) {
          const std::size_t sy = std::min(by + y, height - 1), sx = std::min(bx + x, width - 1);
          block[y * 8 + x] = plane[sy * width + sx] * 255.0 - 128.0;
        }
      }
      // Separable forward transform: rows then columns.
      for (int y = 0; y < 8; ++y) {
        for (int u = 0; u < 8; ++u) {
          double acc = 0.0;
          for (int x = 0; x < 8; ++x) acc += basis[u][x] * block[y * 8 + x];
          tmp[y * 8 + u] = acc;
        }
      }
      for (int v = 0; v < 8; ++v) {
        for (int u = 0; u < 8; ++u) {
          double acc = 0.0;
          for (int y = 0; y < 8; ++y) acc += basis[v][y] * tmp[y * 8 + u];
          coef[v * 8 + u] = std::round(acc / q[v * 8 + u]) * q[v * 8 + u];
        }
      }
      for (int v = 0; v < 8; ++v) {
        for (int x = 0; x < 8; ++x) {
          double acc = 0.0;
          for (int u = 0; u < 8; ++u) acc += basis[u][x] * coef[v * 8 + u];
          tmp[v * 8 + x] = acc;
        }
      }
      for (std::size_t y = 0; y < 8; ++y) {
        for (std::size_t x = 0; x < 8; ++x) {
          double acc = 0.0;
          for (std::size_t v = 0; v < 8; ++v) acc += basis[v][y] * tmp[v * 8 + x];
          if (by + y < height && bx + x < width) out[(by + y) * width + bx + x] = (acc + 128.0) / 255.0;
        }
      }
    }
  }
  return out;
}

Tensor apply_distortion(const ImageDistortion& d, const Tensor& images, const ImageShape& shape, const Rng& rng) {
  Tensor out = as_image_rows(images, shape.size());
  const std::size_t hw = shape.height * shape.width;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    Rng r = rng.fork(i);
    auto img = out.row(i);
    double factor = d.low;
    if (is_jitter(d.name)) {
      if (!(d.low > 0.0 && d.low <= d.high)) throw ConfigError("color jitter range must satisfy 0 < low <= high");
      if (d.high > d.low) factor = r.uniform(d.low, d.high);
    }
    if (d.name == "identity") {
    } else if (d.name == "resize") {
      resize_image(img, shape, d.value);
    } else if (d.name == "gaussian_blur") {
      convolve3(img, shape, gaussian_kernel(d.value), false);
    } else if (d.name == "gaussian_noise") {
      if (d.value < 0.0) throw ConfigError("noise intensity must be >= 0");
      for (double& v : img) v += d.value * r.normal();
    } else if (d.name == "jpeg") {
      for (std::size_t c = 0; c < shape.channels; ++c) {
        const std::vector<double> plane(img.begin() + c * hw, img.begin() + (c + 1) * hw);
        const std::vector<double> q = jpeg_plane(plane, shape.height, shape.width, d.value);
        std::copy(q.begin(), q.end(), img.begin() + c * hw);
      }
    } else if (d.name == "brightness") {
      brightness_image(img, factor);
    } else if (d.name == "contrast") {
      contrast_image(img, factor);
    } else if (d.name == "saturation") {
      saturation_image(img, shape, factor);
    } else if (d.name == "sharpen") {
      sharpen_image(img, shape, d.value);
    } else {
      throw ConfigError("unknown distortion '" + d.name + "'");
    }
    for (double& v : img) v = std::clamp(v, 0.0, 1.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameter-space attacks

MergedModel prune_attack(const MergedModel& model, double fraction) {
  std::vector<LoraAdapter> pruned;
  for (const LoraAdapter& a : model.adapters()) pruned.push_back(prune_adapter(a, fraction));
  return MergedModel(model.base(), std::move(pruned), model.coefficients());
}

MergedModel finetune_attack(const MergedModel& model, const SyntheticWorld& world, const NoiseSchedule& schedule,
                            const FinetuneConfig& config, Rng& rng) {
  std::vector<LoraAdapter> adapters = model.adapters();
  const Denoiser& base = model.base();
  std::vector<AttachedAdapter> attached;
  std::vector<Tensor*> refs;
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    attached.push_back({&adapters[i], model.coefficients()[i]});
    for (Tensor* t : adapters[i].parameter_refs()) refs.push_back(t);
  }
  AdamWConfig opt_cfg;
  opt_cfg.learning_rate = config.learning_rate;
  opt_cfg.weight_decay = 0.0;
  AdamW opt(opt_cfg);
  BackwardOptions opts;
  opts.param_grads = false;
  opts.input_grad = false;
  for (std::size_t step = 0; step < config.steps && !adapters.empty(); ++step) {
    const WatermarkBatch b = draw_watermark_batch(world, schedule, config.batch, rng);
    const EpsPrediction pred = predict_eps(base, attached, forward_diffuse(schedule, b.z0, b.t, b.eps), b.t, b.c);
    LossResult mse = loss_mse(pred.eps, b.eps);
    if (!std::isfinite(mse.value)) throw NonFiniteError("fine-tuning attack diverged");
    const MlpGradients g = eps_backward(base, pred, mse.grad, opts);
    GradVector grads;
    for (std::size_t i = 0; i < adapters.size(); ++i) {
      // Adapters share layer names; prefix by position.
      const GradVector gi = adapter_gradient(attached, i, g.terms);
      for (std::size_t k = 0; k < gi.entries(); ++k) grads.add(std::to_string(i) + "." + gi.name(k), gi[k]);
    }
    opt.step(refs, grads);
  }
  return MergedModel(base, std::move(adapters), model.coefficients());
}

MergedModel fusion_attack(const Denoiser& base, const LoraAdapter& key, double gamma,
                          const std::vector<LoraAdapter>& extras, const std::vector<double>& coefficients) {
  if (extras.size() != coefficients.size()) throw DimensionError("one coefficient per fused adapter is required");
  std::vector<LoraAdapter> adapters{key};
  std::vector<double> coefs{gamma};
  adapters.insert(adapters.end(), extras.begin(), extras.end());
  coefs.insert(coefs.end(), coefficients.begin(), coefficients.end());
  return MergedModel(base, std::move(adapters), std::move(coefs));
}

// ---------------------------------------------------------------------------
// Evaluation harness

Tensor generate_probe_images(const MergedModel& model, const DeploymentProbe& probe, std::size_t n, const Rng& rng) {
  Rng class_rng = rng.fork("classes");
  std::vector<std::size_t> classes(n);
  for (auto& c : classes) c = probe.world->draw_class(class_rng);
  return sample(model.base(), model.attached(), *probe.schedule, *probe.codec, classes, rng.fork("chains")).images;
}

AttackRow evaluate_images(const std::string& name, const Tensor& images, const DeploymentProbe& probe) {
  const Tensor logits = extract_bits(*probe.decoder, *probe.codec, images).logits;
  const VerificationReport per = batch_verify_logits(probe.policy, logits, 1, Aggregation::kPerImage);
  AttackRow row;
  row.name = name;
  row.bit_accuracy = per.mean_bit_accuracy;
  row.tpr = per.acceptance_rate;
  row.tpr_averaged = row.tpr;
  if (probe.group_size > 1 && logits.rows() >= probe.group_size) {
    row.tpr_averaged = batch_verify_logits(probe.policy, logits, probe.group_size, probe.aggregation).acceptance_rate;
  }
  return row;
}

const AttackRow& AttackReport::row(const std::string& name) const {
  for (const AttackRow& r : rows) {
    if (r.name == name) return r;
  }
  throw Error("attack report has no row '" + name + "'");
}

AttackReport run_robustness_suite(const MergedModel& model, const DeploymentProbe& probe,
                                  const DistortionSuite& suite, std::size_t n_images, const Rng& rng) {
  if (n_images == 0) throw Error("robustness suite needs at least one image");
  AttackReport report;
  const Tensor images = generate_probe_images(model, probe, n_images, rng.fork("watermarked"));
  report.rows.push_back(evaluate_images("clean", images, probe));
  for (std::size_t k = 0; k < suite.size(); ++k) {
    const Tensor distorted = apply_distortion(suite[k], images, probe.codec->image_shape(), rng.fork(suite[k].label()));
    report.rows.push_back(evaluate_images(suite[k].label(), distorted, probe));
    report.adversarial_average += report.rows.back().bit_accuracy;
  }
  if (!suite.empty()) report.adversarial_average /= static_cast<double>(suite.size());
  const MergedModel bare(model.base(), {}, {});
  report.rows.push_back(evaluate_images("unwatermarked", generate_probe_images(bare, probe, n_images, rng.fork("control")),
                                        probe));
  return report;
}

nlohmann::json attack_report_json(const AttackReport& report) {
  nlohmann::json j;
  j["rows"] = nlohmann::json::array();
  for (const AttackRow& r : report.rows) {
    j["rows"].push_back(
        {{"name", r.name}, {"bit_accuracy", r.bit_accuracy}, {"tpr", r.tpr}, {"tpr_averaged", r.tpr_averaged}});
  }
  j["curves"] = nlohmann::json::array();
  for (const CurvePoint& p : report.curves) {
    j["curves"].push_back({{"attack", p.attack},
                           {"parameter", p.parameter},
                           {"bit_accuracy", p.bit_accuracy},
                           {"tpr", p.tpr},
                           {"tpr_averaged", p.tpr_averaged}});
  }
  j["adversarial_average"] = report.adversarial_average;
  return j;
}

std::string attack_report_csv(const AttackReport& report) {
  std::ostringstream out;
  out.precision(10);
  out << "condition,bit_accuracy,tpr,tpr_averaged\n";
  for (const AttackRow& r : report.rows) {
    out << '"' << r.name << "\"," << r.bit_accuracy << ',' << r.tpr << ',' << r.tpr_averaged << '\n';
  }
  return out.str();
}

std::string attack_curves_csv(const AttackReport& report) {
  std::ostringstream out;
  out.precision(10);
  out << "attack,parameter,bit_accuracy,tpr,tpr_averaged\n";
  for (const CurvePoint& p : report.curves) {
    out << p.attack << ',' << p.parameter << ',' << p.bit_accuracy << ',' << p.tpr << ',' << p.tpr_averaged << '\n';
  }
  return out.str();
}

}  // namespace lorakey
