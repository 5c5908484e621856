#include "lorakey/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/sha.h>

#include "lorakey/container.hpp"
#include "lorakey/error.hpp"
#include "lorakey/persist.hpp"

namespace lorakey {

namespace fs = std::filesystem;
using Json = nlohmann::json;

Json default_config() {
  return Json::parse(R"({
    "experiment": "default",
    "output_dir": "",
    "seed": 0,
    "world": {"seed": 1, "latent_dim": 64, "classes": 4, "mean_stddev": 2.0, "variance_min": 0.25,
              "variance_max": 1.0},
    "codec": {"seed": 2, "channels": 3, "height": 16, "width": 16, "pixel_offset": 0.5, "pixel_gain": 0.25,
              "spectral_width": 4.0},
    "perception": {"seed": 3, "hidden": 128, "features": 64},
    "schedule": {"steps": 100, "beta_start": 0.0001, "beta_end": 0.02},
    "base": {"seed": 5, "hidden_width": 256, "hidden_layers": 2, "time_dim": 16, "class_dim": 16,
             "steps": 20000, "batch": 64, "learning_rate": 0.002, "final_learning_rate": 0.00002,
             "null_class_probability": 0.1},
    "message": {"length": 16, "bits": ""},
    "prior": {"lambda_mse": 1.0, "lambda_perceptual": 0.1, "steps": 2000, "batch": 32, "learning_rate": 0.002,
              "encoder_hidden": 128, "decoder_hidden": 256, "encoder_gain": 1.0,
              "distortions": ["gaussian_noise", "random_mask", "quantize"], "noise_sigma": 0.05,
              "mask_fraction": 0.1, "quantize_levels": 32},
    "key": {"steps": 5000, "batch": 32, "rank": 8, "learning_rate": 0.001, "lambda_sem": 1.0, "epsilon": 1e-8,
            "accumulation": 4, "projection": "global", "include_sem_update": true},
    "style": {"name": "style0", "coordinate": 0, "amount": 2.0, "steps": 3000, "batch": 64, "rank": 8,
              "learning_rate": 0.0001},
    "protect": {"styles": ["style0"], "alpha": 1.0, "gamma": 1.0},
    "generate": {"count": 200, "guidance": 1.0, "ppm": 8},
    "verify": {"target_fpr": 0.001, "group_size": 4, "aggregation": "mean_logits"},
    "attack": {"suite": "default", "images": 200, "prune": [0.25, 0.5, 0.75], "finetune_steps": 500,
               "finetune_learning_rate": 0.0001, "fusion": true}
  })");
}

namespace {

std::string type_name(const Json& v) {
  if (v.is_number_unsigned()) return "non-negative integer";
  if (v.is_number()) return "number";
  return v.type_name();
}

bool same_kind(const Json& expected, const Json& v) {
  if (expected.is_number_unsigned()) return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
  if (expected.is_number()) return v.is_number();
  return expected.type() == v.type();
}

void check_against(const Json& schema, const Json& value, const std::string& path) {
  if (schema.is_object()) {
    if (!value.is_object()) throw ConfigError("config key '" + path + "' must be an object");
    for (const auto& [k, v] : value.items()) {
      const std::string sub = path.empty() ? k : path + "." + k;
      if (!schema.contains(k)) throw ConfigError("unknown config key '" + sub + "'");
      check_against(schema[k], v, sub);
    }
    return;
  }
  if (!same_kind(schema, value)) {
    throw ConfigError("config key '" + path + "' must be a " + type_name(schema) + ", got " + value.dump());
  }
  if (schema.is_array()) {
    for (const Json& v : value) {
      if (!same_kind(schema.front(), v)) {
        throw ConfigError("config key '" + path + "' holds " + v.dump() + ", expected " + type_name(schema.front()) +
                          " items");
      }
    }
  }
  if (value.is_number_float() && !std::isfinite(value.get<double>())) {
    throw ConfigError("config key '" + path + "' must be finite");
  }
}

void collect_paths(const Json& node, const std::string& prefix, std::vector<std::string>& out) {
  for (const auto& [k, v] : node.items()) {
    const std::string path = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) {
      collect_paths(v, path, out);
    } else {
      out.push_back(path);
    }
  }
}

Json::json_pointer pointer(const std::string& dotted) {
  std::string p = "/" + dotted;
  std::replace(p.begin(), p.end(), '.', '/');
  return Json::json_pointer(p);
}

std::string hex64(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << v;
  return out.str();
}

void write_text(const fs::path& path, const std::string& text) {
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string read_text(const fs::path& path) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

void require(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path)) {
    throw DependencyError("missing artifact '" + path.string() + "'; run '" + producer + "' first");
  }
}

double positive(const Json& doc, const std::string& key) {
  const double v = doc.at(pointer(key)).get<double>();
  if (!(v > 0.0)) throw ConfigError("config key '" + key + "' must be > 0");
  return v;
}

std::size_t at_least_one(const Json& doc, const std::string& key) {
  const std::size_t v = doc.at(pointer(key)).get<std::size_t>();
  if (v == 0) throw ConfigError("config key '" + key + "' must be >= 1");
  return v;
}

bool valid_name(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
  });
}

}  // namespace

void validate_config(const Json& config) { check_against(default_config(), config, ""); }

Json overlay_config(Json base, const Json& overrides) {
  validate_config(overrides);
  base.merge_patch(overrides);
  return base;
}

std::vector<std::string> config_key_paths() {
  std::vector<std::string> out;
  collect_paths(default_config(), "", out);
  return out;
}

Json parse_config_value(const std::string& path, const std::string& text) {
  const Json defaults = default_config();
  if (!defaults.contains(pointer(path)) || defaults.at(pointer(path)).is_object()) {
    throw ConfigError("unknown config key '" + path + "'");
  }
  const Json& d = defaults.at(pointer(path));
  auto scalar = [&](const Json& kind, const std::string& s) -> Json {
    if (kind.is_string()) return s;
    if (kind.is_boolean()) {
      if (s == "true" || s == "1") return true;
      if (s == "false" || s == "0") return false;
      throw ConfigError("config key '" + path + "' expects true or false, got '" + s + "'");
    }
    // JSON parsing keeps the integer/real distinction used by validation.
    try {
      const Json v = Json::parse(s);
      if (v.is_number()) return v;
    } catch (const Json::exception&) {
    }
    throw ConfigError("config key '" + path + "' expects a " + type_name(kind) + ", got '" + s + "'");
  };
  Json value;
  if (d.is_array()) {
    value = Json::array();
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
      if (!item.empty()) value.push_back(scalar(d.front(), item));
    }
  } else {
    value = scalar(d, text);
  }
  Json wrapped;
  wrapped[pointer(path)] = value;
  validate_config(wrapped);
  return value;
}

ExperimentConfig::ExperimentConfig() : doc_(default_config()) {}

ExperimentConfig::ExperimentConfig(const Json& overrides) : doc_(overlay_config(default_config(), overrides)) {}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  Json doc;
  try {
    doc = Json::parse(read_text(path));
  } catch (const Json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return ExperimentConfig(doc);
}

void ExperimentConfig::set(const std::string& path, const Json& value) {
  Json wrapped;
  wrapped[pointer(path)] = value;
  doc_ = overlay_config(doc_, wrapped);
}

std::string ExperimentConfig::hash() const {
  // Where artifacts go does not change what they contain.
  Json content = doc_;
  content.erase("output_dir");
  content.erase("experiment");
  return hex64(fnv1a64(content.dump()));
}

fs::path ExperimentConfig::directory() const {
  const std::string out = doc_["output_dir"];
  if (!out.empty()) return out;
  const std::string name = doc_["experiment"];
  if (!valid_name(name)) throw ConfigError("experiment name '" + name + "' must be [A-Za-z0-9_-]+");
  if (const char* home = std::getenv("LORAKEY_HOME"); home && *home) return fs::path(home) / name;
  return fs::path("lorakey_runs") / name;
}

std::uint64_t ExperimentConfig::seed() const { return doc_["seed"].get<std::uint64_t>(); }

ImageShape ExperimentConfig::image_shape() const {
  return {at_least_one(doc_, "codec.channels"), at_least_one(doc_, "codec.height"), at_least_one(doc_, "codec.width")};
}

CodecOptions ExperimentConfig::codec_options() const {
  const Json& c = doc_["codec"];
  return {.pixel_offset = c["pixel_offset"], .pixel_gain = positive(doc_, "codec.pixel_gain"),
          .spectral_width = c["spectral_width"]};
}

WorldOptions ExperimentConfig::world_options() const {
  const Json& w = doc_["world"];
  WorldOptions o{.classes = at_least_one(doc_, "world.classes"),
                 .mean_stddev = w["mean_stddev"],
                 .variance_min = positive(doc_, "world.variance_min"),
                 .variance_max = positive(doc_, "world.variance_max")};
  if (o.variance_max < o.variance_min) throw ConfigError("world.variance_max must be >= world.variance_min");
  return o;
}

PerceptionOptions ExperimentConfig::perception_options() const {
  return {.hidden = at_least_one(doc_, "perception.hidden"), .features = at_least_one(doc_, "perception.features")};
}

DenoiserConfig ExperimentConfig::denoiser_config() const {
  DenoiserConfig c;
  c.hidden_width = at_least_one(doc_, "base.hidden_width");
  c.hidden_layers = at_least_one(doc_, "base.hidden_layers");
  c.time_dim = at_least_one(doc_, "base.time_dim");
  c.class_dim = at_least_one(doc_, "base.class_dim");
  return c;
}

DenoiserTrainConfig ExperimentConfig::denoiser_train_config() const {
  const Json& b = doc_["base"];
  DenoiserTrainConfig c;
  c.steps = b["steps"];
  c.batch = at_least_one(doc_, "base.batch");
  c.learning_rate = positive(doc_, "base.learning_rate");
  c.final_learning_rate = positive(doc_, "base.final_learning_rate");
  c.null_class_probability = b["null_class_probability"];
  if (c.null_class_probability < 0.0 || c.null_class_probability > 1.0) {
    throw ConfigError("base.null_class_probability must lie in [0, 1]");
  }
  return c;
}

PriorTrainConfig ExperimentConfig::prior_train_config() const {
  const Json& p = doc_["prior"];
  PriorTrainConfig c;
  c.model.message_length = at_least_one(doc_, "message.length");
  c.model.encoder_hidden = at_least_one(doc_, "prior.encoder_hidden");
  c.model.decoder_hidden = at_least_one(doc_, "prior.decoder_hidden");
  c.model.encoder_gain = positive(doc_, "prior.encoder_gain");
  c.lambda_mse = p["lambda_mse"];
  c.lambda_perceptual = p["lambda_perceptual"];
  if (c.lambda_mse < 0.0 || c.lambda_perceptual < 0.0) throw ConfigError("prior loss weights must be >= 0");
  c.steps = p["steps"];
  c.batch = at_least_one(doc_, "prior.batch");
  c.learning_rate = positive(doc_, "prior.learning_rate");
  for (const Json& k : p["distortions"]) c.distortions.enabled.push_back(distortion_kind_from_string(k));
  c.distortions.noise_sigma = p["noise_sigma"];
  c.distortions.mask_fraction = p["mask_fraction"];
  c.distortions.quantize_levels = p["quantize_levels"];
  if (c.distortions.noise_sigma < 0.0) throw ConfigError("prior.noise_sigma must be >= 0");
  if (c.distortions.mask_fraction < 0.0 || c.distortions.mask_fraction > 1.0) {
    throw ConfigError("prior.mask_fraction must lie in [0, 1]");
  }
  if (c.distortions.quantize_levels < 2) throw ConfigError("prior.quantize_levels must be >= 2");
  c.distortions.image_shape = image_shape();
  return c;
}

WatermarkTrainConfig ExperimentConfig::key_train_config() const {
  const Json& k = doc_["key"];
  WatermarkTrainConfig c;
  c.steps = k["steps"];
  c.batch = at_least_one(doc_, "key.batch");
  c.rank = at_least_one(doc_, "key.rank");
  c.gop.learning_rate = positive(doc_, "key.learning_rate");
  c.gop.lambda_sem = k["lambda_sem"];
  c.gop.epsilon = k["epsilon"];
  c.gop.accumulation = at_least_one(doc_, "key.accumulation");
  c.gop.mode = projection_mode_from_string(k["projection"]);
  c.gop.include_sem_update = k["include_sem_update"];
  c.gop.validate();
  return c;
}

StyleTrainConfig ExperimentConfig::style_train_config() const {
  StyleTrainConfig c;
  c.steps = doc_["style"]["steps"];
  c.batch = at_least_one(doc_, "style.batch");
  c.rank = at_least_one(doc_, "style.rank");
  c.learning_rate = positive(doc_, "style.learning_rate");
  return c;
}

FinetuneConfig ExperimentConfig::finetune_config() const {
  FinetuneConfig c;
  c.steps = doc_["attack"]["finetune_steps"];
  c.learning_rate = positive(doc_, "attack.finetune_learning_rate");
  return c;
}

DistortionSuite ExperimentConfig::attack_suite() const {
  const std::string s = doc_["attack"]["suite"];
  if (s == "default") return default_distortion_suite();
  if (s == "neutral") return neutral_distortion_suite();
  if (s == "none") return {};
  throw ConfigError("attack.suite must be default, neutral or none (got '" + s + "')");
}

Environment Environment::build(const ExperimentConfig& config) {
  const Json& d = config.json();
  const std::size_t latent = at_least_one(d, "world.latent_dim");
  const ImageShape shape = config.image_shape();
  if (latent > shape.size()) throw ConfigError("world.latent_dim exceeds the image dimension");
  return {SyntheticWorld::build(d["world"]["seed"], latent, config.world_options()),
          LatentCodec::build(d["codec"]["seed"], shape, latent, config.codec_options()),
          PerceptionNet::build(d["perception"]["seed"], shape, config.perception_options()),
          NoiseSchedule::linear(at_least_one(d, "schedule.steps"), positive(d, "schedule.beta_start"),
                                positive(d, "schedule.beta_end"))};
}

void save_prior(const PriorModels& models, const Message& message, const fs::path& path) {
  Container c;
  store_mlp(c, "encoder.", models.encoder.net);
  store_mlp(c, "decoder.", models.decoder.net);
  c.metadata()["kind"] = "latent_prior";
  c.metadata()["encoder_gain"] = models.encoder.gain;
  c.metadata()["message"] = message.str();
  c.save(path);
}

Prior load_prior(const fs::path& path) {
  const Container c = Container::load(path);
  if (c.metadata().value("kind", "") != "latent_prior") throw FormatError("'" + path.string() + "' is not a prior");
  Prior p;
  p.models.encoder.net = restore_mlp(c, "encoder.");
  p.models.encoder.gain = c.metadata().at("encoder_gain").get<double>();
  p.models.decoder.net = restore_mlp(c, "decoder.");
  p.models.decoder.frozen = true;
  p.message = Message::parse(c.metadata().at("message").get<std::string>());
  if (p.message.size() != p.models.decoder.message_length()) {
    throw FormatError("stored message length does not match the decoder");
  }
  return p;
}

std::string sha256_hex(const fs::path& file) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(file);
  unsigned char digest[SHA256_DIGEST_LENGTH];
  SHA256(bytes.data(), bytes.size(), digest);
  std::ostringstream out;
  for (unsigned char b : digest) out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(b);
  return out.str();
}

Manifest Manifest::load_or_empty(const fs::path& dir) {
  Manifest m;
  m.dir_ = dir;
  const fs::path path = dir / "manifest.json";
  if (fs::exists(path)) {
    try {
      m.doc_ = Json::parse(read_text(path));
    } catch (const Json::exception& e) {
      throw FormatError("manifest '" + path.string() + "' is not valid JSON: " + e.what());
    }
  }
  if (!m.doc_.is_object()) m.doc_ = Json::object();
  if (!m.doc_.contains("commands")) m.doc_["commands"] = Json::object();
  return m;
}

void Manifest::record(const std::string& command, const std::string& config_hash,
                      const std::vector<fs::path>& artifacts) {
  Json entry;
  entry["config_hash"] = config_hash;
  entry["artifacts"] = Json::object();
  for (const fs::path& a : artifacts) entry["artifacts"][a.generic_string()] = sha256_hex(dir_ / a);
  doc_["commands"][command] = entry;
}

void Manifest::save() const { write_text(dir_ / "manifest.json", doc_.dump(2) + "\n"); }

std::map<std::string, std::string> Manifest::checksums(const std::string& command) const {
  std::map<std::string, std::string> out;
  if (!doc_["commands"].contains(command)) return out;
  for (const auto& [k, v] : doc_["commands"][command]["artifacts"].items()) out[k] = v;
  return out;
}

void write_ppm(std::span<const double> image_row, const ImageShape& shape, const fs::path& path) {
  if (image_row.size() != shape.size()) throw DimensionError("image does not match its shape");
  if (shape.channels != 1 && shape.channels != 3) throw DimensionError("PPM export needs 1 or 3 channels");
  std::ostringstream head;
  head << (shape.channels == 3 ? "P6" : "P5") << "\n" << shape.width << " " << shape.height << "\n255\n";
  const std::string h = head.str();
  std::vector<std::uint8_t> bytes(h.begin(), h.end());
  const std::size_t plane = shape.height * shape.width;
  const double* v = image_row.data();
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t c = 0; c < shape.channels; ++c) {
      bytes.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v[c * plane + p], 0.0, 1.0) * 255.0)));
    }
  }
  write_file_bytes(path, bytes);
}

MergedModel Deployment::without_key() const {
  std::vector<LoraAdapter> a;
  std::vector<double> c;
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    if (adapters[i].role == AdapterRole::kWatermark) continue;
    a.push_back(adapters[i]);
    c.push_back(coefficients[i]);
  }
  return MergedModel(base, std::move(a), std::move(c));
}

namespace {

struct Run {
  const ExperimentConfig& config;
  fs::path dir;
  std::string command;
  CommandResult result;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  Run(const ExperimentConfig& c, std::string name) : config(c), dir(c.directory()), command(std::move(name)) {
    fs::create_directories(dir);
  }

  fs::path at(const fs::path& rel) const { return dir / rel; }
  void wrote(const fs::path& rel) { result.artifacts.push_back(rel); }
  void text(const fs::path& rel, const std::string& content) {
    write_text(at(rel), content);
    wrote(rel);
  }

  CommandResult finish(const std::string& manifest_key = "") {
    const fs::path cfg = fs::path("configs") / (command + ".json");
    write_text(at(cfg), config.json().dump(2) + "\n");
    Manifest m = Manifest::load_or_empty(dir);
    m.record(manifest_key.empty() ? command : manifest_key, config.hash(), result.artifacts);
    m.save();
    result.summary["command"] = command;
    result.summary["directory"] = dir.string();
    result.summary["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
  }
};

Rng stream(const ExperimentConfig& config, const std::string& label) { return Rng(config.seed()).fork(label); }

std::string fmt(double v) {
  std::ostringstream out;
  out.precision(10);
  out << v;
  return out.str();
}

Message registered_message(const ExperimentConfig& config) {
  const std::size_t length = at_least_one(config.json(), "message.length");
  const std::string bits = config.json()["message"]["bits"];
  if (bits.empty()) {
    Rng rng = stream(config, "message");
    return Message::random(length, rng);
  }
  Message m = Message::parse(bits);
  if (m.size() != length) throw ConfigError("message.bits has " + std::to_string(m.size()) + " bits, length is " +
                                            std::to_string(length));
  return m;
}

DeploymentProbe make_probe(const Environment& env, const Prior& prior, const ExperimentConfig& config) {
  const Json& v = config.json()["verify"];
  DeploymentProbe probe{&env.schedule, &env.codec, &prior.models.decoder, &env.world,
                        VerificationPolicy::make(prior.message, positive(config.json(), "verify.target_fpr"))};
  probe.group_size = at_least_one(config.json(), "verify.group_size");
  probe.aggregation = aggregation_from_string(v["aggregation"]);
  return probe;
}

Tensor load_images(const fs::path& path) { return Container::load(path).get("images"); }

}  // namespace

Deployment load_deployment(const fs::path& dir) {
  const fs::path path = dir / "protected" / "deployment.json";
  require(path, "protect");
  Json d;
  try {
    d = Json::parse(read_text(path));
  } catch (const Json::exception& e) {
    throw FormatError("deployment manifest is not valid JSON: " + std::string(e.what()));
  }
  auto checked = [&](const Json& entry) {
    const fs::path file = dir / entry.at("path").get<std::string>();
    require(file, "the command that produced it");
    if (sha256_hex(file) != entry.at("sha256").get<std::string>()) {
      throw ChecksumError("'" + file.string() + "' changed since protect recorded it");
    }
    return file;
  };
  Deployment out{load_denoiser(checked(d.at("base"))), {}, {}, {}};
  for (const Json& a : d.at("adapters")) {
    out.adapters.push_back(load_adapter(checked(a)));
    out.coefficients.push_back(a.at("coefficient").get<double>());
    out.names.push_back(a.at("name").get<std::string>());
  }
  return out;
}

CommandResult cmd_train_prior(const ExperimentConfig& config) {
  Run run(config, "train-prior");
  const Environment env = Environment::build(config);
  const Json& d = config.json();

  const Denoiser init = Denoiser::build(d["base"]["seed"], env.world.latent_dim(), env.world.classes(),
                                        env.schedule.steps(), config.denoiser_config());
  Rng base_rng = stream(config, "base");
  DenoiserTrainLog base_log;
  const Denoiser base = train_base_denoiser(env.world, env.schedule, init, config.denoiser_train_config(), base_rng,
                                            &base_log);
  save_denoiser(base, run.at("base.lkw"));
  run.wrote("base.lkw");
  std::ostringstream bl;
  bl << "step,loss\n";
  for (std::size_t i = 0; i < base_log.losses.size(); ++i) bl << i << "," << fmt(base_log.losses[i]) << "\n";
  run.text("logs/base.csv", bl.str());
  Rng oracle_rng = stream(config, "base_eval");
  // Evaluate what later commands will load, i.e. the f32 copy.
  const double oracle = oracle_relative_mse(load_denoiser(run.at("base.lkw")), env.world, env.schedule, 4000,
                                            oracle_rng);

  const PriorTrainConfig pc = config.prior_train_config();
  Rng prior_rng = stream(config, "prior");
  const PriorTrainResult prior = train_prior(env.world, env.codec, env.perception, pc, prior_rng);
  const Message message = registered_message(config);
  save_prior(prior.models, message, run.at("prior.lkw"));
  run.wrote("prior.lkw");
  std::ostringstream pl;
  pl << "step,bce,mse,feat_mse,bit_acc\n";
  for (const PriorLogRow& r : prior.log) {
    pl << r.step << "," << fmt(r.bce) << "," << fmt(r.mse) << "," << fmt(r.feat_mse) << "," << fmt(r.bit_acc) << "\n";
  }
  run.text("logs/prior.csv", pl.str());

  const Prior stored = load_prior(run.at("prior.lkw"));
  Rng ev = stream(config, "prior_eval");
  const PriorEvaluation clean = evaluate_prior(stored.models, env.world, env.codec, {}, 2000, ev);
  const PriorEvaluation distorted = evaluate_prior(stored.models, env.world, env.codec, pc.distortions, 2000, ev);
  Json summary = {{"base_oracle_relative_mse", oracle},
                  {"prior_clean_bit_accuracy", clean.bit_accuracy},
                  {"prior_distorted_bit_accuracy", distorted.bit_accuracy},
                  {"prior_residual_rms", clean.residual_rms},
                  {"message", message.str()}};
  run.text("stats/train-prior.json", summary.dump(2) + "\n");
  run.result.summary = summary;
  return run.finish();
}

CommandResult cmd_train_key(const ExperimentConfig& config) {
  Run run(config, "train-key");
  require(run.at("base.lkw"), "train-prior");
  require(run.at("prior.lkw"), "train-prior");
  const Environment env = Environment::build(config);
  const Denoiser base = load_denoiser(run.at("base.lkw"));
  const Prior prior = load_prior(run.at("prior.lkw"));

  Rng rng = stream(config, "key");
  WatermarkTrainResult key = train_watermark_lora(base, env.world, env.codec, env.perception, prior.models.encoder,
                                                  prior.message, env.schedule, config.key_train_config(), rng);
  key.adapter.metadata["name"] = "key";
  save_adapter(key.adapter, run.at("key.lkw"));
  run.wrote("key.lkw");

  std::ostringstream log;
  log << "step,l_wm,l_sem,alpha,cos_wm_sem,cos_proj_sem\n";
  double cos_wm = 0.0, cos_proj = 0.0;
  for (const WatermarkLogRow& r : key.log) {
    log << r.step << "," << fmt(r.l_wm) << "," << fmt(r.l_sem) << "," << fmt(r.alpha) << "," << fmt(r.cos_wm_sem)
        << "," << fmt(r.cos_proj_sem) << "\n";
    cos_wm += std::abs(r.cos_wm_sem);
    cos_proj += std::abs(r.cos_proj_sem);
  }
  run.text("logs/key.csv", log.str());
  const double n = std::max<double>(1.0, static_cast<double>(key.log.size()));
  const LoraAdapter stored = load_adapter(run.at("key.lkw"));
  Rng ev = stream(config, "key_eval");
  const WatermarkLossEval losses = evaluate_watermark_losses(base, {}, stored, 1.0, env.world, env.codec,
                                                             env.perception, prior.models.encoder, prior.message,
                                                             env.schedule, 20, 64, ev);
  Json summary = {{"mean_abs_cos_wm_sem", cos_wm / n},
                  {"mean_abs_cos_applied_sem", cos_proj / n},
                  {"l_wm", losses.l_wm},
                  {"l_sem", losses.l_sem},
                  {"micro_steps", key.log.size()}};
  run.text("stats/train-key.json", summary.dump(2) + "\n");
  run.result.summary = summary;
  return run.finish();
}

CommandResult cmd_train_style(const ExperimentConfig& config) {
  Run run(config, "train-style");
  require(run.at("base.lkw"), "train-prior");
  const Json& s = config.json()["style"];
  const std::string name = s["name"];
  if (!valid_name(name) || name == "key") throw ConfigError("style.name '" + name + "' must be [A-Za-z0-9_-]+, not 'key'");
  const Environment env = Environment::build(config);
  const Denoiser base = load_denoiser(run.at("base.lkw"));
  const std::size_t coordinate = s["coordinate"];
  if (coordinate >= env.world.latent_dim()) throw ConfigError("style.coordinate is outside the latent");
  const StyleSpec spec = StyleSpec::coordinate_shift(env.world.latent_dim(), coordinate, s["amount"].get<double>());

  Rng rng = stream(config, "style." + name);
  StyleTrainResult style = train_style_lora(base, env.world, spec, env.schedule, config.style_train_config(), rng);
  style.adapter.metadata["name"] = name;
  style.adapter.metadata["coordinate"] = coordinate;
  style.adapter.metadata["amount"] = s["amount"];
  const fs::path rel = fs::path("styles") / (name + ".lkw");
  save_adapter(style.adapter, run.at(rel));
  run.wrote(rel);
  std::ostringstream log;
  log << "step,loss\n";
  for (std::size_t i = 0; i < style.losses.size(); ++i) log << i << "," << fmt(style.losses[i]) << "\n";
  run.text(fs::path("logs") / ("style_" + name + ".csv"), log.str());
  run.result.summary = {{"style", name}, {"delta_norm", delta_norm(style.adapter)}};
  const CommandResult r = run.finish("train-style/" + name);
  // Keep one config per style.
  fs::copy_file(run.at("configs/train-style.json"), run.at(fs::path("configs") / ("train-style." + name + ".json")),
                fs::copy_options::overwrite_existing);
  return r;
}

CommandResult cmd_protect(const ExperimentConfig& config) {
  Run run(config, "protect");
  require(run.at("base.lkw"), "train-prior");
  require(run.at("key.lkw"), "train-key");
  const Json& p = config.json()["protect"];
  const double alpha = p["alpha"], gamma = p["gamma"];

  Json manifest;
  manifest["base"] = {{"path", "base.lkw"}, {"sha256", sha256_hex(run.at("base.lkw"))}};
  manifest["adapters"] = Json::array();
  std::vector<LoraAdapter> adapters;
  std::vector<double> coefficients;
  for (const Json& n : p["styles"]) {
    const std::string name = n;
    const fs::path rel = fs::path("styles") / (name + ".lkw");
    require(run.at(rel), "train-style --style.name " + name);
    adapters.push_back(load_adapter(run.at(rel)));
    coefficients.push_back(alpha);
    manifest["adapters"].push_back({{"name", name},
                                    {"path", rel.generic_string()},
                                    {"sha256", sha256_hex(run.at(rel))},
                                    {"coefficient", alpha},
                                    {"role", to_string(adapters.back().role)}});
  }
  adapters.push_back(load_adapter(run.at("key.lkw")));
  coefficients.push_back(gamma);
  manifest["adapters"].push_back({{"name", "key"},
                                  {"path", "key.lkw"},
                                  {"sha256", sha256_hex(run.at("key.lkw"))},
                                  {"coefficient", gamma},
                                  {"role", to_string(adapters.back().role)}});

  const Denoiser base = load_denoiser(run.at("base.lkw"));
  const MergedModel merged(base, adapters, coefficients);
  save_denoiser(merged.materialize(), run.at("protected/merged.lkw"));
  run.wrote("protected/merged.lkw");
  manifest["merged"] = "protected/merged.lkw";
  run.text("protected/deployment.json", manifest.dump(2) + "\n");
  run.result.summary = {{"adapters", manifest["adapters"].size()}, {"alpha", alpha}, {"gamma", gamma}};
  return run.finish();
}

CommandResult cmd_generate(const ExperimentConfig& config) {
  Run run(config, "generate");
  const Deployment dep = load_deployment(run.dir);
  const Environment env = Environment::build(config);
  const Json& g = config.json()["generate"];
  const std::size_t n = at_least_one(config.json(), "generate.count");
  SampleOptions options;
  if (g["guidance"].get<double>() != 1.0) options.guidance = g["guidance"].get<double>();

  Rng rng = stream(config, "generate");
  Rng class_rng = rng.fork("classes");
  std::vector<std::size_t> classes(n);
  for (auto& c : classes) c = env.world.draw_class(class_rng);
  Tensor class_tensor({n});
  for (std::size_t i = 0; i < n; ++i) class_tensor[i] = static_cast<double>(classes[i]);

  auto emit = [&](const std::string& name, const MergedModel& model) {
    // The same chains with and without the key isolate its effect.
    const SampleResult s = sample(model.base(), model.attached(), env.schedule, env.codec, classes,
                                  rng.fork("chains"), options);
    Container c;
    c.add("images", s.images);
    c.add("classes", class_tensor);
    c.metadata()["kind"] = "images";
    c.metadata()["shape"] = env.codec.image_shape().shape();
    const fs::path rel = fs::path("generated") / (name + ".lkw");
    c.save(run.at(rel));
    run.wrote(rel);
    const std::size_t ppm = std::min(g["ppm"].get<std::size_t>(), n);
    for (std::size_t i = 0; i < ppm; ++i) {
      char file[64];
      std::snprintf(file, sizeof file, "%s_%04zu.ppm", name.c_str(), i);
      const fs::path p = fs::path("generated") / "ppm" / file;
      write_ppm(s.images.row(i), env.codec.image_shape(), run.at(p));
      run.wrote(p);
    }
  };
  emit("watermarked", dep.model());
  emit("control", dep.without_key());
  run.result.summary = {{"images", n}};
  return run.finish();
}

CommandResult cmd_verify(const ExperimentConfig& config) {
  Run run(config, "verify");
  require(run.at("prior.lkw"), "train-prior");
  require(run.at("generated/watermarked.lkw"), "generate");
  require(run.at("generated/control.lkw"), "generate");
  const Environment env = Environment::build(config);
  const Prior prior = load_prior(run.at("prior.lkw"));
  const DeploymentProbe probe = make_probe(env, prior, config);

  Json out;
  out["policy"] = {{"length", probe.policy.length()},
                   {"target_fpr", probe.policy.target_fpr},
                   {"tau", probe.policy.tau},
                   {"fpr_at_tau", fpr_sum(probe.policy.length(), probe.policy.tau)}};
  for (const std::string set : {"watermarked", "control"}) {
    const Tensor images = load_images(run.at(fs::path("generated") / (set + ".lkw")));
    if (!all_finite(images)) throw NonFiniteError("generated images contain non-finite values");
    const Tensor logits = extract_bits(prior.models.decoder, env.codec, images).logits;
    const VerificationReport per = batch_verify_logits(probe.policy, logits, 1, Aggregation::kPerImage);
    out[set]["per_image"] = report_json(per);
    if (logits.rows() >= probe.group_size) {
      out[set]["grouped"] = report_json(batch_verify_logits(probe.policy, logits, probe.group_size, probe.aggregation));
    }
    run.text(fs::path("verify") / (set + ".csv"), report_csv(per));
  }
  run.text("verify/report.json", out.dump(2) + "\n");
  run.text("verify/thresholds.csv", threshold_table_csv({8, 16, 32, 48, 64}, {1e-3, 1e-6}));
  run.result.summary = out;
  return run.finish();
}

CommandResult cmd_attack(const ExperimentConfig& config) {
  Run run(config, "attack");
  require(run.at("prior.lkw"), "train-prior");
  const Deployment dep = load_deployment(run.dir);
  const Environment env = Environment::build(config);
  const Prior prior = load_prior(run.at("prior.lkw"));
  const DeploymentProbe probe = make_probe(env, prior, config);
  const Json& a = config.json()["attack"];
  const std::size_t n = at_least_one(config.json(), "attack.images");
  const Rng rng = stream(config, "attack");

  const MergedModel model = dep.model();
  AttackReport report = run_robustness_suite(model, probe, config.attack_suite(), n, rng.fork("suite"));
  auto point = [&](const std::string& attack, double parameter, const MergedModel& m) {
    const AttackRow row = evaluate_images(attack, generate_probe_images(m, probe, n, rng.fork("probe")), probe);
    report.curves.push_back({attack, parameter, row.bit_accuracy, row.tpr, row.tpr_averaged});
  };
  for (const Json& p : a["prune"]) {
    const double f = p;
    if (f < 0.0 || f > 1.0) throw ConfigError("attack.prune fractions must lie in [0, 1]");
    point("prune", f, prune_attack(model, f));
  }
  if (a["finetune_steps"].get<std::size_t>() > 0) {
    Rng ft = rng.fork("finetune");
    point("finetune", a["finetune_steps"].get<double>(), finetune_attack(model, env.world, env.schedule,
                                                                         config.finetune_config(), ft));
  }
  if (a["fusion"].get<bool>()) {
    // Every trained style fused in name order at alpha, key at its deployed gamma.
    std::vector<fs::path> styles;
    if (fs::exists(run.at("styles"))) {
      for (const auto& e : fs::directory_iterator(run.at("styles"))) {
        if (e.path().extension() == ".lkw") styles.push_back(e.path());
      }
    }
    std::sort(styles.begin(), styles.end());
    std::vector<LoraAdapter> extras;
    for (const fs::path& p : styles) extras.push_back(load_adapter(p));
    const LoraAdapter* key = nullptr;
    double gamma = 1.0;
    for (std::size_t i = 0; i < dep.adapters.size(); ++i) {
      if (dep.adapters[i].role != AdapterRole::kWatermark) continue;
      key = &dep.adapters[i];
      gamma = dep.coefficients[i];
    }
    if (!key) throw DependencyError("the deployment has no watermark adapter");
    const double alpha = config.json()["protect"]["alpha"];
    for (std::size_t k = 0; k <= extras.size(); ++k) {
      const std::vector<LoraAdapter> first(extras.begin(), extras.begin() + static_cast<std::ptrdiff_t>(k));
      point("fusion", static_cast<double>(k), fusion_attack(dep.base, *key, gamma, first, std::vector<double>(k, alpha)));
    }
  }
  run.text("attack/report.json", attack_report_json(report).dump(2) + "\n");
  run.text("attack/report.csv", attack_report_csv(report));
  run.text("attack/curves.csv", attack_curves_csv(report));
  run.result.summary = attack_report_json(report);
  return run.finish();
}

CommandResult cmd_report(const ExperimentConfig& config) {
  Run run(config, "report");
  const Manifest manifest = Manifest::load_or_empty(run.dir);
  std::ostringstream md, csv;
  csv << "section,name,metric,value\n";
  md << "# Experiment report\n\n";
  bool any = false;

  auto stats = [&](const std::string& command) {
    const fs::path p = run.at(fs::path("stats") / (command + ".json"));
    if (!fs::exists(p)) return;
    any = true;
    md << "## " << command << "\n\n| metric | value |\n|---|---|\n";
    const Json doc = Json::parse(read_text(p));
    for (const auto& [k, v] : doc.items()) {
      md << "| " << k << " | " << (v.is_string() ? v.get<std::string>() : v.dump()) << " |\n";
      csv << command << ",," << k << "," << (v.is_string() ? v.get<std::string>() : v.dump()) << "\n";
    }
    md << "\n";
  };
  stats("train-prior");
  stats("train-key");

  if (fs::exists(run.at("verify/report.json"))) {
    any = true;
    const Json v = Json::parse(read_text(run.at("verify/report.json")));
    md << "## Verification\n\nL = " << v["policy"]["length"] << ", target FPR " << v["policy"]["target_fpr"]
       << ", tau = " << v["policy"]["tau"] << "\n\n| set | decision | bit accuracy | acceptance rate |\n|---|---|---|---|\n";
    for (const std::string set : {"watermarked", "control"}) {
      for (const std::string mode : {"per_image", "grouped"}) {
        if (!v[set].contains(mode)) continue;
        const Json& r = v[set][mode];
        md << "| " << set << " | " << mode << " | " << fmt(r["mean_bit_accuracy"]) << " | "
           << fmt(r["acceptance_rate"]) << " |\n";
        csv << "verify," << set << "." << mode << ",bit_accuracy," << fmt(r["mean_bit_accuracy"]) << "\n";
        csv << "verify," << set << "." << mode << ",acceptance_rate," << fmt(r["acceptance_rate"]) << "\n";
      }
    }
    md << "\n";
  }

  if (fs::exists(run.at("attack/report.json"))) {
    any = true;
    const Json a = Json::parse(read_text(run.at("attack/report.json")));
    md << "## Robustness\n\n| condition | bit accuracy | TPR | TPR (grouped) |\n|---|---|---|---|\n";
    for (const Json& r : a["rows"]) {
      md << "| " << r["name"].get<std::string>() << " | " << fmt(r["bit_accuracy"]) << " | " << fmt(r["tpr"]) << " | "
         << fmt(r["tpr_averaged"]) << " |\n";
      csv << "attack," << std::quoted(r["name"].get<std::string>()) << ",bit_accuracy," << fmt(r["bit_accuracy"])
          << "\n";
    }
    md << "\nMean bit accuracy over distortions: " << fmt(a["adversarial_average"]) << "\n\n";
    if (!a["curves"].empty()) {
      md << "| attack | parameter | bit accuracy | TPR | TPR (grouped) |\n|---|---|---|---|---|\n";
      for (const Json& p : a["curves"]) {
        md << "| " << p["attack"].get<std::string>() << " | " << fmt(p["parameter"]) << " | " << fmt(p["bit_accuracy"])
           << " | " << fmt(p["tpr"]) << " | " << fmt(p["tpr_averaged"]) << " |\n";
        csv << "curve," << p["attack"].get<std::string>() << "(" << fmt(p["parameter"]) << "),bit_accuracy,"
            << fmt(p["bit_accuracy"]) << "\n";
      }
      md << "\n";
    }
  }

  if (!manifest.json()["commands"].empty()) {
    md << "## Artifacts\n\n| command | config hash | files |\n|---|---|---|\n";
    for (const auto& [cmd, entry] : manifest.json()["commands"].items()) {
      if (cmd == "report") continue;
      md << "| " << cmd << " | " << entry["config_hash"].get<std::string>() << " | " << entry["artifacts"].size()
         << " |\n";
    }
    md << "\n";
  }
  if (!any) md << "No completed runs.\n";
  run.text("report/summary.md", md.str());
  run.text("report/summary.csv", csv.str());
  run.result.summary = {{"sections", any}};
  return run.finish();
}

const std::vector<std::pair<std::string, Command>>& command_table() {
  static const std::vector<std::pair<std::string, Command>> table = {
      {"train-prior", cmd_train_prior}, {"train-key", cmd_train_key}, {"train-style", cmd_train_style},
      {"protect", cmd_protect},         {"generate", cmd_generate},   {"verify", cmd_verify},
      {"attack", cmd_attack},           {"report", cmd_report}};
  return table;
}

}  // namespace lorakey
