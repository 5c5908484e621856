#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lorakey/attacks.hpp"
#include "lorakey/stage2.hpp"
#include "lorakey/verify.hpp"

namespace lorakey {

// Every accepted key with its default value. The defaults double as the
// schema: a key must exist here and its value must have the same JSON type
// (non-negative integers stay integers, reals may be given as integers).
nlohmann::json default_config();

// Throws ConfigError naming the first offending key path.
void validate_config(const nlohmann::json& config);

// Recursively overlays `overrides` onto `base` after validating it.
nlohmann::json overlay_config(nlohmann::json base, const nlohmann::json& overrides);

// Leaf key paths of the defaults ("prior.steps", ...), in document order.
std::vector<std::string> config_key_paths();

// Parses a flag value for `path` according to the type of its default.
nlohmann::json parse_config_value(const std::string& path, const std::string& text);

class ExperimentConfig {
 public:
  ExperimentConfig();
  explicit ExperimentConfig(const nlohmann::json& overrides);
  static ExperimentConfig load(const std::filesystem::path& path);

  const nlohmann::json& json() const { return doc_; }
  // Set one dotted key; the value is validated.
  void set(const std::string& path, const nlohmann::json& value);
  // FNV-1a of the canonical dump, hex.
  std::string hash() const;

  // Artifact directory: output_dir, else $LORAKEY_HOME/<experiment>, else
  // ./lorakey_runs/<experiment>.
  std::filesystem::path directory() const;

  std::uint64_t seed() const;
  ImageShape image_shape() const;
  CodecOptions codec_options() const;
  WorldOptions world_options() const;
  PerceptionOptions perception_options() const;
  DenoiserConfig denoiser_config() const;
  DenoiserTrainConfig denoiser_train_config() const;
  PriorTrainConfig prior_train_config() const;
  WatermarkTrainConfig key_train_config() const;
  StyleTrainConfig style_train_config() const;
  FinetuneConfig finetune_config() const;
  DistortionSuite attack_suite() const;

 private:
  nlohmann::json doc_;
};

// Fixed environment every command rebuilds from the config.
struct Environment {
  SyntheticWorld world;
  LatentCodec codec;
  PerceptionNet perception;
  NoiseSchedule schedule;

  static Environment build(const ExperimentConfig& config);
};

struct Prior {
  PriorModels models;
  Message message;
};

void save_prior(const PriorModels& models, const Message& message, const std::filesystem::path& path);
Prior load_prior(const std::filesystem::path& path);

// Per-directory record of command runs: config hash and SHA-256 of every
// artifact written. (A whole-file CRC-32 is useless here: an LKW1 file ends in
// the CRC of its payload, which makes the file CRC depend on the header only.)
class Manifest {
 public:
  static Manifest load_or_empty(const std::filesystem::path& dir);
  void record(const std::string& command, const std::string& config_hash,
              const std::vector<std::filesystem::path>& artifacts);
  void save() const;
  const nlohmann::json& json() const { return doc_; }
  // Checksum of each artifact recorded for `command`, relative path -> hex.
  std::map<std::string, std::string> checksums(const std::string& command) const;

 private:
  std::filesystem::path dir_;
  nlohmann::json doc_;
};

std::string sha256_hex(const std::filesystem::path& file);

// P6 (3 channels) or P5 (1 channel) with 8-bit rounding.
void write_ppm(std::span<const double> image_row, const ImageShape& shape, const std::filesystem::path& path);

// Deployment loaded back from protect's manifest: base + (adapter, coefficient)
// pairs. The adapters are owned here so the merged view stays valid.
struct Deployment {
  Denoiser base;
  std::vector<LoraAdapter> adapters;
  std::vector<double> coefficients;
  std::vector<std::string> names;

  MergedModel model() const { return MergedModel(base, adapters, coefficients); }
  // Same pairs with the key adapter left out.
  MergedModel without_key() const;
};

Deployment load_deployment(const std::filesystem::path& dir);

struct CommandResult {
  nlohmann::json summary = nlohmann::json::object();
  std::vector<std::filesystem::path> artifacts;  // relative to the experiment directory
};

// Each command checks its prerequisites (DependencyError), writes artifacts,
// writes configs/<command>.json and updates manifest.json.
CommandResult cmd_train_prior(const ExperimentConfig& config);
CommandResult cmd_train_key(const ExperimentConfig& config);
CommandResult cmd_train_style(const ExperimentConfig& config);
CommandResult cmd_protect(const ExperimentConfig& config);
CommandResult cmd_generate(const ExperimentConfig& config);
CommandResult cmd_verify(const ExperimentConfig& config);
CommandResult cmd_attack(const ExperimentConfig& config);
// Markdown + CSV summary of whatever has been run; never requires artifacts.
CommandResult cmd_report(const ExperimentConfig& config);

using Command = CommandResult (*)(const ExperimentConfig&);
// Ordered command table, in dependency order.
const std::vector<std::pair<std::string, Command>>& command_table();

}  // namespace lorakey
