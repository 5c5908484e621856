#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "lorakey/error.hpp"
#include "lorakey/pipeline.hpp"

using namespace lorakey;

namespace {

int exit_code(const Error& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DependencyError*>(&e)) return 3;
  if (dynamic_cast<const ChecksumError*>(&e) || dynamic_cast<const FormatError*>(&e)) return 4;
  return 1;
}

const std::map<std::string, std::string> kDescriptions = {
    {"train-prior", "train the base denoiser and the latent watermark prior"},
    {"train-key", "train the watermark LoRA against the frozen base and prior"},
    {"train-style", "train one style LoRA (style.name, style.coordinate)"},
    {"protect", "compose styles and key into a deployment"},
    {"generate", "sample watermarked and control images from the deployment"},
    {"verify", "extract messages and apply the threshold test"},
    {"attack", "image-space and parameter-space robustness evaluation"},
    {"report", "summarize whatever has been run"},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Watermark LoRA laboratory: train, protect, generate, verify and attack."};
  app.require_subcommand(1);

  const std::vector<std::string> keys = config_key_paths();
  struct Flags {
    std::string config_file;
    std::map<std::string, std::string> values;
  };
  std::map<std::string, Flags> flags;

  for (const auto& [name, command] : command_table()) {
    CLI::App* sub = app.add_subcommand(name, kDescriptions.at(name));
    Flags& f = flags[name];
    sub->add_option("-c,--config", f.config_file, "JSON config file")->check(CLI::ExistingFile);
    // One flag per config key; flags override the file.
    for (const std::string& key : keys) {
      sub->add_option("--" + key, f.values[key], "config key " + key)->group("Config keys");
    }
  }

  CLI11_PARSE(app, argc, argv);

  for (const auto& [name, command] : command_table()) {
    CLI::App* sub = app.get_subcommand(name);
    if (!sub->parsed()) continue;
    const Flags& f = flags[name];
    try {
      ExperimentConfig config = f.config_file.empty() ? ExperimentConfig() : ExperimentConfig::load(f.config_file);
      for (const std::string& key : keys) {
        if (sub->count("--" + key) > 0) config.set(key, parse_config_value(key, f.values.at(key)));
      }
      const CommandResult r = command(config);
      std::cout << r.summary.dump(2) << "\n";
      return 0;
    } catch (const Error& e) {
      std::cerr << name << ": " << e.what() << "\n";
      return exit_code(e);
    } catch (const std::exception& e) {
      std::cerr << name << ": " << e.what() << "\n";
      return 1;
    }
  }
  return 0;
}
