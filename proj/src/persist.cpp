#include "lorakey/persist.hpp"

#include "lorakey/error.hpp"

namespace lorakey {

void store_mlp(Container& c, const std::string& prefix, const Mlp& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (const Layer& l : net.layers()) {
    c.add(prefix + l.name + ".weight", l.weight);
    c.add(prefix + l.name + ".bias", l.bias);
    layers.push_back({{"name", l.name}, {"activation", to_string(l.activation)}});
  }
  c.metadata()["networks"][prefix] = layers;
}

Mlp restore_mlp(const Container& c, const std::string& prefix) {
  const nlohmann::json& meta = c.metadata();
  if (!meta.contains("networks") || !meta["networks"].contains(prefix)) {
    throw FormatError("container has no network '" + prefix + "'");
  }
  std::vector<Layer> layers;
  for (const auto& info : meta["networks"][prefix]) {
    Layer l;
    l.name = info.at("name").get<std::string>();
    l.activation = activation_from_string(info.at("activation").get<std::string>());
    l.weight = c.get(prefix + l.name + ".weight");
    l.bias = c.get(prefix + l.name + ".bias");
    layers.push_back(std::move(l));
  }
  return Mlp(std::move(layers));
}

Container denoiser_container(const Denoiser& denoiser) {
  Container c;
  store_mlp(c, "", denoiser.net());
  c.add("class_embed", denoiser.class_embedding());
  const DenoiserConfig& cfg = denoiser.config();
  c.metadata()["kind"] = "denoiser";
  c.metadata()["denoiser"] = {{"latent_dim", denoiser.latent_dim()},
                              {"steps", denoiser.steps()},
                              {"classes", denoiser.classes()},
                              {"hidden_width", cfg.hidden_width},
                              {"hidden_layers", cfg.hidden_layers},
                              {"time_dim", cfg.time_dim},
                              {"class_dim", cfg.class_dim},
                              {"latent_input_scale", cfg.latent_input_scale},
                              {"activation", to_string(cfg.activation)},
                              {"frozen", denoiser.frozen()}};
  return c;
}

Denoiser denoiser_from_container(const Container& c) {
  if (c.metadata().value("kind", "") != "denoiser") throw FormatError("container does not hold a denoiser");
  const nlohmann::json& m = c.metadata()["denoiser"];
  DenoiserConfig cfg;
  cfg.hidden_width = m.at("hidden_width").get<std::size_t>();
  cfg.hidden_layers = m.at("hidden_layers").get<std::size_t>();
  cfg.time_dim = m.at("time_dim").get<std::size_t>();
  cfg.class_dim = m.at("class_dim").get<std::size_t>();
  cfg.latent_input_scale = m.at("latent_input_scale").get<double>();
  cfg.activation = activation_from_string(m.at("activation").get<std::string>());
  Denoiser d(restore_mlp(c, ""), c.get("class_embed"), m.at("latent_dim").get<std::size_t>(),
             m.at("steps").get<std::size_t>(), cfg);
  if (m.value("frozen", false)) d.freeze();
  return d;
}

void save_denoiser(const Denoiser& denoiser, const std::filesystem::path& path) {
  denoiser_container(denoiser).save(path);
}

Denoiser load_denoiser(const std::filesystem::path& path) { return denoiser_from_container(Container::load(path)); }

}  // namespace lorakey
