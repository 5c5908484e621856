#pragma once

#include <filesystem>
#include <string>

#include "lorakey/container.hpp"
#include "lorakey/diffusion.hpp"
#include "lorakey/mlp.hpp"

namespace lorakey {

// Writes "<prefix><layer>.weight" / ".bias" tensors and a layer table under
// metadata["networks"][prefix].
void store_mlp(Container& c, const std::string& prefix, const Mlp& net);
Mlp restore_mlp(const Container& c, const std::string& prefix);

void save_denoiser(const Denoiser& denoiser, const std::filesystem::path& path);
Denoiser load_denoiser(const std::filesystem::path& path);
Container denoiser_container(const Denoiser& denoiser);
Denoiser denoiser_from_container(const Container& c);

}  // namespace lorakey
