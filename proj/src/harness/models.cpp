#include "fabric/harness/models.hpp"

#include "fabric/train/checkpoint.hpp"

namespace fabric::harness {

Models::Models(denoiser::DenoiserConfig den_config, nn::ParamStore den_params, eval::EmbedderConfig emb_config,
               nn::ParamStore emb_params)
    : den_params_(std::move(den_params)), emb_params_(std::move(emb_params)) {
    net_ = std::make_unique<denoiser::UNet>(den_config, den_params_);
    embedder_ = std::make_unique<eval::Embedder>(emb_config, emb_params_);
    generator_ = std::make_unique<loop::Generator>(*net_);
    oracle_ = std::make_unique<eval::PreferenceOracle>(eval::PreferenceOracle::large_red_circle(*embedder_));
}

std::unique_ptr<Models> Models::load(const std::filesystem::path& dir) {
    auto den = train::load_checkpoint(dir / kDenoiserFile);
    auto emb = train::load_checkpoint(dir / kEmbedderFile);
    if (den.kind != "denoiser") throw train::CheckpointError((dir / kDenoiserFile).string() + " is not a denoiser checkpoint");
    if (emb.kind != "embedder") throw train::CheckpointError((dir / kEmbedderFile).string() + " is not an embedder checkpoint");
    return std::make_unique<Models>(denoiser::DenoiserConfig::from_json(den.config), std::move(den.params),
                                    eval::EmbedderConfig::from_json(emb.config), std::move(emb.params));
}

}  // namespace fabric::harness
