#pragma once

#include <filesystem>
#include <memory>

#include "fabric/denoiser/unet.hpp"
#include "fabric/eval/embedder.hpp"
#include "fabric/eval/metrics.hpp"
#include "fabric/loop/feedback.hpp"

namespace fabric::harness {

inline constexpr const char* kDenoiserFile = "denoiser.ckpt";
inline constexpr const char* kEmbedderFile = "embedder.ckpt";

/// Trained denoiser and embedder loaded once and shared read-only.
class Models {
public:
    Models(denoiser::DenoiserConfig den_config, nn::ParamStore den_params, eval::EmbedderConfig emb_config,
           nn::ParamStore emb_params);
    Models(const Models&) = delete;
    Models& operator=(const Models&) = delete;

    /// Reads denoiser.ckpt and embedder.ckpt from `dir`.
    static std::unique_ptr<Models> load(const std::filesystem::path& dir);

    const denoiser::UNet& net() const noexcept { return *net_; }
    const eval::Embedder& embedder() const noexcept { return *embedder_; }
    const loop::Generator& generator() const noexcept { return *generator_; }
    const eval::PreferenceOracle& oracle() const noexcept { return *oracle_; }

private:
    nn::ParamStore den_params_;
    nn::ParamStore emb_params_;
    std::unique_ptr<denoiser::UNet> net_;
    std::unique_ptr<eval::Embedder> embedder_;
    std::unique_ptr<loop::Generator> generator_;
    std::unique_ptr<eval::PreferenceOracle> oracle_;
};

}  // namespace fabric::harness
