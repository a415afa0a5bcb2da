#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fabric/nn/graph.hpp"
#include "fabric/nn/param_store.hpp"
#include "fabric/rng.hpp"
#include "fabric/world/shapes.hpp"

namespace fabric::denoiser {

using nn::ParamStore;

struct DenoiserConfig {
    int channels = 3;
    int image_size = 16;
    /// Widths at full resolution and at the two downsampled levels.
    int width_hi = 32;
    int width_lo = 64;
    int heads = 4;
    int head_dim = 16;
    int time_dim = 64;
    int groups = 8;
    int ffn_mult = 2;
    /// Three attribute slots plus one always-null slot.
    int context_tokens = 4;
    int train_steps = 200;

    int bottleneck_size() const noexcept { return image_size / 4; }
    int bottleneck_tokens() const noexcept { return bottleneck_size() * bottleneck_size(); }
    void validate() const;

    nlohmann::json to_json() const;
    static DenoiserConfig from_json(const nlohmann::json& j);
    bool operator==(const DenoiserConfig&) const = default;
};

/// Activations of one noised reference captured just before each self-attention
/// layer: layers[i] is [tokens, channels].
struct HiddenStateCache {
    std::vector<Tensor> layers;
    int timestep = 0;
    std::string reference_id;
};

/// Reference keys/values injected into one batch item's self-attention, all
/// sharing weight `weight`. The item's own keys keep weight 1.
struct Injection {
    std::vector<const HiddenStateCache*> refs;
    float weight = 0.0f;
};

struct ForwardHooks {
    /// Per batch item; empty `refs` leaves that item's attention untouched.
    const std::vector<Injection>* injections = nullptr;
    /// Receives one [B, tokens, channels] tensor per self-attention layer.
    std::vector<Tensor>* capture = nullptr;
};

class UNet {
public:
    /// Binds to `params` by reference; the store must outlive the UNet.
    UNet(DenoiserConfig config, const ParamStore& params);

    static void init_params(const DenoiserConfig& config, ParamStore& params, Rng& rng);

    const DenoiserConfig& config() const noexcept { return config_; }
    const ParamStore& params() const noexcept { return params_; }
    int self_attention_layers() const noexcept { return 1; }

    /// eps prediction for z[B, C, H, W] at per-item timesteps and prompts.
    nn::Var forward(nn::Graph& g, nn::Var z, std::span<const int> t, std::span<const world::Prompt> prompts,
                    ForwardHooks hooks = {}) const;

    /// Plain forward without gradients.
    Tensor predict(const Tensor& z, std::span<const int> t, std::span<const world::Prompt> prompts) const;

    /// Runs the full network on each noised reference z_refs[R, C, H, W] at
    /// timestep t and returns one cache per reference. The eps output is discarded.
    std::vector<HiddenStateCache> precompute_hidden_states(const Tensor& z_refs, int t,
                                                           std::span<const world::Prompt> prompts,
                                                           std::span<const std::string> reference_ids = {}) const;

    /// Forward with reference keys/values injected per item. With no references
    /// anywhere this is exactly `predict`.
    Tensor modified_unet(const Tensor& z, std::span<const int> t, std::span<const world::Prompt> prompts,
                         const std::vector<Injection>& injections) const;

private:
    void check_inputs(const Tensor& z, std::span<const int> t, std::span<const world::Prompt> prompts) const;

    DenoiserConfig config_;
    const ParamStore& params_;
};

/// Sinusoidal timestep features [B, dim].
Tensor timestep_features(std::span<const int> t, int dim);

}  // namespace fabric::denoiser
