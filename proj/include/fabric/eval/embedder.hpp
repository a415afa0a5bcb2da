#pragma once

#include <json.hpp>

#include "fabric/nn/graph.hpp"
#include "fabric/nn/param_store.hpp"
#include "fabric/rng.hpp"

namespace fabric::eval {

struct EmbedderConfig {
    int image_size = 16;
    int width1 = 16;
    int width2 = 32;
    int width3 = 32;
    int embed_dim = 32;
    int classes = 24;

    void validate() const;
    nlohmann::json to_json() const;
    static EmbedderConfig from_json(const nlohmann::json& j);
    bool operator==(const EmbedderConfig&) const = default;
};

struct EmbedderOutputs {
    /// Unit-norm rows [B, embed_dim].
    nn::Var embedding;
    /// Class scores [B, classes].
    nn::Var logits;
};

/// Small convolutional classifier whose normalised penultimate features are the embedding.
class Embedder {
public:
    /// Binds to `params` by reference; the store must outlive the Embedder.
    Embedder(EmbedderConfig config, const nn::ParamStore& params);

    static void init_params(const EmbedderConfig& config, nn::ParamStore& params, Rng& rng);

    const EmbedderConfig& config() const noexcept { return config_; }

    EmbedderOutputs forward(nn::Graph& g, nn::Var images) const;
    /// images[B, 3, H, W] -> [B, embed_dim], rows of unit norm.
    Tensor embed(const Tensor& images) const;
    Tensor logits(const Tensor& images) const;

private:
    EmbedderConfig config_;
    const nn::ParamStore& params_;
};

}  // namespace fabric::eval
