#pragma once

#include <memory>

#include "fabric/harness/models.hpp"

namespace fabric::testing {

inline denoiser::DenoiserConfig tiny_denoiser_config() {
    denoiser::DenoiserConfig c;
    c.width_hi = 8;
    c.width_lo = 16;
    c.heads = 2;
    c.head_dim = 8;
    c.time_dim = 8;
    c.groups = 4;
    return c;
}

/// Untrained but deterministic models small enough for fast end-to-end tests.
inline std::unique_ptr<harness::Models> tiny_models(std::uint64_t seed = 31) {
    const auto dc = tiny_denoiser_config();
    const eval::EmbedderConfig ec;
    nn::ParamStore dp, ep;
    Rng rng(seed);
    denoiser::UNet::init_params(dc, dp, rng);
    eval::Embedder::init_params(ec, ep, rng);
    return std::make_unique<harness::Models>(dc, std::move(dp), ec, std::move(ep));
}

inline const harness::Models& shared_tiny_models() {
    static const auto m = tiny_models();
    return *m;
}

}  // namespace fabric::testing
