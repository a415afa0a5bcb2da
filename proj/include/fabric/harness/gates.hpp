#pragma once

#include <array>
#include <cstdint>

#include <json.hpp>

#include "fabric/harness/models.hpp"

namespace fabric::harness {

struct AgreementReport {
    int images = 0;
    double shape = 0.0;
    double color = 0.0;
    double size = 0.0;
    double full_class = 0.0;

    nlohmann::json to_json() const;
};

/// Samples `images` conditioned images cycling through the 24 classes and
/// compares the embedder's predicted attributes with the prompt.
AgreementReport prompt_agreement(const Models& models, int images = 200, std::uint64_t seed = 4242, int workers = 0);

}  // namespace fabric::harness
