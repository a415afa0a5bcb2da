#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "fabric/nn/param_store.hpp"

namespace fabric::train {

inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Checkpoint {
    /// "denoiser" or "embedder".
    std::string kind;
    nlohmann::json config;
    nn::ParamStore params;
};

/// Layout: 8-byte magic, uint64 LE header length, JSON header, float32 LE payload.
std::string serialize_checkpoint(const std::string& kind, const nlohmann::json& config, const nn::ParamStore& params);
Checkpoint parse_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const std::string& kind, const nlohmann::json& config,
                     const nn::ParamStore& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fabric::train
