#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fabric/denoiser/unet.hpp"
#include "fabric/eval/embedder.hpp"
#include "fabric/nn/param_store.hpp"
#include "fabric/world/shapes.hpp"

namespace fabric::train {

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainReport {
    std::string model;
    std::vector<double> epoch_loss;
    nlohmann::json validation = nlohmann::json::object();
    double wall_seconds = 0.0;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
    static TrainReport from_json(const nlohmann::json& j);
};

/// Called after every epoch with (epoch index from 1, mean training loss).
using EpochCallback = std::function<void(int, double)>;

struct DenoiserTrainConfig {
    int epochs = 30;
    int batch = 128;
    float lr = 2e-4f;
    /// Final learning rate as a fraction of `lr` under cosine decay; 1 keeps it constant.
    double lr_floor = 1.0;
    /// Probability that a whole batch is trained with the null prompt.
    double null_prompt_prob = 0.1;
    std::uint64_t seed = 1;
};

struct EmbedderTrainConfig {
    int epochs = 10;
    int batch = 64;
    float lr = 1e-3f;
    double lr_floor = 1.0;
    std::uint64_t seed = 2;
};

struct TrainedModel {
    nn::ParamStore params;
    TrainReport report;
};

/// eps-prediction objective at uniformly drawn timesteps. Validation reports the
/// held-out eps MSE at fixed timesteps when `validation` is non-empty.
TrainedModel train_denoiser(const std::vector<world::Sample>& train, const std::vector<world::Sample>& validation,
                            const denoiser::DenoiserConfig& model, const DenoiserTrainConfig& config,
                            const EpochCallback& on_epoch = {});

/// 24-way classification; validation reports accuracy on `validation`.
TrainedModel train_embedder(const std::vector<world::Sample>& train, const std::vector<world::Sample>& validation,
                            const eval::EmbedderConfig& model, const EmbedderTrainConfig& config,
                            const EpochCallback& on_epoch = {});

/// Classification accuracy of the embedder head against each sample's prompt class.
double embedder_accuracy(const eval::Embedder& embedder, const std::vector<world::Sample>& samples);

}  // namespace fabric::train
