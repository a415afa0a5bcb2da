#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include "fabric/train/trainer.hpp"

namespace fabric::train {

struct TrainingRecipe {
    int train_images = 10000;
    int validation_images = 2000;
    std::uint64_t data_seed = 11;
    DenoiserTrainConfig denoiser;
    EmbedderTrainConfig embedder;

    /// Settings that fit the end-to-end CPU budget.
    static TrainingRecipe desk();
    nlohmann::json to_json() const;
};

using LogFn = std::function<void(const std::string&)>;

/// Samples the datasets, trains the embedder, writes embedder.ckpt and
/// embedder_report.json under `dir`, and returns the report.
TrainReport train_embedder_to(const std::filesystem::path& dir, const TrainingRecipe& recipe, const LogFn& log = {});
/// Same for the denoiser (denoiser.ckpt, denoiser_report.json).
TrainReport train_denoiser_to(const std::filesystem::path& dir, const TrainingRecipe& recipe, const LogFn& log = {});

}  // namespace fabric::train
