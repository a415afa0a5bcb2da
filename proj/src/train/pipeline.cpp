#include "fabric/train/pipeline.hpp"

#include "fabric/io/png.hpp"
#include "fabric/train/checkpoint.hpp"

namespace fabric::train {

namespace {

std::vector<world::Sample> dataset(int n, std::uint64_t seed, std::uint64_t tag) {
    Rng rng(derive_seed(seed, {tag}));
    return world::sample_dataset(n, world::Variant::train, rng);
}

void write_report(const std::filesystem::path& path, const TrainReport& report) {
    const std::string text = report.to_json().dump(1);
    io::write_file_atomic(path, text.data(), text.size());
}

EpochCallback epoch_logger(const LogFn& log, const std::string& model, int epochs) {
    if (!log) return {};
    return [log, model, epochs](int epoch, double loss) {
        log(model + " epoch " + std::to_string(epoch) + "/" + std::to_string(epochs) + " loss " + std::to_string(loss));
    };
}

}  // namespace

TrainingRecipe TrainingRecipe::desk() {
    TrainingRecipe r;
    r.denoiser.epochs = 12;
    r.denoiser.batch = 64;
    r.denoiser.lr = 2e-3f;
    r.denoiser.lr_floor = 0.02;
    r.embedder.lr_floor = 0.02;
    return r;
}

nlohmann::json TrainingRecipe::to_json() const {
    return {{"train_images", train_images},
            {"validation_images", validation_images},
            {"data_seed", data_seed},
            {"denoiser",
             {{"epochs", denoiser.epochs}, {"batch", denoiser.batch}, {"lr", denoiser.lr}, {"lr_floor", denoiser.lr_floor},
              {"null_prompt_prob", denoiser.null_prompt_prob}, {"seed", denoiser.seed}}},
            {"embedder",
             {{"epochs", embedder.epochs}, {"batch", embedder.batch}, {"lr", embedder.lr}, {"lr_floor", embedder.lr_floor},
              {"seed", embedder.seed}}}};
}

TrainReport train_embedder_to(const std::filesystem::path& dir, const TrainingRecipe& recipe, const LogFn& log) {
    std::filesystem::create_directories(dir);
    const auto train = dataset(recipe.train_images, recipe.data_seed, 1);
    const auto val = dataset(recipe.validation_images, recipe.data_seed, 2);
    const eval::EmbedderConfig config;
    auto model = train_embedder(train, val, config, recipe.embedder, epoch_logger(log, "embedder", recipe.embedder.epochs));
    save_checkpoint(dir / "embedder.ckpt", "embedder", config.to_json(), model.params);
    write_report(dir / "embedder_report.json", model.report);
    return model.report;
}

TrainReport train_denoiser_to(const std::filesystem::path& dir, const TrainingRecipe& recipe, const LogFn& log) {
    std::filesystem::create_directories(dir);
    const auto train = dataset(recipe.train_images, recipe.data_seed, 1);
    const auto val = dataset(std::min(recipe.validation_images, 512), recipe.data_seed, 2);
    const denoiser::DenoiserConfig config;
    auto model = train_denoiser(train, val, config, recipe.denoiser, epoch_logger(log, "denoiser", recipe.denoiser.epochs));
    save_checkpoint(dir / "denoiser.ckpt", "denoiser", config.to_json(), model.params);
    write_report(dir / "denoiser_report.json", model.report);
    return model.report;
}

}  // namespace fabric::train
