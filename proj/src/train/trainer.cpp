#include "fabric/train/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "fabric/diffusion/schedule.hpp"
#include "fabric/nn/ops.hpp"

namespace fabric::train {

using world::Prompt;
using world::Sample;

namespace {

Tensor batch_images(const std::vector<Sample>& data, std::span<const std::size_t> idx) {
    std::vector<Tensor> imgs;
    imgs.reserve(idx.size());
    for (auto i : idx) imgs.push_back(data[i].image);
    return stack(imgs);
}

std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    std::shuffle(p.begin(), p.end(), rng.engine());
    return p;
}

Tensor noise_batch(const Tensor& x0, const Tensor& eps, std::span<const int> t, const diffusion::NoiseSchedule& schedule) {
    std::vector<Tensor> items;
    for (std::size_t i = 0; i < t.size(); ++i) {
        items.push_back(diffusion::forward_noise_with(item(x0, static_cast<int>(i)), item(eps, static_cast<int>(i)), t[i], schedule));
    }
    return stack(items);
}

void check_config(int epochs, int batch, float lr, const std::vector<Sample>& train) {
    if (train.empty()) throw std::invalid_argument("training dataset is empty");
    if (epochs < 1 || batch < 1) throw std::invalid_argument("epochs and batch must be >= 1");
    if (!(lr > 0.0f)) throw std::invalid_argument("learning rate must be positive");
}

void adam_step(nn::ParamStore& params, const nn::Grad& grads, float lr, int epoch, std::size_t step) {
    try {
        nn::Adam::step(params, grads, nn::AdamConfig{lr});
    } catch (const nn::NonFiniteGradient& e) {
        throw TrainingError("non-finite gradient at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                            ": " + e.what());
    }
}

/// Cosine decay from lr to lr * floor over the whole run.
float decayed_lr(float lr, double floor, std::size_t step, std::size_t total) {
    const double progress = total > 1 ? static_cast<double>(step) / static_cast<double>(total - 1) : 0.0;
    const double pi = std::acos(-1.0);
    return static_cast<float>(lr * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(pi * progress))));
}

std::size_t total_steps(std::size_t n, int batch, int epochs) {
    return (n + static_cast<std::size_t>(batch) - 1) / static_cast<std::size_t>(batch) * static_cast<std::size_t>(epochs);
}

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

nlohmann::json TrainReport::to_json() const {
    return {{"model", model}, {"epoch_loss", epoch_loss}, {"validation", validation},
            {"wall_seconds", wall_seconds}, {"seed", seed}};
}

TrainReport TrainReport::from_json(const nlohmann::json& j) {
    TrainReport r;
    r.model = j.at("model").get<std::string>();
    r.epoch_loss = j.at("epoch_loss").get<std::vector<double>>();
    r.validation = j.at("validation");
    r.wall_seconds = j.at("wall_seconds").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    return r;
}

TrainedModel train_denoiser(const std::vector<Sample>& train, const std::vector<Sample>& validation,
                            const denoiser::DenoiserConfig& model, const DenoiserTrainConfig& config,
                            const EpochCallback& on_epoch) {
    check_config(config.epochs, config.batch, config.lr, train);
    if (config.null_prompt_prob < 0.0 || config.null_prompt_prob > 1.0) {
        throw std::invalid_argument("null prompt probability must be in [0, 1]");
    }
    const auto start = std::chrono::steady_clock::now();
    const auto schedule = diffusion::build_schedule(model.train_steps, diffusion::kDefaultBetaStart, diffusion::kDefaultBetaEnd);

    TrainedModel out;
    out.report.model = "denoiser";
    out.report.seed = config.seed;
    Rng init_rng(derive_seed(config.seed, {0}));
    denoiser::UNet::init_params(model, out.params, init_rng);
    const denoiser::UNet net(model, out.params);

    Rng rng(derive_seed(config.seed, {1}));
    std::size_t step = 0;
    const std::size_t total = total_steps(train.size(), config.batch, config.epochs);
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto order = permutation(train.size(), rng);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(config.batch)) {
            const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(config.batch));
            const std::span<const std::size_t> idx(order.data() + begin, end - begin);

            const Tensor x0 = batch_images(train, idx);
            const Tensor eps = gaussian_tensor(x0.shape(), rng);
            std::vector<int> t(idx.size());
            for (auto& ti : t) ti = 1 + rng.below(model.train_steps);
            const bool null_batch = rng.uniform() < config.null_prompt_prob;
            std::vector<Prompt> prompts;
            for (auto i : idx) prompts.push_back(null_batch ? Prompt::null() : train[i].prompt);

            const Tensor zt = noise_batch(x0, eps, t, schedule);

            nn::Graph g;
            nn::Var pred = net.forward(g, g.constant(zt), t, prompts);
            nn::Var loss = nn::mse_loss(g, pred, g.constant(eps));
            const float lv = g.value(loss)[0];
            if (!std::isfinite(lv)) {
                throw TrainingError("non-finite denoiser loss at epoch " + std::to_string(epoch) + ", step " +
                                    std::to_string(step));
            }
            adam_step(out.params, g.backward(loss), decayed_lr(config.lr, config.lr_floor, step, total), epoch, step);
            loss_sum += lv;
            ++batches;
            ++step;
        }
        out.report.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
        if (on_epoch) on_epoch(epoch, out.report.epoch_loss.back());
    }

    if (!validation.empty()) {
        Rng vrng(derive_seed(config.seed, {2}));
        double sq = 0.0;
        std::size_t count = 0;
        for (std::size_t begin = 0; begin < validation.size(); begin += 64) {
            const std::size_t end = std::min(validation.size(), begin + 64);
            std::vector<std::size_t> idx(end - begin);
            std::iota(idx.begin(), idx.end(), begin);
            const Tensor x0 = batch_images(validation, idx);
            const Tensor eps = gaussian_tensor(x0.shape(), vrng);
            std::vector<int> t;
            std::vector<Prompt> prompts;
            for (auto i : idx) {
                t.push_back(1 + static_cast<int>(i % static_cast<std::size_t>(model.train_steps)));
                prompts.push_back(validation[i].prompt);
            }
            const Tensor zt = noise_batch(x0, eps, t, schedule);
            const Tensor pred = net.predict(zt, t, prompts);
            for (std::size_t k = 0; k < pred.size(); ++k) {
                const double d = static_cast<double>(pred[k]) - eps[k];
                sq += d * d;
            }
            count += pred.size();
        }
        out.report.validation["eps_mse"] = sq / static_cast<double>(count);
        out.report.validation["samples"] = validation.size();
    }
    out.report.wall_seconds = seconds_since(start);
    return out;
}

double embedder_accuracy(const eval::Embedder& embedder, const std::vector<Sample>& samples) {
    if (samples.empty()) throw std::invalid_argument("accuracy needs at least one sample");
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < samples.size(); begin += 256) {
        const std::size_t end = std::min(samples.size(), begin + 256);
        std::vector<std::size_t> idx(end - begin);
        std::iota(idx.begin(), idx.end(), begin);
        const Tensor logits = embedder.logits(batch_images(samples, idx));
        const int k = logits.dim(1);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const float* row = logits.ptr() + i * static_cast<std::size_t>(k);
            const int pred = static_cast<int>(std::max_element(row, row + k) - row);
            correct += pred == world::class_index(samples[idx[i]].prompt);
        }
    }
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

TrainedModel train_embedder(const std::vector<Sample>& train, const std::vector<Sample>& validation,
                            const eval::EmbedderConfig& model, const EmbedderTrainConfig& config,
                            const EpochCallback& on_epoch) {
    check_config(config.epochs, config.batch, config.lr, train);
    const auto start = std::chrono::steady_clock::now();

    TrainedModel out;
    out.report.model = "embedder";
    out.report.seed = config.seed;
    Rng init_rng(derive_seed(config.seed, {0}));
    eval::Embedder::init_params(model, out.params, init_rng);
    const eval::Embedder net(model, out.params);

    Rng rng(derive_seed(config.seed, {1}));
    std::size_t step = 0;
    const std::size_t total = total_steps(train.size(), config.batch, config.epochs);
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto order = permutation(train.size(), rng);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(config.batch)) {
            const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(config.batch));
            const std::span<const std::size_t> idx(order.data() + begin, end - begin);
            std::vector<int> labels;
            for (auto i : idx) labels.push_back(world::class_index(train[i].prompt));

            nn::Graph g;
            auto outputs = net.forward(g, g.constant(batch_images(train, idx)));
            nn::Var loss = nn::cross_entropy(g, outputs.logits, labels);
            const float lv = g.value(loss)[0];
            if (!std::isfinite(lv)) {
                throw TrainingError("non-finite embedder loss at epoch " + std::to_string(epoch) + ", step " +
                                    std::to_string(step));
            }
            adam_step(out.params, g.backward(loss), decayed_lr(config.lr, config.lr_floor, step, total), epoch, step);
            loss_sum += lv;
            ++batches;
            ++step;
        }
        out.report.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
        if (on_epoch) on_epoch(epoch, out.report.epoch_loss.back());
    }
    if (!validation.empty()) {
        out.report.validation["accuracy"] = embedder_accuracy(net, validation);
        out.report.validation["samples"] = validation.size();
    }
    out.report.wall_seconds = seconds_since(start);
    return out;
}

}  // namespace fabric::train
