#include "fabric/harness/gates.hpp"

#include <algorithm>
#include <stdexcept>

#include "fabric/harness/experiments.hpp"

namespace fabric::harness {

nlohmann::json AgreementReport::to_json() const {
    return {{"images", images}, {"shape", shape}, {"color", color}, {"size", size}, {"class", full_class}};
}

AgreementReport prompt_agreement(const Models& models, int images, std::uint64_t seed, int workers) {
    if (images < 1) throw std::invalid_argument("prompt_agreement needs at least one image");
    constexpr int kPerBatch = 8;
    const int batches = (images + kPerBatch - 1) / kPerBatch;
    std::vector<std::array<int, 4>> hits(static_cast<std::size_t>(batches));
    parallel_for(batches, workers, [&](int b) {
        const int n = std::min(kPerBatch, images - b * kPerBatch);
        const int cls = b % world::kNumClasses;
        const world::Prompt prompt = world::class_prompt(cls);
        loop::GenerationConfig cfg;
        cfg.n = n;
        cfg.use_feedback = false;
        const auto batch = models.generator().generate(prompt, {}, cfg, derive_seed(seed, {static_cast<std::uint64_t>(b)}));
        const Tensor logits = models.embedder().logits(batch.images);
        auto& h = hits[static_cast<std::size_t>(b)];
        for (int i = 0; i < n; ++i) {
            const auto row = eval::row(logits, i);
            const int pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
            const world::Prompt got = world::class_prompt(pred);
            h[0] += got.shape == prompt.shape;
            h[1] += got.color == prompt.color;
            h[2] += got.size == prompt.size;
            h[3] += pred == cls;
        }
    });
    AgreementReport r;
    r.images = images;
    std::array<int, 4> total{};
    for (const auto& h : hits) {
        for (std::size_t k = 0; k < 4; ++k) total[k] += h[k];
    }
    r.shape = static_cast<double>(total[0]) / images;
    r.color = static_cast<double>(total[1]) / images;
    r.size = static_cast<double>(total[2]) / images;
    r.full_class = static_cast<double>(total[3]) / images;
    return r;
}

}  // namespace fabric::harness
