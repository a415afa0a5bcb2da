#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fabric/denoiser/unet.hpp"
#include "fabric/diffusion/schedule.hpp"
#include "fabric/rng.hpp"
#include "fabric/world/shapes.hpp"

namespace fabric::loop {

inline constexpr std::uint64_t kLatentStream = 1;

enum class ScheduleKind { constant, first_half, second_half, linear_interp };

std::string schedule_name(ScheduleKind k);
ScheduleKind parse_schedule(const std::string& s);

struct FeedbackSchedule {
    ScheduleKind kind = ScheduleKind::first_half;
    float w_max = 0.8f;
    /// Fraction of the denoising steps covered by first_half (and skipped by second_half).
    double cutoff = 0.5;
    float w_start = 1.0f;
    float w_end = 0.0f;

    void validate() const;
    nlohmann::json to_json() const;
    static FeedbackSchedule from_json(const nlohmann::json& j);
    bool operator==(const FeedbackSchedule&) const = default;
};

struct FeedbackWeights {
    float pos = 0.0f;
    float neg = 0.0f;
};

/// Reference weights at sampler step `step_index` of `total_steps` (step 0 is the noisiest).
FeedbackWeights schedule_weight(const FeedbackSchedule& schedule, int step_index, int total_steps);

/// Each specified token independently replaced by null with probability p.
world::Prompt prompt_dropout(const world::Prompt& prompt, double p, Rng& rng);

struct FeedbackImage {
    std::string id;
    /// [3, H, W] in [-1, 1].
    Tensor image;
};

struct FeedbackState {
    std::vector<FeedbackImage> liked;
    std::vector<FeedbackImage> disliked;
    int round_index = 0;

    bool empty() const noexcept { return liked.empty() && disliked.empty(); }
    void add(std::vector<FeedbackImage> new_liked, std::vector<FeedbackImage> new_disliked);
};

struct GenerationConfig {
    int n = 4;
    int rounds = 3;
    FeedbackSchedule schedule;
    double dropout_p = 0.0;
    /// Baseline arms set this to false and never read the feedback state.
    bool use_feedback = true;
    /// Positive-only arms drop the disliked images.
    bool use_negative = true;
    int sampling_steps = diffusion::kDefaultSamplingSteps;
    float guidance_scale = diffusion::kDefaultGuidanceScale;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    /// Fields absent from `j` keep their defaults; unknown keys are rejected.
    static GenerationConfig from_json(const nlohmann::json& j, GenerationConfig base);
    static GenerationConfig from_json(const nlohmann::json& j);
};

struct GeneratedBatch {
    /// [n, 3, H, W] on the 8-bit grid.
    Tensor images;
    /// Conditional prompt actually used for each image (after dropout).
    std::vector<world::Prompt> prompts;
};

class Generator {
public:
    /// Binds to `net`, which must outlive the Generator.
    explicit Generator(const denoiser::UNet& net);

    const denoiser::UNet& net() const noexcept { return net_; }
    const diffusion::NoiseSchedule& schedule() const noexcept { return schedule_; }

    /// Classifier-free guided ancestral sampling with liked images injected into
    /// the conditional pass and disliked images into the unconditional pass.
    /// The initial latent and the ancestral noise are drawn from
    /// Rng(derive_seed(seed, {kLatentStream})).
    GeneratedBatch generate(const world::Prompt& prompt, const FeedbackState& feedback, const GenerationConfig& config,
                            std::uint64_t seed) const;

private:
    const denoiser::UNet& net_;
    diffusion::NoiseSchedule schedule_;
};

/// Indices into the current batch.
struct FeedbackChoice {
    std::vector<int> liked;
    std::vector<int> disliked;
};

/// Maps a generated batch (and its 1-based round index) to liked/disliked indices.
using FeedbackSource = std::function<FeedbackChoice(const GeneratedBatch&, int round)>;

struct RoundRecord {
    int round_index = 0;
    world::Prompt prompt;
    std::vector<world::Prompt> used_prompts;
    std::vector<std::string> image_ids;
    Tensor images;
    std::vector<std::string> liked_ids;
    std::vector<std::string> disliked_ids;
    /// Feedback sizes in effect while this round was generated.
    int feedback_liked = 0;
    int feedback_disliked = 0;
};

std::string image_id(int round, int index);
/// Seed of round `round` (1-based) of a run with base seed `seed`.
std::uint64_t round_seed(std::uint64_t seed, int round);

/// `config.rounds` rounds, each generated with the feedback accumulated so far.
std::vector<RoundRecord> run_feedback_rounds(const Generator& gen, const world::Prompt& prompt,
                                             const FeedbackSource& source, const GenerationConfig& config);

}  // namespace fabric::loop
