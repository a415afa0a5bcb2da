#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fabric/harness/models.hpp"
#include "fabric/harness/stats.hpp"
#include "fabric/loop/feedback.hpp"

namespace fabric::harness {

inline constexpr int kResultsSchemaVersion = 1;

enum class Experiment { preference, target, schedule, dropout };

std::string experiment_name(Experiment e);
Experiment parse_experiment(const std::string& s);

struct ExperimentConfig {
    Experiment experiment = Experiment::target;
    int prompts = 50;
    int rounds = 3;
    int n = 4;
    /// Feedback strength; 0.1 for the preference protocol and 0.8 otherwise by default.
    float w = 0.8f;
    loop::ScheduleKind schedule = loop::ScheduleKind::first_half;
    /// Dropout probability of the dropout arm.
    double dropout_p = 0.3;
    int sampling_steps = diffusion::kDefaultSamplingSteps;
    std::uint64_t seed = 7;
    /// 0 picks the hardware concurrency.
    int workers = 0;

    static ExperimentConfig defaults(Experiment e);
    void validate() const;
    nlohmann::json to_json() const;
};

struct PromptCase {
    int id = 0;
    world::Prompt prompt;
    std::uint64_t seed = 0;
    /// Target protocols only.
    std::optional<world::ShapeSpec> target_spec;
    Tensor target_image;
};

struct RoundMetrics {
    loop::RoundRecord record;
    std::vector<double> scores;
    double score_min = 0.0;
    double score_mean = 0.0;
    double score_max = 0.0;
    double score_cummax = 0.0;
    std::optional<double> s_pos;
    std::optional<double> s_neg;
    double diversity = 0.0;
};

struct AggregateRow {
    int round = 0;
    double score_min = 0.0;
    double score_mean = 0.0;
    double score_max = 0.0;
    double score_cummax = 0.0;
    std::optional<double> s_pos;
    std::optional<double> s_neg;
    double diversity = 0.0;

    nlohmann::json to_json() const;
};

struct ArmResult {
    std::string name;
    loop::GenerationConfig generation;
    /// Arm whose feedback sets s_pos/s_neg are measured against; empty means the arm's own.
    std::string similarity_reference;
    /// records[prompt][round - 1]
    std::vector<std::vector<RoundMetrics>> records;
    std::vector<AggregateRow> aggregates;
};

/// A directional claim checked by paired sign tests over prompts.
struct ClaimCheck {
    std::string name;
    /// "greater": a > b significantly; "not_less": b > a is not significant.
    std::string kind;
    std::string a;
    std::string b;
    SignTest forward;
    SignTest reverse;
    bool passed = false;

    nlohmann::json to_json() const;
};

struct ExperimentResult {
    ExperimentConfig config;
    std::vector<PromptCase> cases;
    std::vector<ArmResult> arms;
    std::vector<ClaimCheck> claims;

    const ArmResult& arm(const std::string& name) const;
    nlohmann::json to_json() const;
    std::string csv() const;
};

std::vector<PromptCase> make_cases(const ExperimentConfig& config);

/// Called after each finished prompt with (completed, total).
using ProgressFn = std::function<void(int, int)>;

ExperimentResult run_experiment(const Models& models, const ExperimentConfig& config, const ProgressFn& progress = {});

/// Per-round means over prompts.
std::vector<AggregateRow> aggregate(const std::vector<std::vector<RoundMetrics>>& records);

/// results.json, results.csv and images/{arm}/p{prompt}/{image_id}.png under `dir`.
void write_results(const ExperimentResult& result, const std::filesystem::path& dir);

/// Runs fn(i) for i in [0, n) on up to `workers` threads; rethrows the first failure.
void parallel_for(int n, int workers, const std::function<void(int)>& fn);

}  // namespace fabric::harness
