#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <json.hpp>

#include "fabric/eval/embedder.hpp"
#include "fabric/tensor.hpp"

namespace fabric::eval {

/// Cosine of two equally sized vectors, computed in double.
double cosine(std::span<const float> a, std::span<const float> b);
/// Row i of an [N, D] matrix.
std::span<const float> row(const Tensor& m, int i);

struct SimilarityReport {
    /// Mean over the batch of each image's average cosine to the positives; absent without positives.
    std::optional<double> s_pos;
    std::optional<double> s_neg;
    /// Per-image average cosine to the positives (resp. negatives).
    std::vector<double> pos;
    std::vector<double> neg;

    nlohmann::json to_json() const;
};

/// images, positives and negatives are embedding matrices [N, D] (an empty
/// Tensor stands for an empty list).
SimilarityReport feedback_similarity(const Tensor& images, const Tensor& positives, const Tensor& negatives);

struct DiversityReport {
    double d = 0.0;
    /// Upper-triangle cosines in row-major order (i < j).
    std::vector<double> pairwise;

    nlohmann::json to_json() const;
};

/// d = 1 - mean pairwise cosine over embeddings [n, D], n >= 2.
DiversityReport in_batch_diversity(const Tensor& embeddings);

/// Scores images by cosine to a fixed unit-norm anchor embedding.
class PreferenceOracle {
public:
    explicit PreferenceOracle(Tensor anchor);
    /// Anchor = renormalised mean embedding of `count` train renders of the large red circle.
    static PreferenceOracle large_red_circle(const Embedder& embedder, int count = 100, std::uint64_t seed = 2024);

    const Tensor& anchor() const noexcept { return anchor_; }
    std::vector<double> score(const Tensor& embeddings) const;

private:
    Tensor anchor_;
};

struct Selection {
    int liked = 0;
    int disliked = 1;
};

/// Highest score liked, lowest disliked, ties to the lowest index, disliked != liked.
Selection select_by_scores(std::span<const double> scores);
Selection preference_select(const Tensor& embeddings, const PreferenceOracle& oracle);
/// By cosine of each row of `embeddings` to the target embedding.
Selection target_select(const Tensor& embeddings, std::span<const float> target);

}  // namespace fabric::eval
