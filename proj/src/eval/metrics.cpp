#include "fabric/eval/metrics.hpp"

#include <cmath>
#include <stdexcept>

#include "fabric/world/shapes.hpp"

namespace fabric::eval {

double cosine(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size() || a.empty()) throw ShapeError("cosine: vectors must be non-empty and equally sized");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine: zero vector");
    return dot / std::sqrt(na * nb);
}

std::span<const float> row(const Tensor& m, int i) {
    if (m.rank() != 2 || i < 0 || i >= m.dim(0)) throw ShapeError("row: index out of range for " + shape_str(m.shape()));
    const auto d = static_cast<std::size_t>(m.dim(1));
    return m.data().subspan(static_cast<std::size_t>(i) * d, d);
}

namespace {

int rows(const Tensor& m) { return m.empty() ? 0 : m.dim(0); }

std::vector<double> mean_cosines(const Tensor& images, const Tensor& refs) {
    std::vector<double> out;
    for (int i = 0; i < images.dim(0); ++i) {
        double s = 0.0;
        for (int j = 0; j < refs.dim(0); ++j) s += cosine(row(images, i), row(refs, j));
        out.push_back(s / refs.dim(0));
    }
    return out;
}

double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

void check_matrix(const Tensor& m, const char* what) {
    if (!m.empty() && m.rank() != 2) throw ShapeError(std::string(what) + ": expected [N, D], got " + shape_str(m.shape()));
}

}  // namespace

nlohmann::json SimilarityReport::to_json() const {
    nlohmann::json j{{"pos", pos}, {"neg", neg}};
    j["s_pos"] = s_pos ? nlohmann::json(*s_pos) : nlohmann::json(nullptr);
    j["s_neg"] = s_neg ? nlohmann::json(*s_neg) : nlohmann::json(nullptr);
    return j;
}

SimilarityReport feedback_similarity(const Tensor& images, const Tensor& positives, const Tensor& negatives) {
    check_matrix(images, "feedback_similarity images");
    check_matrix(positives, "feedback_similarity positives");
    check_matrix(negatives, "feedback_similarity negatives");
    SimilarityReport r;
    if (rows(images) == 0) return r;
    if (rows(positives) > 0) {
        r.pos = mean_cosines(images, positives);
        r.s_pos = mean(r.pos);
    }
    if (rows(negatives) > 0) {
        r.neg = mean_cosines(images, negatives);
        r.s_neg = mean(r.neg);
    }
    return r;
}

nlohmann::json DiversityReport::to_json() const { return {{"d", d}, {"pairwise", pairwise}}; }

DiversityReport in_batch_diversity(const Tensor& embeddings) {
    check_matrix(embeddings, "in_batch_diversity");
    const int n = rows(embeddings);
    if (n < 2) throw std::invalid_argument("in_batch_diversity needs at least two images");
    DiversityReport r;
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) r.pairwise.push_back(cosine(row(embeddings, i), row(embeddings, j)));
    }
    r.d = 1.0 - mean(r.pairwise);
    return r;
}

PreferenceOracle::PreferenceOracle(Tensor anchor) : anchor_(std::move(anchor)) {
    if (anchor_.rank() != 1 || anchor_.empty()) throw ShapeError("preference anchor must be a vector");
    double n = 0.0;
    for (float x : anchor_.data()) n += static_cast<double>(x) * x;
    if (!(n > 0.0)) throw std::invalid_argument("preference anchor must be non-zero");
    const float inv = static_cast<float>(1.0 / std::sqrt(n));
    for (float& x : anchor_.data()) x *= inv;
}

PreferenceOracle PreferenceOracle::large_red_circle(const Embedder& embedder, int count, std::uint64_t seed) {
    if (count < 1) throw std::invalid_argument("anchor needs at least one render");
    Rng rng(seed);
    std::vector<Tensor> imgs;
    for (int i = 0; i < count; ++i) {
        const auto spec = world::random_spec(world::ShapeKind::circle, world::Color::red, world::Size::large, rng);
        imgs.push_back(world::render(spec, world::Variant::train, rng.engine()()));
    }
    const Tensor e = embedder.embed(stack(imgs));
    Tensor anchor({e.dim(1)});
    for (int i = 0; i < count; ++i) {
        const auto r = row(e, i);
        for (std::size_t k = 0; k < r.size(); ++k) anchor[k] += r[k];
    }
    return PreferenceOracle(std::move(anchor));
}

std::vector<double> PreferenceOracle::score(const Tensor& embeddings) const {
    check_matrix(embeddings, "preference score");
    std::vector<double> s;
    for (int i = 0; i < rows(embeddings); ++i) s.push_back(cosine(row(embeddings, i), anchor_.data()));
    return s;
}

Selection select_by_scores(std::span<const double> scores) {
    if (scores.size() < 2) throw std::invalid_argument("feedback selection needs at least two images");
    Selection s{0, -1};
    for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] > scores[static_cast<std::size_t>(s.liked)]) s.liked = static_cast<int>(i);
    }
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (static_cast<int>(i) == s.liked) continue;
        if (s.disliked < 0 || scores[i] < scores[static_cast<std::size_t>(s.disliked)]) s.disliked = static_cast<int>(i);
    }
    return s;
}

Selection preference_select(const Tensor& embeddings, const PreferenceOracle& oracle) {
    return select_by_scores(oracle.score(embeddings));
}

Selection target_select(const Tensor& embeddings, std::span<const float> target) {
    check_matrix(embeddings, "target_select");
    std::vector<double> s;
    for (int i = 0; i < rows(embeddings); ++i) s.push_back(cosine(row(embeddings, i), target));
    return select_by_scores(s);
}

}  // namespace fabric::eval
