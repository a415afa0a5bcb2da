#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "fabric/tensor.hpp"

namespace fabric {

/// Derives an independent stream seed from a base seed and a list of tags.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags);

/// Seeded random stream. Identical seeds give identical sequences within a build.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    float normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    /// Uniform integer in [0, n).
    int below(int n) { return static_cast<int>(std::uniform_int_distribution<int>(0, n - 1)(engine_)); }
    float uniform(float lo, float hi) { return lo + static_cast<float>(uniform()) * (hi - lo); }
    std::mt19937_64& engine() noexcept { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<float> normal_{0.0f, 1.0f};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

Tensor gaussian_tensor(const Shape& shape, Rng& rng);

}  // namespace fabric
