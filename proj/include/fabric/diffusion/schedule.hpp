#pragma once

#include <cstdint>
#include <vector>

#include "fabric/rng.hpp"
#include "fabric/tensor.hpp"

namespace fabric::diffusion {

inline constexpr int kDefaultTrainSteps = 200;
inline constexpr double kDefaultBetaStart = 1e-4;
inline constexpr double kDefaultBetaEnd = 0.02;
inline constexpr int kDefaultSamplingSteps = 50;
inline constexpr float kDefaultGuidanceScale = 3.0f;

/// Discrete DDPM noise schedule over timesteps 1..T. Timestep 0 denotes the
/// clean image (alpha_bar = 1, sigma = 0).
class NoiseSchedule {
public:
    NoiseSchedule(std::vector<double> betas);

    int train_steps() const noexcept { return static_cast<int>(betas_.size()); }
    double beta(int t) const;
    double alpha(int t) const;
    double alpha_bar(int t) const;
    /// sqrt((1 - alpha_bar) / alpha_bar), the noise level in sigma space.
    double sigma(int t) const;

    const std::vector<double>& betas() const noexcept { return betas_; }
    const std::vector<double>& alpha_bars() const noexcept { return alpha_bars_; }

private:
    void check(int t, int lo) const;

    std::vector<double> betas_;
    std::vector<double> alpha_bars_;
};

/// Linear beta ramp from beta_start to beta_end over T steps.
NoiseSchedule build_schedule(int train_steps, double beta_start, double beta_end);
NoiseSchedule default_schedule();

struct SamplerConfig {
    /// Strictly decreasing timesteps in [1, T]; each step goes to the next entry
    /// and the last goes to 0.
    std::vector<int> timesteps;
    float guidance_scale = kDefaultGuidanceScale;
    std::uint64_t seed = 0;

    int steps() const noexcept { return static_cast<int>(timesteps.size()); }
    /// Target timestep of step i.
    int next_timestep(int i) const { return i + 1 < steps() ? timesteps[static_cast<std::size_t>(i) + 1] : 0; }
    void validate(const NoiseSchedule& schedule) const;

    /// `steps` uniformly strided timesteps T, T - T/steps, ...
    static SamplerConfig strided(const NoiseSchedule& schedule, int steps, float guidance_scale, std::uint64_t seed);
};

/// z = sqrt(alpha_bar_t) * x + sqrt(1 - alpha_bar_t) * eps with the given eps.
Tensor forward_noise_with(const Tensor& x, const Tensor& eps, int t, const NoiseSchedule& schedule);
/// Same, drawing eps from `rng`.
Tensor forward_noise(const Tensor& x, int t, const NoiseSchedule& schedule, Rng& rng);

/// eps_uncond + scale * (eps_cond - eps_uncond)
Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, float guidance_scale);

/// One Euler-ancestral step from t_from to t_to (t_to may be 0). The latent
/// lives in the DDPM parameterisation; the step is taken in sigma space.
/// Draws fresh noise from `rng` only when sigma_up > 0.
Tensor euler_ancestral_step(const Tensor& z, const Tensor& eps_hat, int t_from, int t_to,
                            const NoiseSchedule& schedule, Rng& rng);

struct AncestralSigmas {
    double up;
    double down;
};
AncestralSigmas ancestral_sigmas(double sigma_from, double sigma_to);

}  // namespace fabric::diffusion
