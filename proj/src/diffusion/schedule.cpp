#include "fabric/diffusion/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace fabric::diffusion {

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
    if (betas_.empty()) throw std::invalid_argument("noise schedule needs at least one step");
    double prod = 1.0;
    alpha_bars_.reserve(betas_.size());
    for (double b : betas_) {
        if (!(b > 0.0 && b < 1.0)) throw std::invalid_argument("beta outside (0, 1): " + std::to_string(b));
        prod *= 1.0 - b;
        alpha_bars_.push_back(prod);
    }
}

void NoiseSchedule::check(int t, int lo) const {
    if (t < lo || t > train_steps()) {
        throw std::out_of_range("timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                                std::to_string(train_steps()) + "]");
    }
}

double NoiseSchedule::beta(int t) const {
    check(t, 1);
    return betas_[static_cast<std::size_t>(t) - 1];
}

double NoiseSchedule::alpha(int t) const { return 1.0 - beta(t); }

double NoiseSchedule::alpha_bar(int t) const {
    check(t, 0);
    return t == 0 ? 1.0 : alpha_bars_[static_cast<std::size_t>(t) - 1];
}

double NoiseSchedule::sigma(int t) const {
    const double ab = alpha_bar(t);
    return std::sqrt((1.0 - ab) / ab);
}

NoiseSchedule build_schedule(int train_steps, double beta_start, double beta_end) {
    if (train_steps < 1) throw std::invalid_argument("train_steps must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw std::invalid_argument("need 0 < beta_start <= beta_end < 1");
    }
    std::vector<double> betas(static_cast<std::size_t>(train_steps));
    for (int i = 0; i < train_steps; ++i) {
        const double f = train_steps == 1 ? 0.0 : static_cast<double>(i) / (train_steps - 1);
        betas[static_cast<std::size_t>(i)] = beta_start + f * (beta_end - beta_start);
    }
    return NoiseSchedule(std::move(betas));
}

NoiseSchedule default_schedule() { return build_schedule(kDefaultTrainSteps, kDefaultBetaStart, kDefaultBetaEnd); }

void SamplerConfig::validate(const NoiseSchedule& schedule) const {
    if (timesteps.empty()) throw std::invalid_argument("sampler needs at least one timestep");
    for (std::size_t i = 0; i < timesteps.size(); ++i) {
        if (timesteps[i] < 1 || timesteps[i] > schedule.train_steps()) {
            throw std::invalid_argument("sampler timestep out of range: " + std::to_string(timesteps[i]));
        }
        if (i > 0 && timesteps[i] >= timesteps[i - 1]) throw std::invalid_argument("sampler timesteps must strictly decrease");
    }
}

SamplerConfig SamplerConfig::strided(const NoiseSchedule& schedule, int steps, float guidance_scale, std::uint64_t seed) {
    const int t_max = schedule.train_steps();
    if (steps < 1 || steps > t_max) throw std::invalid_argument("sampling steps must be in [1, T]");
    SamplerConfig cfg;
    cfg.guidance_scale = guidance_scale;
    cfg.seed = seed;
    for (int i = 0; i < steps; ++i) {
        cfg.timesteps.push_back(t_max - static_cast<int>((static_cast<std::int64_t>(i) * t_max) / steps));
    }
    return cfg;
}

Tensor forward_noise_with(const Tensor& x, const Tensor& eps, int t, const NoiseSchedule& schedule) {
    if (t < 1 || t > schedule.train_steps()) throw std::out_of_range("forward_noise: timestep out of range");
    if (x.shape() != eps.shape()) throw ShapeError("forward_noise: noise shape mismatch");
    const double ab = schedule.alpha_bar(t);
    const float a = static_cast<float>(std::sqrt(ab));
    const float s = static_cast<float>(std::sqrt(1.0 - ab));
    Tensor z(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) z[i] = a * x[i] + s * eps[i];
    return z;
}

Tensor forward_noise(const Tensor& x, int t, const NoiseSchedule& schedule, Rng& rng) {
    if (t < 1 || t > schedule.train_steps()) throw std::out_of_range("forward_noise: timestep out of range");
    return forward_noise_with(x, gaussian_tensor(x.shape(), rng), t, schedule);
}

Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, float guidance_scale) {
    if (eps_cond.shape() != eps_uncond.shape()) {
        throw ShapeError("cfg_combine: shape mismatch " + shape_str(eps_cond.shape()) + " vs " +
                         shape_str(eps_uncond.shape()));
    }
    Tensor out(eps_cond.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps_uncond[i] + guidance_scale * (eps_cond[i] - eps_uncond[i]);
    return out;
}

AncestralSigmas ancestral_sigmas(double sigma_from, double sigma_to) {
    if (sigma_to <= 0.0) return {0.0, 0.0};
    const double up = std::min(sigma_to, std::sqrt(sigma_to * sigma_to * (sigma_from * sigma_from - sigma_to * sigma_to) /
                                                   (sigma_from * sigma_from)));
    return {up, std::sqrt(sigma_to * sigma_to - up * up)};
}

Tensor euler_ancestral_step(const Tensor& z, const Tensor& eps_hat, int t_from, int t_to,
                            const NoiseSchedule& schedule, Rng& rng) {
    if (!(t_from > t_to && t_to >= 0)) {
        throw std::invalid_argument("euler_ancestral_step: need t_from > t_to >= 0, got " + std::to_string(t_from) +
                                    " -> " + std::to_string(t_to));
    }
    if (z.shape() != eps_hat.shape()) throw ShapeError("euler_ancestral_step: eps shape mismatch");
    const double sigma_from = schedule.sigma(t_from);
    const double sigma_to = schedule.sigma(t_to);
    const auto [up, down] = ancestral_sigmas(sigma_from, sigma_to);
    const float in_scale = static_cast<float>(1.0 / std::sqrt(schedule.alpha_bar(t_from)));
    const float out_scale = static_cast<float>(std::sqrt(schedule.alpha_bar(t_to)));
    const float dt = static_cast<float>(down - sigma_from);
    const float up_f = static_cast<float>(up);
    Tensor out(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) {
        float x = z[i] * in_scale + eps_hat[i] * dt;
        if (up > 0.0) x += up_f * rng.normal();
        out[i] = x * out_scale;
    }
    return out;
}

}  // namespace fabric::diffusion
