#include <doctest.h>

#include <cmath>
#include <fstream>
#include <tuple>
#include <json.hpp>

#include "fabric/diffusion/schedule.hpp"

using namespace fabric;
using namespace fabric::diffusion;

TEST_CASE("single-step schedule") {
    auto s = build_schedule(1, 0.01, 0.01);
    CHECK(s.alpha_bar(1) == doctest::Approx(0.99).epsilon(1e-12));
    CHECK(s.alpha_bar(0) == 1.0);
    CHECK(s.sigma(0) == 0.0);
}

TEST_CASE("default schedule matches the cumulative-product golden file") {
    std::ifstream in(std::string(FABRIC_GOLDEN_DIR) + "/schedule.json");
    REQUIRE(in.good());
    const auto golden = nlohmann::json::parse(in);
    auto s = build_schedule(golden["train_steps"].get<int>(), golden["beta_start"].get<double>(),
                            golden["beta_end"].get<double>());
    for (const auto& [key, value] : golden["alpha_bar"].items()) {
        CAPTURE(key);
        CHECK(std::abs(s.alpha_bar(std::stoi(key)) - value.get<double>()) < 1e-12);
    }
}

TEST_CASE("schedule invariants") {
    for (auto [t, lo, hi] : {std::tuple{200, 1e-4, 0.02}, std::tuple{7, 0.3, 0.9}, std::tuple{1000, 1e-5, 1e-5}}) {
        auto s = build_schedule(t, lo, hi);
        double prod = 1.0;
        for (int i = 1; i <= t; ++i) {
            CHECK(s.beta(i) > 0.0);
            CHECK(s.beta(i) < 1.0);
            prod *= 1.0 - s.beta(i);
            CHECK(std::abs(prod - s.alpha_bar(i)) < 1e-6);
            CHECK(s.alpha_bar(i) < s.alpha_bar(i - 1));
        }
    }
    CHECK_THROWS_AS(build_schedule(10, 0.0, 0.1), std::invalid_argument);
    CHECK_THROWS_AS(build_schedule(10, 0.2, 0.1), std::invalid_argument);
    CHECK_THROWS_AS(build_schedule(10, 0.1, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(build_schedule(0, 0.1, 0.2), std::invalid_argument);
    CHECK_THROWS_AS(default_schedule().alpha_bar(201), std::out_of_range);
}

TEST_CASE("strided sampler timesteps") {
    auto s = default_schedule();
    auto cfg = SamplerConfig::strided(s, 50, 3.0f, 1);
    REQUIRE(cfg.steps() == 50);
    CHECK(cfg.timesteps.front() == 200);
    CHECK(cfg.timesteps[1] == 196);
    CHECK(cfg.timesteps.back() == 4);
    CHECK(cfg.next_timestep(49) == 0);
    CHECK_NOTHROW(cfg.validate(s));
    auto odd = SamplerConfig::strided(s, 7, 3.0f, 1);
    CHECK_NOTHROW(odd.validate(s));
    CHECK(odd.timesteps.back() >= 1);

    SamplerConfig bad;
    CHECK_THROWS_AS(bad.validate(s), std::invalid_argument);
    bad.timesteps = {10, 10};
    CHECK_THROWS_AS(bad.validate(s), std::invalid_argument);
    bad.timesteps = {201};
    CHECK_THROWS_AS(bad.validate(s), std::invalid_argument);
}

TEST_CASE("forward noising examples") {
    NoiseSchedule quarter({0.75});
    Tensor z = forward_noise_with(Tensor::scalar(2.0f), Tensor::scalar(1.0f), 1, quarter);
    CHECK(z[0] == doctest::Approx(0.5 * 2.0 + std::sqrt(0.75)).epsilon(1e-6));

    NoiseSchedule identity({1e-300});
    REQUIRE(identity.alpha_bar(1) == 1.0);
    Rng rng(3);
    Tensor x({3, 2, 2}, std::vector<float>{1, -2, 3, 0.5f, 0.25f, -1, 0, 9, 8, 7, 6, 5});
    CHECK(forward_noise(x, 1, identity, rng) == x);

    CHECK_THROWS_AS(forward_noise(x, 0, quarter, rng), std::out_of_range);
    CHECK_THROWS_AS(forward_noise(x, 2, quarter, rng), std::out_of_range);
}

TEST_CASE("forward noising marginal statistics") {
    auto s = default_schedule();
    const int t = 120;
    const int draws = 100000;
    const float x0 = 0.7f;
    Rng rng(42);
    Tensor x({draws}, x0);
    Tensor z = forward_noise(x, t, s, rng);
    double mean = 0.0, sq = 0.0;
    for (float v : z.data()) mean += v;
    mean /= draws;
    for (float v : z.data()) sq += (v - mean) * (v - mean);
    const double var = sq / (draws - 1);
    const double ab = s.alpha_bar(t);
    CHECK(std::abs(mean - std::sqrt(ab) * x0) < 3.0 * std::sqrt((1.0 - ab) / draws));
    CHECK(std::abs(var / (1.0 - ab) - 1.0) < 0.02);
}

TEST_CASE("classifier-free guidance combination") {
    Tensor c({2}, std::vector<float>{2.0f, -1.5f});
    Tensor u({2}, std::vector<float>{1.0f, 0.25f});
    CHECK(cfg_combine(c, u, 1.0f) == c);
    CHECK(cfg_combine(c, u, 0.0f) == u);
    CHECK(cfg_combine(Tensor::scalar(2.0f), Tensor::scalar(1.0f), 3.0f)[0] == 4.0f);
    CHECK_THROWS_AS(cfg_combine(c, Tensor({3}), 1.0f), ShapeError);
}

TEST_CASE("ancestral sigmas") {
    auto zero = ancestral_sigmas(2.0, 0.0);
    CHECK(zero.up == 0.0);
    CHECK(zero.down == 0.0);
    auto a = ancestral_sigmas(2.0, 1.0);
    CHECK(a.up * a.up == doctest::Approx(1.0 * (4.0 - 1.0) / 4.0));
    CHECK(a.up * a.up + a.down * a.down == doctest::Approx(1.0));
}

TEST_CASE("final Euler-ancestral step draws no noise") {
    auto s = default_schedule();
    Rng used(5), fresh(5);
    Tensor z({4}, 0.3f), eps({4}, -0.2f);
    euler_ancestral_step(z, eps, 4, 0, s, used);
    CHECK(used.normal() == fresh.normal());
}

TEST_CASE("one-step inversion with the true noise recovers the clean image") {
    for (auto s : {build_schedule(1, 0.01, 0.01), default_schedule()}) {
        Rng rng(11);
        Tensor x({3, 4, 4});
        for (auto& v : x.data()) v = rng.uniform(-1.0f, 1.0f);
        for (int t : {1, s.train_steps() / 2, s.train_steps()}) {
            if (t < 1) continue;
            Tensor eps = gaussian_tensor(x.shape(), rng);
            Tensor z = forward_noise_with(x, eps, t, s);
            Tensor back = euler_ancestral_step(z, eps, t, 0, s, rng);
            for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(back[i] - x[i]) < 1e-4f);
        }
    }
}

TEST_CASE("Euler-ancestral step is deterministic and validates its arguments") {
    auto s = default_schedule();
    Tensor z({8}, 0.1f), eps({8}, 0.4f);
    Rng a(9), b(9);
    CHECK(euler_ancestral_step(z, eps, 100, 96, s, a) == euler_ancestral_step(z, eps, 100, 96, s, b));
    CHECK_THROWS_AS(euler_ancestral_step(z, eps, 96, 96, s, a), std::invalid_argument);
    CHECK_THROWS_AS(euler_ancestral_step(z, eps, 90, 96, s, a), std::invalid_argument);
    CHECK_THROWS_AS(euler_ancestral_step(z, Tensor({7}), 100, 96, s, a), ShapeError);
}

TEST_CASE("derived seeds separate streams") {
    CHECK(derive_seed(1, {2}) != derive_seed(1, {3}));
    CHECK(derive_seed(1, {2, 3}) != derive_seed(1, {3, 2}));
    CHECK(derive_seed(1, {2}) == derive_seed(1, {2}));
    CHECK(derive_seed(1, {}) != derive_seed(2, {}));
}

TEST_CASE("sampling with the exact noise of a fixed image converges to that image") {
    const auto s = default_schedule();
    const auto sampler = SamplerConfig::strided(s, 50, 3.0f, 0);
    Rng rng(8);
    Tensor x0({3, 16, 16});
    for (std::size_t i = 0; i < x0.size(); ++i) x0[i] = std::sin(0.37f * static_cast<float>(i));
    Tensor z = gaussian_tensor(x0.shape(), rng);
    for (int i = 0; i < sampler.steps(); ++i) {
        const int t = sampler.timesteps[static_cast<std::size_t>(i)];
        const double ab = s.alpha_bar(t);
        Tensor eps(z.shape());
        for (std::size_t k = 0; k < z.size(); ++k) {
            eps[k] = static_cast<float>((z[k] - std::sqrt(ab) * x0[k]) / std::sqrt(1.0 - ab));
        }
        z = euler_ancestral_step(z, eps, t, sampler.next_timestep(i), s, rng);
    }
    double worst = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) worst = std::max(worst, static_cast<double>(std::abs(z[k] - x0[k])));
    CHECK(worst < 1e-5);
}
