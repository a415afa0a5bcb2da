#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "fabric/denoiser/unet.hpp"
#include "fabric/denoiser/weighted_attention.hpp"
#include "fabric/nn/ops.hpp"
#include "grad_check.hpp"

using namespace fabric;
using namespace fabric::denoiser;
using fabric::testing::random_tensor;
using world::Prompt;

namespace {

float max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    float m = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

struct Net {
    nn::ParamStore store;
    DenoiserConfig cfg;
    std::unique_ptr<UNet> unet;

    explicit Net(std::uint64_t seed) {
        Rng rng(seed);
        UNet::init_params(cfg, store, rng);
        unet = std::make_unique<UNet>(cfg, store);
    }
};

Tensor random_latents(int n, std::mt19937_64& rng) { return random_tensor({n, 3, 16, 16}, rng, -1.5f, 1.5f); }

std::vector<Prompt> some_prompts(int n) {
    std::vector<Prompt> p;
    for (int i = 0; i < n; ++i) p.push_back(i % 3 == 2 ? Prompt::null() : world::class_prompt((i * 7) % world::kNumClasses));
    return p;
}

}  // namespace

TEST_CASE("weighted attention worked example") {
    Tensor q({1, 1}, std::vector<float>{0.0f});
    Tensor k({2, 1}, std::vector<float>{1.0f, -2.0f});
    Tensor v({2, 1}, std::vector<float>{0.0f, 4.0f});
    const std::vector<float> w{1.0f, 3.0f};
    Tensor p = weighted_attention_probs(q, k, w);
    CHECK(p[0] == doctest::Approx(0.25));
    CHECK(p[1] == doctest::Approx(0.75));
    CHECK(weighted_attention(q, k, v, w)[0] == doctest::Approx(3.0));
    CHECK(log_weight_attention(q, k, v, w)[0] == doctest::Approx(3.0).epsilon(1e-6));
}

TEST_CASE("zero-weight keys are dropped and degenerate weights rejected") {
    std::mt19937_64 rng(1);
    Tensor q = random_tensor({3, 4}, rng), k = random_tensor({2, 4}, rng), v = random_tensor({2, 4}, rng);
    Tensor v2 = v;
    for (int c = 0; c < 4; ++c) v2[static_cast<std::size_t>(4 + c)] = 100.0f;
    const std::vector<float> w{1.0f, 0.0f};
    CHECK(weighted_attention(q, k, v, w) == weighted_attention(q, k, v2, w));
    CHECK(log_weight_attention(q, k, v, w) == log_weight_attention(q, k, v2, w));
    for (int i = 0; i < 3; ++i) {
        for (int c = 0; c < 4; ++c) CHECK(weighted_attention(q, k, v, w)[static_cast<std::size_t>(i * 4 + c)] == doctest::Approx(v[static_cast<std::size_t>(c)]));
    }
    const std::vector<float> zeros{0.0f, 0.0f}, neg{1.0f, -0.5f};
    CHECK_THROWS_AS(weighted_attention(q, k, v, zeros), std::invalid_argument);
    CHECK_THROWS_AS(log_weight_attention(q, k, v, zeros), std::invalid_argument);
    CHECK_THROWS_AS(weighted_attention(q, k, v, neg), std::invalid_argument);
}

TEST_CASE("weighting identities over random inputs") {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> len(1, 12);
    std::uniform_real_distribution<float> wd(0.05f, 3.0f);
    for (int trial = 0; trial < 100; ++trial) {
        const int lq = len(rng), lk = len(rng), d = 16;
        Tensor q = random_tensor({lq, d}, rng, -2.0f, 2.0f), k = random_tensor({lk, d}, rng, -2.0f, 2.0f),
               v = random_tensor({lk, d}, rng);
        const std::vector<float> ones(static_cast<std::size_t>(lk), 1.0f);
        CHECK(max_abs_diff(weighted_attention(q, k, v, ones), standard_attention(q, k, v)) <= 1e-6f);
        CHECK(max_abs_diff(log_weight_attention(q, k, v, ones), standard_attention(q, k, v)) <= 1e-5f);

        std::vector<float> w(static_cast<std::size_t>(lk));
        for (auto& x : w) x = wd(rng);
        CHECK(max_abs_diff(log_weight_attention(q, k, v, w), weighted_attention(q, k, v, w)) <= 1e-5f);
        Tensor p = weighted_attention_probs(q, k, w);
        for (int i = 0; i < lq; ++i) {
            double s = 0.0;
            for (int j = 0; j < lk; ++j) {
                CHECK(p[static_cast<std::size_t>(i * lk + j)] >= 0.0f);
                s += p[static_cast<std::size_t>(i * lk + j)];
            }
            CHECK(std::abs(s - 1.0) <= 1e-6);
        }

        // Duplicated keys and values with unit weights renormalise away.
        Tensor kk({2 * lk, d}), vv({2 * lk, d});
        std::copy(k.ptr(), k.ptr() + k.size(), kk.ptr());
        std::copy(k.ptr(), k.ptr() + k.size(), kk.ptr() + k.size());
        std::copy(v.ptr(), v.ptr() + v.size(), vv.ptr());
        std::copy(v.ptr(), v.ptr() + v.size(), vv.ptr() + v.size());
        const std::vector<float> ones2(static_cast<std::size_t>(2 * lk), 1.0f);
        CHECK(max_abs_diff(log_weight_attention(q, kk, vv, ones2), standard_attention(q, k, v)) <= 1e-5f);
    }
}

TEST_CASE("hidden-state caches: structure and determinism") {
    Net net(3);
    std::mt19937_64 rng(4);
    Tensor z = random_latents(2, rng);
    auto prompts = some_prompts(2);
    auto a = net.unet->precompute_hidden_states(z, 50, prompts);
    auto b = net.unet->precompute_hidden_states(z, 50, prompts);
    REQUIRE(a.size() == 2);
    for (std::size_t r = 0; r < 2; ++r) {
        CHECK(a[r].layers.size() == static_cast<std::size_t>(net.unet->self_attention_layers()));
        CHECK(a[r].layers[0].shape() == Shape{16, 64});
        CHECK(a[r].layers[0] == b[r].layers[0]);
        CHECK(a[r].timestep == 50);
    }
    // Batched precompute equals one-at-a-time precompute.
    Tensor one({1, 3, 16, 16});
    std::copy(z.ptr() + 768, z.ptr() + 1536, one.ptr());
    auto single = net.unet->precompute_hidden_states(one, 50, std::span(prompts).subspan(1, 1));
    CHECK(single[0].layers[0] == a[1].layers[0]);
    CHECK_THROWS_AS(net.unet->precompute_hidden_states(z, 0, prompts), std::out_of_range);
    CHECK_THROWS_AS(net.unet->precompute_hidden_states(z, 201, prompts), std::out_of_range);
}

TEST_CASE("modified network equivalences at full scale") {
    Net net(5);
    std::mt19937_64 rng(6);
    const int n = 3, t = 120;
    Tensor z = random_latents(n, rng);
    auto prompts = some_prompts(n);
    std::vector<int> ts(n, t);
    const Tensor plain = net.unet->predict(z, ts, prompts);

    SUBCASE("no references is bitwise the plain network") {
        CHECK(net.unet->modified_unet(z, ts, prompts, std::vector<Injection>(n)) == plain);
    }

    Tensor refs_z = random_latents(2, rng);
    const std::vector<Prompt> null_prompts(2, Prompt::null());
    auto caches = net.unet->precompute_hidden_states(refs_z, t, null_prompts);

    SUBCASE("zero reference weight matches the plain network") {
        std::vector<Injection> inj(n);
        for (auto& e : inj) e = {{&caches[0], &caches[1]}, 0.0f};
        CHECK(max_abs_diff(net.unet->modified_unet(z, ts, prompts, inj), plain) <= 1e-5f);
    }

    SUBCASE("a reference identical to the latent with unit weight changes nothing") {
        auto self = net.unet->precompute_hidden_states(z, t, prompts);
        std::vector<Injection> inj(n);
        for (int i = 0; i < n; ++i) inj[static_cast<std::size_t>(i)] = {{&self[static_cast<std::size_t>(i)]}, 1.0f};
        CHECK(max_abs_diff(net.unet->modified_unet(z, ts, prompts, inj), plain) <= 1e-5f);
    }

    SUBCASE("a reference injected twice at weight w equals one copy at 2w") {
        std::vector<Injection> twice(n), once(n);
        for (auto& e : twice) e = {{&caches[1], &caches[1]}, 0.4f};
        for (auto& e : once) e = {{&caches[1]}, 0.8f};
        CHECK(max_abs_diff(net.unet->modified_unet(z, ts, prompts, twice), net.unet->modified_unet(z, ts, prompts, once)) <=
              1e-5f);
    }

    SUBCASE("reference order does not matter") {
        std::vector<Injection> ab(n), ba(n);
        for (auto& e : ab) e = {{&caches[0], &caches[1]}, 0.8f};
        for (auto& e : ba) e = {{&caches[1], &caches[0]}, 0.8f};
        CHECK(max_abs_diff(net.unet->modified_unet(z, ts, prompts, ab), net.unet->modified_unet(z, ts, prompts, ba)) <= 1e-5f);
    }

    SUBCASE("items without references are unaffected by other items' references") {
        std::vector<Injection> inj(n);
        inj[1] = {{&caches[0], &caches[1]}, 0.8f};
        Tensor out = net.unet->modified_unet(z, ts, prompts, inj);
        const std::size_t per = 3 * 16 * 16;
        for (std::size_t i = 0; i < per; ++i) {
            CHECK(out[i] == plain[i]);
            CHECK(out[2 * per + i] == plain[2 * per + i]);
        }
        CHECK(max_abs_diff(out, plain) > 1e-4f);
    }

    SUBCASE("cache mismatches are rejected") {
        std::vector<Injection> inj(n);
        auto wrong_t = net.unet->precompute_hidden_states(refs_z, t - 4, null_prompts);
        inj[0] = {{&wrong_t[0]}, 0.5f};
        CHECK_THROWS_AS(net.unet->modified_unet(z, ts, prompts, inj), std::invalid_argument);
        HiddenStateCache bad = caches[0];
        bad.layers[0] = Tensor({8, 64});
        inj[0] = {{&bad}, 0.5f};
        CHECK_THROWS_AS(net.unet->modified_unet(z, ts, prompts, inj), ShapeError);
        bad.layers.push_back(caches[0].layers[0]);
        CHECK_THROWS_AS(net.unet->modified_unet(z, ts, prompts, inj), ShapeError);
    }
}

TEST_CASE("batch composition does not change per-item predictions") {
    Net net(7);
    std::mt19937_64 rng(8);
    Tensor z = random_latents(4, rng);
    auto prompts = some_prompts(4);
    std::vector<int> ts{10, 200, 55, 1};
    Tensor all = net.unet->predict(z, ts, prompts);
    Tensor one({1, 3, 16, 16});
    std::copy(z.ptr() + 2 * 768, z.ptr() + 3 * 768, one.ptr());
    std::vector<int> t1{55};
    Tensor single = net.unet->predict(one, t1, std::span(prompts).subspan(2, 1));
    for (std::size_t i = 0; i < 768; ++i) CHECK(single[i] == all[2 * 768 + i]);
}

TEST_CASE("every denoiser parameter gradient matches finite differences") {
    Net net(9);
    // Near-uniform attention at initialisation leaves the logit paths with
    // gradients close to float round-off; sharpen them so they are measurable.
    for (const char* name : {"mid.self.q.w", "mid.self.k.w", "mid.cross.q.w", "mid.cross.k.w"}) {
        for (float& v : net.store.at(name).data()) v *= 5.0f;
    }
    std::mt19937_64 rng(10);
    const int n = 4;
    Tensor z = random_latents(n, rng);
    Tensor target = random_tensor({n, 3, 16, 16}, rng);
    auto prompts = some_prompts(n);
    std::vector<int> ts{30, 170, 1, 200};

    // Mean squared error accumulated in double so the oracle is not limited by
    // the float resolution of a single scalar.
    auto loss_value = [&] {
        nn::Graph g(false);
        const Tensor& out = g.value(net.unet->forward(g, g.constant(z), ts, prompts));
        double acc = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) acc += (static_cast<double>(out[i]) - target[i]) * (static_cast<double>(out[i]) - target[i]);
        return acc / static_cast<double>(out.size());
    };
    nn::Grad grads;
    {
        nn::Graph g(true);
        grads = g.backward(nn::mse_loss(g, net.unet->forward(g, g.constant(z), ts, prompts), g.constant(target)));
    }
    REQUIRE(grads.size() == net.store.params().size());
    const float step = 1e-3f;
    double worst = 0.0;
    for (auto& [name, param] : net.store.params()) {
        const Tensor& ga = grads.at(name);
        // Largest-magnitude entries plus two random ones.
        std::vector<std::size_t> idx(param.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::partial_sort(idx.begin(), idx.begin() + std::min<std::size_t>(3, idx.size()), idx.end(),
                          [&](std::size_t a, std::size_t b) { return std::abs(ga[a]) > std::abs(ga[b]); });
        idx.resize(std::min<std::size_t>(3, idx.size()));
        std::uniform_int_distribution<std::size_t> pick(0, param.size() - 1);
        idx.push_back(pick(rng));
        idx.push_back(pick(rng));
        double diff = 0.0, na = 0.0, nn_ = 0.0;
        for (std::size_t i : idx) {
            const float orig = param[i];
            param[i] = orig + step;
            const double up = loss_value();
            param[i] = orig - step;
            const double down = loss_value();
            param[i] = orig;
            const double numeric = (up - down) / (2.0 * step);
            diff += (numeric - ga[i]) * (numeric - ga[i]);
            na += static_cast<double>(ga[i]) * ga[i];
            nn_ += numeric * numeric;
        }
        const double rel = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn_), 1e-4});
        CAPTURE(name);
        CHECK(rel < 1e-2);
        worst = std::max(worst, rel);
    }
    MESSAGE("worst relative error " << worst);
}
