#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "fabric/nn/ops.hpp"
#include "grad_check.hpp"

using namespace fabric;
using namespace fabric::nn;
using fabric::testing::grad_check;
using fabric::testing::projected;
using fabric::testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-2;

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
    Graph g(false);
    Var y = softmax(g, g.constant(Tensor({3}, {0.0f, 0.0f, 0.0f})));
    for (float v : g.value(y).data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-7));
}

TEST_CASE("silu(0) is 0") {
    Graph g(false);
    CHECK(g.value(silu(g, g.constant(Tensor::scalar(0.0f))))[0] == 0.0f);
}

TEST_CASE("group_norm of a constant tensor is zero before the affine shift") {
    Graph g(false);
    Var x = g.constant(Tensor({2, 4, 3, 3}, 5.0f));
    Var y = group_norm(g, x, g.constant(Tensor({4}, 1.0f)), g.constant(Tensor({4}, 0.0f)), 2);
    for (float v : g.value(y).data()) CHECK(std::abs(v) < 1e-6f);
}

TEST_CASE("shape mismatches are rejected with the offending shapes") {
    Graph g(false);
    Var a = g.constant(Tensor({2, 3}));
    Var b = g.constant(Tensor({3, 2}));
    CHECK_THROWS_WITH_AS(add(g, a, b), doctest::Contains("[2, 3]"), ShapeError);
    CHECK_THROWS_AS(linear(g, a, g.constant(Tensor({4, 2})), Var{}), ShapeError);
    CHECK_THROWS_AS(conv2d(g, g.constant(Tensor({1, 2, 4, 4})), g.constant(Tensor({3, 5, 3, 3})), Var{}), ShapeError);
    CHECK_THROWS_AS(group_norm(g, g.constant(Tensor({1, 6, 2})), g.constant(Tensor({6})), g.constant(Tensor({6})), 4),
                    ShapeError);
}

TEST_CASE("backward: linear derivative, disconnected parameter and scalar contract") {
    ParamStore store;
    store.add("w", Tensor::scalar(3.0f));
    store.add("unused", Tensor::scalar(1.0f));
    Graph g(true);
    Var w = g.param(store, "w");
    g.param(store, "unused");
    Var x = g.constant(Tensor::scalar(2.0f));
    Var loss = mul(g, w, x);
    Grad grads = g.backward(loss);
    CHECK(grads.at("w")[0] == 2.0f);
    CHECK(grads.at("unused")[0] == 0.0f);

    Graph g2(true);
    Var v = g2.input(Tensor({2}, {1.0f, 2.0f}), true);
    CHECK_THROWS_AS(g2.backward(scale(g2, v, 2.0f)), ShapeError);
}

TEST_CASE("softmax rows are non-negative and sum to one") {
    std::mt19937_64 rng(5);
    Graph g(false);
    Var y = softmax(g, g.constant(random_tensor({17, 9}, rng, -20.0f, 20.0f)));
    const Tensor& t = g.value(y);
    for (int r = 0; r < 17; ++r) {
        double s = 0.0;
        for (int c = 0; c < 9; ++c) {
            CHECK(t[static_cast<std::size_t>(r) * 9 + c] >= 0.0f);
            s += t[static_cast<std::size_t>(r) * 9 + c];
        }
        CHECK(std::abs(s - 1.0) <= 1e-6);
    }
}

TEST_CASE("ops are deterministic") {
    std::mt19937_64 rng(9);
    Tensor x = random_tensor({2, 3, 8, 8}, rng);
    Tensor w = random_tensor({5, 3, 3, 3}, rng);
    auto run = [&] {
        Graph g(false);
        return g.value(silu(g, conv2d(g, g.constant(x), g.constant(w), Var{})));
    };
    CHECK(run() == run());
}

TEST_CASE("gradient property suite: every op matches central finite differences") {
    std::mt19937_64 rng(1234);
    std::uniform_int_distribution<int> small(1, 4);
    for (int trial = 0; trial < 4; ++trial) {
        CAPTURE(trial);
        const int b = small(rng), c = 2 * small(rng), h = 2 * small(rng), w = 2 * small(rng);
        const int n = small(rng) + 1, f = small(rng) + 1, o = small(rng) + 1;
        const std::uint64_t s = rng();

        {
            INFO("elementwise");
            Shape sh{b, c};
            auto r = grad_check(projected([](Graph& g, auto& in) { return mul(g, add(g, in[0], in[1]), sub(g, in[0], in[1])); }, s),
                                {random_tensor(sh, rng), random_tensor(sh, rng)}, {true, true});
            CHECK(r.worst_relative_error < kGradTol);
            auto r2 = grad_check(projected([](Graph& g, auto& in) { return reshape(g, scale(g, in[0], -1.7f), {static_cast<int>(g.value(in[0]).size())}); }, s),
                                 {random_tensor(sh, rng)}, {true});
            CHECK(r2.worst_relative_error < kGradTol);
        }
        {
            INFO("linear");
            auto r = grad_check(projected([](Graph& g, auto& in) { return linear(g, in[0], in[1], in[2]); }, s),
                                {random_tensor({n, 3, f}, rng), random_tensor({o, f}, rng), random_tensor({o}, rng)},
                                {true, true, true});
            CHECK(r.worst_relative_error < kGradTol);
        }
        {
            INFO("conv2d 3x3 and 1x1");
            for (int k : {1, 3}) {
                auto r = grad_check(projected([](Graph& g, auto& in) { return conv2d(g, in[0], in[1], in[2]); }, s),
                                    {random_tensor({b, c, h, w}, rng), random_tensor({o, c, k, k}, rng), random_tensor({o}, rng)},
                                    {true, true, true});
                CHECK(r.worst_relative_error < kGradTol);
            }
        }
        {
            INFO("group_norm");
            auto r = grad_check(projected([](Graph& g, auto& in) { return group_norm(g, in[0], in[1], in[2], 2); }, s),
                                {random_tensor({b, c, h, w}, rng), random_tensor({c}, rng), random_tensor({c}, rng)},
                                {true, true, true});
            CHECK(r.worst_relative_error < kGradTol);
        }
        {
            INFO("layer_norm");
            auto r = grad_check(projected([](Graph& g, auto& in) { return layer_norm(g, in[0], in[1], in[2]); }, s),
                                {random_tensor({n, c + 1}, rng), random_tensor({c + 1}, rng), random_tensor({c + 1}, rng)},
                                {true, true, true});
            CHECK(r.worst_relative_error < kGradTol);
        }
        {
            INFO("silu and softmax");
            auto r = grad_check(projected([](Graph& g, auto& in) { return softmax(g, silu(g, in[0])); }, s),
                                {random_tensor({n, f + 2}, rng, -3.0f, 3.0f)}, {true});
            CHECK(r.worst_relative_error < kGradTol);
        }
        {
            INFO("attention, plain and key-weighted");
            const int heads = small(rng) % 2 + 1, dk = 2 * small(rng);
            const int lq = small(rng), lk = small(rng) + 1;
            Tensor weights({b, lk});
            std::uniform_real_distribution<float> wd(0.0f, 2.0f);
            for (auto& x : weights.data()) x = wd(rng);
            for (int bi = 0; bi < b; ++bi) weights[static_cast<std::size_t>(bi) * lk] = 1.0f;
            weights[static_cast<std::size_t>(lk) - 1] = 0.0f;
            for (const Tensor* kw : std::vector<const Tensor*>{nullptr, &weights}) {
                auto r = grad_check(projected([heads, kw](Graph& g, auto& in) { return attention(g, in[0], in[1], in[2], heads, kw); }, s),
                                    {random_tensor({b, lq, heads * dk}, rng), random_tensor({b, lk, heads * dk}, rng),
                                     random_tensor({b, lk, heads * dk}, rng)},
                                    {true, true, true});
                CHECK(r.worst_relative_error < kGradTol);
            }
        }
        {
            INFO("embedding, concat, transpose");
            std::vector<int> ids{0, 2, 2, 1};
            auto r = grad_check(projected([ids](Graph& g, auto& in) {
                                    Var e = embedding(g, in[0], ids);
                                    Var t = transpose12(g, reshape(g, e, {2, 2, 3}));
                                    return concat(g, t, in[1], 2);
                                }, s),
                                {random_tensor({3, 3}, rng), random_tensor({2, 3, n}, rng)}, {true, true});
            CHECK(r.worst_relative_error < kGradTol);
        }
        {
            INFO("pooling, upsampling, channel broadcast, spatial mean");
            auto r = grad_check(projected([](Graph& g, auto& in) {
                                    Var p = upsample2(g, avg_pool2(g, in[0]));
                                    Var y = add_channel_vector(g, p, in[1]);
                                    return mean_spatial(g, mul(g, y, y));
                                }, s),
                                {random_tensor({b, c, h, w}, rng), random_tensor({b, c}, rng)}, {true, true});
            CHECK(r.worst_relative_error < kGradTol);
        }
        {
            INFO("losses and normalisation");
            std::vector<int> labels(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i % f;
            auto r = grad_check([labels](Graph& g, auto& in) {
                                    Var ce = cross_entropy(g, in[0], labels);
                                    Var mse = mse_loss(g, l2_normalize(g, in[1]), in[2]);
                                    return add(g, ce, mse);
                                },
                                {random_tensor({n, f}, rng), random_tensor({n, 5}, rng), random_tensor({n, 5}, rng)},
                                {true, true, true});
            CHECK(r.worst_relative_error < kGradTol);
            auto r2 = grad_check([](Graph& g, auto& in) { return sum(g, mul(g, in[0], in[0])); },
                                 {random_tensor({n, 3}, rng)}, {true});
            CHECK(r2.worst_relative_error < kGradTol);
        }
    }
}

TEST_CASE("attention rejects degenerate key weights") {
    Graph g(false);
    Var q = g.constant(Tensor({1, 1, 2}, 1.0f));
    Var k = g.constant(Tensor({1, 2, 2}, 1.0f));
    Tensor zero({1, 2}, 0.0f);
    CHECK_THROWS_AS(attention(g, q, k, k, 1, &zero), std::invalid_argument);
    Tensor negative({1, 2}, std::vector<float>{1.0f, -1.0f});
    CHECK_THROWS_AS(attention(g, q, k, k, 1, &negative), std::invalid_argument);
}
