#include <doctest.h>

#include <cmath>

#include "fabric/io/png.hpp"
#include "fabric/loop/feedback.hpp"

using namespace fabric;
using namespace fabric::loop;
using world::Prompt;

namespace {

struct Fixture {
    nn::ParamStore params;
    denoiser::UNet net;
    Generator gen;

    static nn::ParamStore init() {
        nn::ParamStore p;
        Rng rng(17);
        denoiser::UNet::init_params({}, p, rng);
        return p;
    }
    Fixture() : params(init()), net({}, params), gen(net) {}
};

const Fixture& fixture() {
    static const Fixture f;
    return f;
}

GenerationConfig quick_config() {
    GenerationConfig c;
    c.sampling_steps = 8;
    c.seed = 5;
    return c;
}

Prompt red_circle() { return world::parse_prompt("circle,red,large"); }

FeedbackState some_feedback() {
    Rng rng(2);
    FeedbackState s;
    const auto spec = world::random_spec(world::ShapeKind::square, world::Color::blue, world::Size::large, rng);
    s.liked.push_back({"ref_a", world::render(spec, world::Variant::train, 1)});
    const auto spec2 = world::random_spec(world::ShapeKind::triangle, world::Color::green, world::Size::small, rng);
    s.disliked.push_back({"ref_b", world::render(spec2, world::Variant::train, 2)});
    return s;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<double>(std::abs(a[i] - b[i])));
    return m;
}

}  // namespace

TEST_CASE("schedule weight examples") {
    FeedbackSchedule s;
    s.kind = ScheduleKind::first_half;
    s.w_max = 0.8f;
    CHECK(schedule_weight(s, 10, 50).pos == 0.8f);
    CHECK(schedule_weight(s, 30, 50).pos == 0.0f);
    CHECK(schedule_weight(s, 24, 50).pos == 0.8f);
    CHECK(schedule_weight(s, 25, 50).pos == 0.0f);

    FeedbackSchedule lin;
    lin.kind = ScheduleKind::linear_interp;
    lin.w_start = 1.0f;
    lin.w_end = 0.0f;
    CHECK(schedule_weight(lin, 25, 50).pos == doctest::Approx(0.5).epsilon(0.03));
    CHECK(schedule_weight(lin, 0, 50).pos == 1.0f);
    CHECK(schedule_weight(lin, 49, 50).pos == 0.0f);

    CHECK_THROWS_AS(schedule_weight(s, 50, 50), std::out_of_range);
    CHECK_THROWS_AS(schedule_weight(s, -1, 50), std::out_of_range);
}

TEST_CASE("schedule weights are symmetric, non-negative and partition the steps") {
    for (int total : {1, 7, 50}) {
        for (int i = 0; i < total; ++i) {
            FeedbackSchedule s;
            s.w_max = 0.6f;
            s.kind = ScheduleKind::constant;
            CHECK(schedule_weight(s, i, total).pos == 0.6f);
            s.kind = ScheduleKind::first_half;
            const auto first = schedule_weight(s, i, total);
            s.kind = ScheduleKind::second_half;
            const auto second = schedule_weight(s, i, total);
            CHECK(first.pos == first.neg);
            CHECK(first.pos + second.pos == 0.6f);
            CHECK(first.pos * second.pos == 0.0f);
            s.kind = ScheduleKind::linear_interp;
            s.w_start = 0.2f;
            s.w_end = 0.9f;
            CHECK(schedule_weight(s, i, total).pos >= 0.0f);
        }
    }
    CHECK(parse_schedule("full") == ScheduleKind::constant);
    CHECK_THROWS_AS(parse_schedule("sometimes"), std::invalid_argument);
}

TEST_CASE("prompt dropout") {
    Rng rng(3);
    const Prompt p = red_circle();
    for (int i = 0; i < 100; ++i) {
        CHECK(prompt_dropout(p, 0.0, rng) == p);
        CHECK(prompt_dropout(p, 1.0, rng) == Prompt::null());
        CHECK(prompt_dropout(Prompt::null(), 0.5, rng) == Prompt::null());
    }
    int dropped = 0;
    const int trials = 10000;
    for (int i = 0; i < trials; ++i) {
        const Prompt d = prompt_dropout(p, 0.3, rng);
        dropped += !d.shape + !d.color + !d.size;
    }
    CHECK(std::abs(dropped / (3.0 * trials) - 0.3) < 0.02);
    CHECK_THROWS_AS(prompt_dropout(p, 1.5, rng), std::invalid_argument);
}

TEST_CASE("generation config json overrides") {
    const auto c = GenerationConfig::from_json({{"w", 0.1}, {"schedule", "constant"}, {"n", 2}});
    CHECK(c.schedule.w_max == 0.1f);
    CHECK(c.schedule.kind == ScheduleKind::constant);
    CHECK(c.n == 2);
    CHECK(c.dropout_p == 0.0);
    const GenerationConfig defaults;
    CHECK(defaults.n == 4);
    CHECK(defaults.schedule.w_max == 0.8f);
    CHECK(defaults.schedule.kind == ScheduleKind::first_half);
    CHECK(GenerationConfig::from_json(defaults.to_json()).to_json() == defaults.to_json());
    CHECK_THROWS_AS(GenerationConfig::from_json({{"temperature", 1}}), std::invalid_argument);
    CHECK_THROWS_AS(GenerationConfig::from_json({{"n", "four"}}), std::invalid_argument);
    CHECK_THROWS_AS(GenerationConfig::from_json({{"n", 0}}), std::invalid_argument);
    CHECK_THROWS_AS(GenerationConfig::from_json({{"w", -1}}), std::invalid_argument);
}

TEST_CASE("empty feedback reproduces plain guided sampling bitwise") {
    const auto& f = fixture();
    const auto cfg = quick_config();
    const std::uint64_t seed = 99;
    const auto batch = f.gen.generate(red_circle(), {}, cfg, seed);
    REQUIRE(batch.images.shape() == Shape{4, 3, 16, 16});

    const auto& sched = f.gen.schedule();
    const auto sampler = diffusion::SamplerConfig::strided(sched, cfg.sampling_steps, cfg.guidance_scale, seed);
    Rng noise(derive_seed(seed, {kLatentStream}));
    Tensor z = gaussian_tensor({4, 3, 16, 16}, noise);
    std::vector<Prompt> cond(4, red_circle()), uncond(4, Prompt::null());
    for (int i = 0; i < sampler.steps(); ++i) {
        const int t = sampler.timesteps[static_cast<std::size_t>(i)];
        const std::vector<int> ts(4, t);
        const Tensor ec = f.net.predict(z, ts, cond);
        const Tensor eu = f.net.predict(z, ts, uncond);
        z = diffusion::euler_ancestral_step(z, diffusion::cfg_combine(ec, eu, cfg.guidance_scale), t,
                                            sampler.next_timestep(i), sched, noise);
    }
    CHECK(batch.images == io::quantize(z));
}

TEST_CASE("feedback switches") {
    const auto& f = fixture();
    auto cfg = quick_config();
    const auto fb = some_feedback();
    const auto plain = f.gen.generate(red_circle(), {}, cfg, 3).images;

    SUBCASE("zero strength matches the plain batch") {
        cfg.schedule.w_max = 0.0f;
        CHECK(max_abs_diff(f.gen.generate(red_circle(), fb, cfg, 3).images, plain) <= 1e-5);
    }
    SUBCASE("baseline arms ignore the feedback") {
        cfg.use_feedback = false;
        CHECK(f.gen.generate(red_circle(), fb, cfg, 3).images == plain);
    }
    SUBCASE("positive-only arms ignore dislikes") {
        cfg.use_negative = false;
        FeedbackState only_neg;
        only_neg.disliked = fb.disliked;
        CHECK(f.gen.generate(red_circle(), only_neg, cfg, 3).images == plain);
        CHECK_FALSE(f.gen.generate(red_circle(), fb, cfg, 3).images == plain);
    }
    SUBCASE("active feedback changes the batch deterministically") {
        const auto a = f.gen.generate(red_circle(), fb, cfg, 3).images;
        CHECK_FALSE(a == plain);
        CHECK(f.gen.generate(red_circle(), fb, cfg, 3).images == a);
    }
    SUBCASE("malformed feedback images are rejected") {
        FeedbackState bad;
        bad.liked.push_back({"x", Tensor({3, 8, 8})});
        CHECK_THROWS_AS(f.gen.generate(red_circle(), bad, cfg, 3), ShapeError);
    }
}

TEST_CASE("batch size request is honoured") {
    const auto& f = fixture();
    auto cfg = quick_config();
    for (int n : {1, 4, 6}) {
        cfg.n = n;
        const auto b = f.gen.generate(red_circle(), some_feedback(), cfg, 1);
        CHECK(b.images.dim(0) == n);
        CHECK(b.prompts.size() == static_cast<std::size_t>(n));
    }
}

TEST_CASE("feedback rounds accumulate and replay") {
    const auto& f = fixture();
    auto cfg = quick_config();
    cfg.rounds = 3;
    const FeedbackSource one_each = [](const GeneratedBatch& b, int round) {
        CHECK(b.images.dim(0) == 4);
        return FeedbackChoice{{round % 4}, {(round + 1) % 4}};
    };
    const auto h = run_feedback_rounds(f.gen, red_circle(), one_each, cfg);
    REQUIRE(h.size() == 3);
    for (int r = 0; r < 3; ++r) {
        CHECK(h[static_cast<std::size_t>(r)].round_index == r + 1);
        CHECK(h[static_cast<std::size_t>(r)].feedback_liked == r);
        CHECK(h[static_cast<std::size_t>(r)].feedback_disliked == r);
        CHECK(h[static_cast<std::size_t>(r)].liked_ids.size() == 1);
        CHECK(h[static_cast<std::size_t>(r)].disliked_ids.size() == 1);
    }
    CHECK(h[0].liked_ids[0] == image_id(1, 1));

    const auto again = run_feedback_rounds(f.gen, red_circle(), one_each, cfg);
    for (std::size_t r = 0; r < 3; ++r) {
        CHECK(again[r].images == h[r].images);
        CHECK(again[r].liked_ids == h[r].liked_ids);
    }

    const auto first = f.gen.generate(red_circle(), {}, cfg, round_seed(cfg.seed, 1));
    CHECK(h[0].images == first.images);

    cfg.rounds = 1;
    const auto single = run_feedback_rounds(f.gen, red_circle(), one_each, cfg);
    REQUIRE(single.size() == 1);
    CHECK(single[0].images == first.images);
    CHECK(single[0].liked_ids.size() == 1);
}

TEST_CASE("empty selections reduce every round to plain sampling") {
    const auto& f = fixture();
    auto cfg = quick_config();
    cfg.rounds = 2;
    const auto h = run_feedback_rounds(f.gen, red_circle(), [](const GeneratedBatch&, int) { return FeedbackChoice{}; }, cfg);
    for (int r = 1; r <= 2; ++r) {
        CHECK(h[static_cast<std::size_t>(r - 1)].images == f.gen.generate(red_circle(), {}, cfg, round_seed(cfg.seed, r)).images);
    }
}

TEST_CASE("feedback sources must select distinct images from the batch") {
    const auto& f = fixture();
    auto cfg = quick_config();
    cfg.rounds = 1;
    const auto run = [&](FeedbackChoice c) {
        return run_feedback_rounds(f.gen, red_circle(), [c](const GeneratedBatch&, int) { return c; }, cfg);
    };
    CHECK_THROWS_AS(run({{4}, {}}), std::invalid_argument);
    CHECK_THROWS_AS(run({{-1}, {}}), std::invalid_argument);
    CHECK_THROWS_AS(run({{1}, {1}}), std::invalid_argument);
    CHECK_THROWS_AS(run({{2, 2}, {}}), std::invalid_argument);
}
