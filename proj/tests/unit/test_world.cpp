#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "fabric/io/png.hpp"
#include "fabric/world/shapes.hpp"

using namespace fabric;
using namespace fabric::world;

namespace {

float pixel(const Tensor& img, int c, int y, int x) {
    return img[static_cast<std::size_t>((c * kImageSize + y) * kImageSize + x)];
}

}  // namespace

TEST_CASE("large red circle covers at least 30% of the canvas in palette red") {
    ShapeSpec spec{ShapeKind::circle, Color::red, Size::large};
    Tensor img = render(spec, Variant::train, 0);
    const auto red = palette(Color::red);
    int hits = 0;
    for (int y = 0; y < kImageSize; ++y) {
        for (int x = 0; x < kImageSize; ++x) {
            bool close = true;
            for (int c = 0; c < 3; ++c) close &= std::abs(pixel(img, c, y, x) - (2.0f * red[static_cast<std::size_t>(c)] - 1.0f)) <= 0.1f;
            hits += close;
        }
    }
    CHECK(hits >= 0.3 * kImageSize * kImageSize);
}

TEST_CASE("rendering is pure and the variants differ") {
    Rng rng(1);
    for (int i = 0; i < 24; ++i) {
        const Prompt p = class_prompt(i);
        const ShapeSpec s = random_spec(*p.shape, *p.color, *p.size, rng);
        for (auto v : {Variant::train, Variant::target}) CHECK(render(s, v, 77) == render(s, v, 77));
        CHECK_FALSE(render(s, Variant::train, 77) == render(s, Variant::target, 77));
        CHECK(render(s, Variant::train, 1) == render(s, Variant::train, 2));
    }
}

TEST_CASE("shapes stay inside the canvas and values inside [-1, 1]") {
    Rng rng(2);
    for (int i = 0; i < 500; ++i) {
        const Prompt p = class_prompt(i % kNumClasses);
        ShapeSpec s = random_spec(*p.shape, *p.color, *p.size, rng);
        CHECK(std::abs(s.offset_x) <= 3.0f);
        CHECK(std::abs(s.offset_y) <= 3.0f);
        CHECK(fit_to_canvas(s) == s);
        for (auto v : {Variant::train, Variant::target}) {
            Tensor img = render(s, v, static_cast<std::uint64_t>(i));
            bool in_range = true, border_clear = true;
            for (float x : img.data()) in_range &= x >= -1.0f && x <= 1.0f;
            for (int k = 0; k < kImageSize; ++k) {
                for (int c = 0; c < 3; ++c) {
                    for (auto [y, x] : {std::pair{0, k}, std::pair{kImageSize - 1, k}, std::pair{k, 0}, std::pair{k, kImageSize - 1}}) {
                        border_clear &= pixel(img, c, y, x) == 0.0f;
                    }
                }
            }
            CHECK(in_range);
            CHECK(border_clear);
        }
    }
}

TEST_CASE("vocabulary has 24 enumerable prompt classes") {
    for (int i = 0; i < kNumClasses; ++i) {
        const Prompt p = class_prompt(i);
        CHECK(p.complete());
        CHECK(class_index(p) == i);
        CHECK(parse_prompt(to_string(p)) == p);
        CHECK(prompt_from_json(to_json(p)) == p);
        const auto t = tokens(p);
        CHECK(t[0] < kNumShapes);
        CHECK(t[1] >= kNumShapes);
        CHECK(t[2] >= kNumShapes + kNumColors);
        CHECK(t[2] < kNullToken);
    }
    CHECK(tokens(Prompt::null()) == std::array<int, 3>{kNullToken, kNullToken, kNullToken});
    CHECK(parse_prompt("circle,,large") == Prompt{ShapeKind::circle, std::nullopt, Size::large});
    CHECK_THROWS_AS(parse_prompt("circle,red"), std::invalid_argument);
    CHECK_THROWS_AS(parse_prompt("hexagon,red,large"), std::invalid_argument);
    CHECK_THROWS_AS(prompt_from_json({{"shape", "circle"}, {"mood", "happy"}}), std::invalid_argument);
    CHECK_THROWS_AS(prompt_from_json({{"shape", 3}}), std::invalid_argument);
}

TEST_CASE("dataset sampling is uniform over classes and prompts match specs") {
    Rng rng(3);
    const int k = 200;
    auto data = sample_dataset(kNumClasses * k, Variant::train, rng);
    std::array<int, kNumClasses> counts{};
    for (const auto& s : data) {
        CHECK(s.prompt == Prompt::of(s.spec));
        CHECK(s.image == render(s.spec, Variant::train, s.seed));
        ++counts[static_cast<std::size_t>(class_index(s.prompt))];
    }
    const double sd = std::sqrt(k * (1.0 - 1.0 / kNumClasses));
    for (int c : counts) CHECK(std::abs(c - k) < 4.5 * sd);

    auto m = manifest(data, Variant::train);
    REQUIRE(m.size() == data.size());
    CHECK(spec_from_json(m[5]["spec"]) == data[5].spec);
    CHECK(m[5]["seed"].get<std::uint64_t>() == data[5].seed);
}

TEST_CASE("dataset channel statistics match the independent renderer") {
    std::ifstream in(std::string(FABRIC_GOLDEN_DIR) + "/dataset_stats.json");
    REQUIRE(in.good());
    const auto golden = nlohmann::json::parse(in);
    Rng rng(4);
    const int n = golden["images"].get<int>();
    auto data = sample_dataset(n, Variant::train, rng);
    const std::size_t hw = kImageSize * kImageSize;
    for (std::size_t c = 0; c < 3; ++c) {
        double sum = 0.0, sq = 0.0;
        for (const auto& s : data) {
            for (std::size_t p = 0; p < hw; ++p) {
                const double v = s.image[c * hw + p];
                sum += v;
                sq += v * v;
            }
        }
        const double mean = sum / (static_cast<double>(n) * hw);
        const double sd = std::sqrt(sq / (static_cast<double>(n) * hw) - mean * mean);
        CAPTURE(c);
        CHECK(std::abs(mean - golden["mean"][c].get<double>()) < 0.01);
        CHECK(std::abs(sd - golden["std"][c].get<double>()) < 0.01);
    }
}

TEST_CASE("png round trip is lossless on the 8-bit grid") {
    Tensor levels({3, 16, 16});
    for (std::size_t i = 0; i < levels.size(); ++i) levels[i] = static_cast<float>(i % 256) / 127.5f - 1.0f;
    Tensor q = io::quantize(levels);
    CHECK(io::quantize(q) == q);
    CHECK(io::decode_png(io::encode_png(q)) == q);

    Rng rng(5);
    Tensor img = render(random_spec(ShapeKind::triangle, Color::yellow, Size::small, rng), Variant::target, 9);
    img[0] = 3.0f;
    Tensor qi = io::quantize(img);
    CHECK(qi[0] == 1.0f);
    auto path = std::filesystem::temp_directory_path() / "fabric_png_roundtrip.png";
    io::write_png(path, qi);
    CHECK(io::read_png(path) == qi);
    CHECK(io::encode_png(qi) == io::encode_png(qi));
    std::filesystem::remove(path);
    CHECK_THROWS(io::decode_png({1, 2, 3}));
}
