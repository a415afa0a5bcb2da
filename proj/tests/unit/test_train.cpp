#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>

#include "fabric/train/checkpoint.hpp"
#include "fabric/train/trainer.hpp"

using namespace fabric;
using namespace fabric::train;

namespace {

denoiser::DenoiserConfig tiny_denoiser() {
    denoiser::DenoiserConfig c;
    c.width_hi = 8;
    c.width_lo = 16;
    c.heads = 2;
    c.head_dim = 8;
    c.time_dim = 8;
    c.groups = 4;
    return c;
}

nn::ParamStore sample_store() {
    nn::ParamStore s;
    Rng rng(1);
    s.add("a.w", gaussian_tensor({3, 4}, rng));
    s.add("b", gaussian_tensor({5}, rng));
    s.add("c.k", gaussian_tensor({2, 1, 3, 3}, rng));
    return s;
}

/// Rewrites the JSON header of a serialised checkpoint.
std::string with_header(const std::string& bytes, const std::function<void(nlohmann::json&)>& edit) {
    std::uint64_t len = 0;
    std::memcpy(&len, bytes.data() + 8, 8);
    auto header = nlohmann::json::parse(bytes.substr(16, len));
    edit(header);
    const std::string text = header.dump();
    const std::uint64_t new_len = text.size();
    std::string out = bytes.substr(0, 8);
    out.append(reinterpret_cast<const char*>(&new_len), 8);
    return out + text + bytes.substr(16 + len);
}

template <class F>
std::string error_of(F&& f) {
    try {
        f();
    } catch (const CheckpointError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST_CASE("checkpoint round trip is bitwise") {
    const auto store = sample_store();
    const nlohmann::json config{{"answer", 42}};
    const auto path = std::filesystem::temp_directory_path() / "fabric_ckpt_roundtrip.bin";
    save_checkpoint(path, "test", config, store);
    const Checkpoint ck = load_checkpoint(path);
    std::filesystem::remove(path);
    CHECK(ck.kind == "test");
    CHECK(ck.config == config);
    REQUIRE(ck.params.params().size() == store.params().size());
    for (const auto& [name, t] : store.params()) {
        CAPTURE(name);
        CHECK(ck.params.at(name) == t);
    }
    CHECK(serialize_checkpoint("test", config, ck.params) == serialize_checkpoint("test", config, store));
}

TEST_CASE("checkpoint rejects corruption explicitly") {
    const std::string good = serialize_checkpoint("test", {}, sample_store());
    CHECK(error_of([&] { parse_checkpoint(good); }).empty());

    CHECK(error_of([&] { parse_checkpoint("NOTACKPT" + good.substr(8)); }).find("magic") != std::string::npos);
    CHECK(error_of([&] { parse_checkpoint(good.substr(0, good.size() - 4)); }).find("truncated") != std::string::npos);
    CHECK(error_of([&] { parse_checkpoint(good.substr(0, 20)); }).find("truncated") != std::string::npos);

    const auto future = with_header(good, [](nlohmann::json& h) { h["format_version"] = kCheckpointVersion + 1; });
    CHECK(error_of([&] { parse_checkpoint(future); }).find("version") != std::string::npos);

    const auto shifted = with_header(good, [](nlohmann::json& h) { h["tensors"][1]["offset"] = h["tensors"][1]["offset"].get<int>() + 4; });
    CHECK(error_of([&] { parse_checkpoint(shifted); }).find("manifest") != std::string::npos);

    const auto overlapping = with_header(good, [](nlohmann::json& h) { h["tensors"][1]["offset"] = 0; });
    CHECK(error_of([&] { parse_checkpoint(overlapping); }).find("manifest") != std::string::npos);

    const auto wrong_len = with_header(good, [](nlohmann::json& h) { h["tensors"][0]["length"] = 4; });
    CHECK(error_of([&] { parse_checkpoint(wrong_len); }).find("manifest") != std::string::npos);

    const auto missing = with_header(good, [](nlohmann::json& h) { h.erase("tensors"); });
    CHECK_FALSE(error_of([&] { parse_checkpoint(missing); }).empty());
}

TEST_CASE("denoiser training is deterministic and aborts on non-finite loss") {
    Rng rng(3);
    auto data = world::sample_dataset(24, world::Variant::train, rng);
    DenoiserTrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch = 8;
    cfg.lr = 1e-3f;
    cfg.seed = 9;
    int epochs_seen = 0;
    const auto a = train_denoiser(data, data, tiny_denoiser(), cfg, [&](int, double l) {
        ++epochs_seen;
        CHECK(std::isfinite(l));
    });
    const auto b = train_denoiser(data, data, tiny_denoiser(), cfg);
    CHECK(epochs_seen == 2);
    CHECK(a.report.epoch_loss == b.report.epoch_loss);
    CHECK(serialize_checkpoint("denoiser", {}, a.params) == serialize_checkpoint("denoiser", {}, b.params));
    CHECK(a.report.validation.contains("eps_mse"));
    CHECK(TrainReport::from_json(a.report.to_json()).epoch_loss == a.report.epoch_loss);

    cfg.seed = 10;
    const auto c = train_denoiser(data, {}, tiny_denoiser(), cfg);
    CHECK_FALSE(serialize_checkpoint("denoiser", {}, a.params) == serialize_checkpoint("denoiser", {}, c.params));

    data[5].image[7] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(train_denoiser(data, {}, tiny_denoiser(), cfg), TrainingError);
    CHECK_THROWS_AS(train_denoiser({}, {}, tiny_denoiser(), cfg), std::invalid_argument);
}

TEST_CASE("embedder training reduces loss on a small separable set") {
    Rng rng(4);
    auto data = world::sample_dataset(240, world::Variant::train, rng);
    EmbedderTrainConfig cfg;
    cfg.epochs = 6;
    cfg.batch = 16;
    const auto m = train_embedder(data, data, {}, cfg);
    REQUIRE(m.report.epoch_loss.size() == 6);
    CHECK(m.report.epoch_loss.back() < m.report.epoch_loss.front());
    const double acc = m.report.validation["accuracy"].get<double>();
    CHECK(acc > 1.0 / 24.0);

    const eval::Embedder emb({}, m.params);
    CHECK(embedder_accuracy(emb, data) == acc);
    const Tensor e = emb.embed(stack(std::vector<Tensor>{data[0].image, data[1].image}));
    for (int i = 0; i < 2; ++i) {
        double n = 0.0;
        for (int k = 0; k < e.dim(1); ++k) n += static_cast<double>(e[static_cast<std::size_t>(i * e.dim(1) + k)]) * e[static_cast<std::size_t>(i * e.dim(1) + k)];
        CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-5);
    }
}
