#include "fabric/eval/embedder.hpp"

#include <stdexcept>
#include <string>
#include <vector>

#include "fabric/nn/ops.hpp"

namespace fabric::eval {

using nn::Graph;
using nn::Var;

namespace {

struct Layer {
    std::string name;
    Shape shape;
    int fan_in;
};

std::vector<Layer> layout(const EmbedderConfig& c) {
    return {{"conv1", {c.width1, 3, 3, 3}, 27},
            {"conv2", {c.width2, c.width1, 3, 3}, c.width1 * 9},
            {"conv3", {c.width3, c.width2, 3, 3}, c.width2 * 9},
            {"feat", {c.embed_dim, c.width3 * (c.image_size / 4) * (c.image_size / 4)}, c.width3 * (c.image_size / 4) * (c.image_size / 4)},
            {"head", {c.classes, c.embed_dim}, c.embed_dim}};
}

Shape bias_shape(const Layer& l) { return {l.shape[0]}; }

}  // namespace

void EmbedderConfig::validate() const {
    if (image_size < 4 || image_size % 4 != 0) throw std::invalid_argument("embedder: image size must be a multiple of 4");
    if (width1 < 1 || width2 < 1 || width3 < 1 || embed_dim < 1 || classes < 2) {
        throw std::invalid_argument("embedder: widths must be positive and classes >= 2");
    }
}

nlohmann::json EmbedderConfig::to_json() const {
    return {{"image_size", image_size}, {"width1", width1},       {"width2", width2},
            {"width3", width3},         {"embed_dim", embed_dim}, {"classes", classes}};
}

EmbedderConfig EmbedderConfig::from_json(const nlohmann::json& j) {
    EmbedderConfig c;
    c.image_size = j.at("image_size").get<int>();
    c.width1 = j.at("width1").get<int>();
    c.width2 = j.at("width2").get<int>();
    c.width3 = j.at("width3").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.classes = j.at("classes").get<int>();
    c.validate();
    return c;
}

Embedder::Embedder(EmbedderConfig config, const nn::ParamStore& params) : config_(config), params_(params) {
    config_.validate();
    for (const auto& l : layout(config_)) {
        for (const auto& [name, shape] : {std::pair{l.name + ".w", l.shape}, std::pair{l.name + ".b", bias_shape(l)}}) {
            if (!params_.contains(name)) throw std::invalid_argument("embedder: missing parameter " + name);
            if (params_.at(name).shape() != shape) {
                throw ShapeError("embedder: parameter " + name + " has shape " + shape_str(params_.at(name).shape()) +
                                 ", expected " + shape_str(shape));
            }
        }
    }
}

void Embedder::init_params(const EmbedderConfig& config, nn::ParamStore& params, Rng& rng) {
    config.validate();
    for (const auto& l : layout(config)) {
        params.add_uniform(l.name + ".w", l.shape, l.fan_in, rng.engine());
        params.add(l.name + ".b", Tensor(bias_shape(l), 0.0f));
    }
}

EmbedderOutputs Embedder::forward(Graph& g, Var images) const {
    const Tensor& x = g.value(images);
    if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != config_.image_size || x.dim(3) != config_.image_size) {
        throw ShapeError("embedder: expected images [B, 3, " + std::to_string(config_.image_size) + ", " +
                         std::to_string(config_.image_size) + "], got " + shape_str(x.shape()));
    }
    const int batch = x.dim(0);
    auto p = [&](const std::string& name) { return g.param(params_, name); };
    auto conv = [&](Var h, const std::string& name) {
        return nn::silu(g, nn::conv2d(g, h, p(name + ".w"), p(name + ".b")));
    };
    Var h = nn::avg_pool2(g, conv(images, "conv1"));
    h = nn::avg_pool2(g, conv(h, "conv2"));
    h = conv(h, "conv3");
    h = nn::reshape(g, h, {batch, static_cast<int>(g.value(h).size()) / batch});
    Var feat = nn::linear(g, h, p("feat.w"), p("feat.b"));
    Var logits = nn::linear(g, nn::silu(g, feat), p("head.w"), p("head.b"));
    return {nn::l2_normalize(g, feat), logits};
}

Tensor Embedder::embed(const Tensor& images) const {
    Graph g(false);
    return g.value(forward(g, g.constant(images)).embedding);
}

Tensor Embedder::logits(const Tensor& images) const {
    Graph g(false);
    return g.value(forward(g, g.constant(images)).logits);
}

}  // namespace fabric::eval
