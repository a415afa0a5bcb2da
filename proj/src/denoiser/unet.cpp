#include "fabric/denoiser/unet.hpp"

#include <cmath>
#include <stdexcept>

#include "fabric/nn/ops.hpp"

namespace fabric::denoiser {

using nn::Graph;
using nn::Var;
using world::Prompt;

namespace {

enum class Init { uniform, zeros, ones };

struct ParamSpec {
    std::string name;
    Shape shape;
    Init init;
    int fan_in = 1;
};

void dense(std::vector<ParamSpec>& out, const std::string& name, int in, int o, bool bias = true) {
    out.push_back({name + ".w", {o, in}, Init::uniform, in});
    if (bias) out.push_back({name + ".b", {o}, Init::zeros});
}

void norm(std::vector<ParamSpec>& out, const std::string& name, int c) {
    out.push_back({name + ".g", {c}, Init::ones});
    out.push_back({name + ".b", {c}, Init::zeros});
}

void conv(std::vector<ParamSpec>& out, const std::string& name, int cin, int cout, int k) {
    out.push_back({name + ".w", {cout, cin, k, k}, Init::uniform, cin * k * k});
    out.push_back({name + ".b", {cout}, Init::zeros});
}

void res_block_layout(std::vector<ParamSpec>& out, const std::string& name, int cin, int cout, int tdim) {
    norm(out, name + ".gn1", cin);
    conv(out, name + ".conv1", cin, cout, 3);
    dense(out, name + ".temb", tdim, cout);
    norm(out, name + ".gn2", cout);
    conv(out, name + ".conv2", cout, cout, 3);
    if (cin != cout) conv(out, name + ".skip", cin, cout, 1);
}

void attention_layout(std::vector<ParamSpec>& out, const std::string& name, int c) {
    dense(out, name + ".q", c, c, false);
    dense(out, name + ".k", c, c, false);
    dense(out, name + ".v", c, c, false);
    dense(out, name + ".o", c, c);
}

std::vector<ParamSpec> layout(const DenoiserConfig& c) {
    std::vector<ParamSpec> p;
    const int hi = c.width_hi, lo = c.width_lo, td = c.time_dim;
    dense(p, "time.l1", td, td);
    dense(p, "time.l2", td, td);
    p.push_back({"ctx.tokens", {world::kVocabSize, lo}, Init::uniform, 1});
    p.push_back({"ctx.slots", {c.context_tokens, lo}, Init::uniform, 1});
    conv(p, "conv_in", c.channels, hi, 3);
    res_block_layout(p, "enc1", hi, hi, td);
    res_block_layout(p, "enc2", hi, lo, td);
    res_block_layout(p, "enc3", lo, lo, td);
    norm(p, "mid.gn", lo);
    dense(p, "mid.proj_in", lo, lo);
    norm(p, "mid.ln1", lo);
    attention_layout(p, "mid.self", lo);
    norm(p, "mid.ln2", lo);
    attention_layout(p, "mid.cross", lo);
    norm(p, "mid.ln3", lo);
    dense(p, "mid.ffn1", lo, lo * c.ffn_mult);
    dense(p, "mid.ffn2", lo * c.ffn_mult, lo);
    dense(p, "mid.proj_out", lo, lo);
    res_block_layout(p, "dec2", 2 * lo, lo, td);
    res_block_layout(p, "dec1", lo + hi, hi, td);
    norm(p, "out.gn", hi);
    conv(p, "out.conv", hi, c.channels, 3);
    return p;
}

struct Builder {
    Graph& g;
    const ParamStore& store;
    int groups;

    Var p(const std::string& name) const { return g.param(store, name); }

    Var dense(Var x, const std::string& name, bool bias = true) const {
        return nn::linear(g, x, p(name + ".w"), bias ? p(name + ".b") : Var{});
    }
    Var conv(Var x, const std::string& name) const { return nn::conv2d(g, x, p(name + ".w"), p(name + ".b")); }
    Var gn(Var x, const std::string& name) const { return nn::group_norm(g, x, p(name + ".g"), p(name + ".b"), groups); }
    Var ln(Var x, const std::string& name) const { return nn::layer_norm(g, x, p(name + ".g"), p(name + ".b")); }

    Var res_block(Var x, Var temb_act, const std::string& name, bool project) const {
        Var h = conv(nn::silu(g, gn(x, name + ".gn1")), name + ".conv1");
        h = nn::add_channel_vector(g, h, dense(temb_act, name + ".temb"));
        h = conv(nn::silu(g, gn(h, name + ".gn2")), name + ".conv2");
        Var skip = project ? conv(x, name + ".skip") : x;
        return nn::add(g, skip, h);
    }
};

}  // namespace

void DenoiserConfig::validate() const {
    if (channels < 1 || image_size < 4 || image_size % 4 != 0) throw std::invalid_argument("denoiser: image size must be a multiple of 4");
    if (heads * head_dim != width_lo) throw std::invalid_argument("denoiser: heads * head_dim must equal the bottleneck width");
    if (width_hi % groups != 0 || width_lo % groups != 0) throw std::invalid_argument("denoiser: widths must be divisible by groups");
    if (time_dim < 2 || time_dim % 2 != 0) throw std::invalid_argument("denoiser: time_dim must be even");
    if (context_tokens != 4) throw std::invalid_argument("denoiser: context must be 3 attribute slots plus null");
    if (train_steps < 1) throw std::invalid_argument("denoiser: train_steps must be >= 1");
}

nlohmann::json DenoiserConfig::to_json() const {
    return {{"channels", channels},   {"image_size", image_size}, {"width_hi", width_hi},
            {"width_lo", width_lo},   {"heads", heads},           {"head_dim", head_dim},
            {"time_dim", time_dim},   {"groups", groups},         {"ffn_mult", ffn_mult},
            {"context_tokens", context_tokens}, {"train_steps", train_steps}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
    DenoiserConfig c;
    c.channels = j.at("channels").get<int>();
    c.image_size = j.at("image_size").get<int>();
    c.width_hi = j.at("width_hi").get<int>();
    c.width_lo = j.at("width_lo").get<int>();
    c.heads = j.at("heads").get<int>();
    c.head_dim = j.at("head_dim").get<int>();
    c.time_dim = j.at("time_dim").get<int>();
    c.groups = j.at("groups").get<int>();
    c.ffn_mult = j.at("ffn_mult").get<int>();
    c.context_tokens = j.at("context_tokens").get<int>();
    c.train_steps = j.at("train_steps").get<int>();
    c.validate();
    return c;
}

Tensor timestep_features(std::span<const int> t, int dim) {
    const int half = dim / 2;
    Tensor out({static_cast<int>(t.size()), dim});
    for (std::size_t b = 0; b < t.size(); ++b) {
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / half);
            const double arg = t[b] * freq;
            out[b * static_cast<std::size_t>(dim) + static_cast<std::size_t>(i)] = static_cast<float>(std::sin(arg));
            out[b * static_cast<std::size_t>(dim) + static_cast<std::size_t>(half + i)] = static_cast<float>(std::cos(arg));
        }
    }
    return out;
}

UNet::UNet(DenoiserConfig config, const ParamStore& params) : config_(config), params_(params) {
    config_.validate();
    for (const auto& spec : layout(config_)) {
        if (!params_.contains(spec.name)) throw std::invalid_argument("denoiser: missing parameter " + spec.name);
        if (params_.at(spec.name).shape() != spec.shape) {
            throw ShapeError("denoiser: parameter " + spec.name + " has shape " + shape_str(params_.at(spec.name).shape()) +
                             ", expected " + shape_str(spec.shape));
        }
    }
}

void UNet::init_params(const DenoiserConfig& config, ParamStore& params, Rng& rng) {
    config.validate();
    for (const auto& spec : layout(config)) {
        switch (spec.init) {
            case Init::uniform: params.add_uniform(spec.name, spec.shape, spec.fan_in, rng.engine()); break;
            case Init::zeros: params.add(spec.name, Tensor(spec.shape, 0.0f)); break;
            case Init::ones: params.add(spec.name, Tensor(spec.shape, 1.0f)); break;
        }
    }
}

void UNet::check_inputs(const Tensor& z, std::span<const int> t, std::span<const Prompt> prompts) const {
    const int s = config_.image_size;
    if (z.rank() != 4 || z.dim(1) != config_.channels || z.dim(2) != s || z.dim(3) != s) {
        throw ShapeError("denoiser: expected latents [B, " + std::to_string(config_.channels) + ", " + std::to_string(s) +
                         ", " + std::to_string(s) + "], got " + shape_str(z.shape()));
    }
    const auto batch = static_cast<std::size_t>(z.dim(0));
    if (t.size() != batch || prompts.size() != batch) throw std::invalid_argument("denoiser: need one timestep and prompt per item");
    for (int ti : t) {
        if (ti < 0 || ti > config_.train_steps) throw std::out_of_range("denoiser: timestep " + std::to_string(ti) + " outside schedule");
    }
}

Var UNet::forward(Graph& g, Var z, std::span<const int> t, std::span<const Prompt> prompts, ForwardHooks hooks) const {
    check_inputs(g.value(z), t, prompts);
    const DenoiserConfig& c = config_;
    const int batch = g.value(z).dim(0);
    const int lo = c.width_lo;
    const int side = c.bottleneck_size();
    const int tokens = c.bottleneck_tokens();
    Builder b{g, params_, c.groups};

    Var temb = b.dense(nn::silu(g, b.dense(g.constant(timestep_features(t, c.time_dim)), "time.l1")), "time.l2");
    Var temb_act = nn::silu(g, temb);

    std::vector<int> ids, slots;
    ids.reserve(static_cast<std::size_t>(batch) * 4);
    for (const auto& pr : prompts) {
        const auto tk = world::tokens(pr);
        ids.insert(ids.end(), tk.begin(), tk.end());
        ids.push_back(world::kNullToken);
        for (int s = 0; s < c.context_tokens; ++s) slots.push_back(s);
    }
    Var ctx = nn::add(g, nn::embedding(g, b.p("ctx.tokens"), ids), nn::embedding(g, b.p("ctx.slots"), slots));
    ctx = nn::reshape(g, ctx, {batch, c.context_tokens, lo});

    Var h = b.conv(z, "conv_in");
    Var s1 = b.res_block(h, temb_act, "enc1", false);
    Var s2 = b.res_block(nn::avg_pool2(g, s1), temb_act, "enc2", true);
    Var x = b.res_block(nn::avg_pool2(g, s2), temb_act, "enc3", false);

    // Bottleneck transformer block: self-attention, cross-attention, FFN.
    Var tok = nn::transpose12(g, nn::reshape(g, b.gn(x, "mid.gn"), {batch, lo, tokens}));
    tok = b.dense(tok, "mid.proj_in");
    Var a = b.ln(tok, "mid.ln1");
    if (hooks.capture) hooks.capture->push_back(g.value(a));

    Var kv_src = a;
    Tensor key_weights;
    const Tensor* kw = nullptr;
    if (hooks.injections) {
        const auto& inj = *hooks.injections;
        if (inj.size() != static_cast<std::size_t>(batch)) throw std::invalid_argument("denoiser: need one injection entry per item");
        std::size_t max_refs = 0;
        for (const auto& e : inj) max_refs = std::max(max_refs, e.refs.size());
        if (max_refs > 0) {
            const int lk_ref = static_cast<int>(max_refs) * tokens;
            Tensor refs({batch, lk_ref, lo}, 0.0f);
            key_weights = Tensor({batch, tokens + lk_ref}, 0.0f);
            for (int bi = 0; bi < batch; ++bi) {
                const auto& e = inj[static_cast<std::size_t>(bi)];
                if (!(e.weight >= 0.0f) || !std::isfinite(e.weight)) throw std::invalid_argument("denoiser: reference weight must be finite and >= 0");
                float* wrow = key_weights.ptr() + static_cast<std::ptrdiff_t>(bi) * (tokens + lk_ref);
                std::fill(wrow, wrow + tokens, 1.0f);
                for (std::size_t r = 0; r < e.refs.size(); ++r) {
                    const HiddenStateCache& cache = *e.refs[r];
                    if (cache.timestep != t[static_cast<std::size_t>(bi)]) {
                        throw std::invalid_argument("denoiser: cache timestep " + std::to_string(cache.timestep) +
                                                    " does not match " + std::to_string(t[static_cast<std::size_t>(bi)]));
                    }
                    if (cache.layers.size() != static_cast<std::size_t>(self_attention_layers())) {
                        throw ShapeError("denoiser: cache has " + std::to_string(cache.layers.size()) + " layers");
                    }
                    require_shape(cache.layers[0], {tokens, lo}, "reference hidden states");
                    std::copy(cache.layers[0].ptr(), cache.layers[0].ptr() + cache.layers[0].size(),
                              refs.ptr() + (static_cast<std::ptrdiff_t>(bi) * lk_ref + static_cast<std::ptrdiff_t>(r) * tokens) * lo);
                    std::fill(wrow + tokens + r * tokens, wrow + tokens + (r + 1) * tokens, e.weight);
                }
            }
            kv_src = nn::concat(g, a, g.constant(std::move(refs)), 1);
            kw = &key_weights;
        }
    }
    Var att = nn::attention(g, b.dense(a, "mid.self.q", false), b.dense(kv_src, "mid.self.k", false),
                            b.dense(kv_src, "mid.self.v", false), c.heads, kw);
    tok = nn::add(g, tok, b.dense(att, "mid.self.o"));

    Var cq = b.ln(tok, "mid.ln2");
    Var cross = nn::attention(g, b.dense(cq, "mid.cross.q", false), b.dense(ctx, "mid.cross.k", false),
                              b.dense(ctx, "mid.cross.v", false), c.heads);
    tok = nn::add(g, tok, b.dense(cross, "mid.cross.o"));

    Var f = b.dense(nn::silu(g, b.dense(b.ln(tok, "mid.ln3"), "mid.ffn1")), "mid.ffn2");
    tok = nn::add(g, tok, f);
    tok = b.dense(tok, "mid.proj_out");
    x = nn::add(g, x, nn::reshape(g, nn::transpose12(g, tok), {batch, lo, side, side}));

    x = b.res_block(nn::concat(g, nn::upsample2(g, x), s2, 1), temb_act, "dec2", true);
    x = b.res_block(nn::concat(g, nn::upsample2(g, x), s1, 1), temb_act, "dec1", true);
    return b.conv(nn::silu(g, b.gn(x, "out.gn")), "out.conv");
}

Tensor UNet::predict(const Tensor& z, std::span<const int> t, std::span<const Prompt> prompts) const {
    Graph g(false);
    return g.value(forward(g, g.constant(z), t, prompts));
}

std::vector<HiddenStateCache> UNet::precompute_hidden_states(const Tensor& z_refs, int t, std::span<const Prompt> prompts,
                                                             std::span<const std::string> reference_ids) const {
    if (t < 1 || t > config_.train_steps) throw std::out_of_range("precompute_hidden_states: timestep outside schedule");
    const auto n = static_cast<std::size_t>(z_refs.rank() == 4 ? z_refs.dim(0) : 0);
    if (!reference_ids.empty() && reference_ids.size() != n) throw std::invalid_argument("precompute_hidden_states: one id per reference");
    std::vector<int> ts(n, t);
    std::vector<Tensor> captured;
    {
        Graph g(false);
        forward(g, g.constant(z_refs), ts, prompts, ForwardHooks{nullptr, &captured});
    }
    const int tokens = config_.bottleneck_tokens(), lo = config_.width_lo;
    const std::size_t per = static_cast<std::size_t>(tokens) * lo;
    std::vector<HiddenStateCache> out(n);
    for (std::size_t r = 0; r < n; ++r) {
        out[r].timestep = t;
        if (!reference_ids.empty()) out[r].reference_id = reference_ids[r];
        for (const Tensor& layer : captured) {
            Tensor slice({tokens, lo});
            std::copy(layer.ptr() + r * per, layer.ptr() + (r + 1) * per, slice.ptr());
            out[r].layers.push_back(std::move(slice));
        }
    }
    return out;
}

Tensor UNet::modified_unet(const Tensor& z, std::span<const int> t, std::span<const Prompt> prompts,
                           const std::vector<Injection>& injections) const {
    Graph g(false);
    return g.value(forward(g, g.constant(z), t, prompts, ForwardHooks{&injections, nullptr}));
}

}  // namespace fabric::denoiser
