#include "fabric/denoiser/weighted_attention.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "fabric/nn/ops.hpp"

namespace fabric::denoiser {

namespace {

void check(const Tensor& q, const Tensor& k, const Tensor* v) {
    if (q.rank() != 2 || k.rank() != 2 || q.dim(1) != k.dim(1)) {
        throw ShapeError("attention: q " + shape_str(q.shape()) + " vs k " + shape_str(k.shape()));
    }
    if (v && (v->rank() != 2 || v->dim(0) != k.dim(0))) {
        throw ShapeError("attention: k " + shape_str(k.shape()) + " vs v " + shape_str(v->shape()));
    }
}

std::vector<double> probs_row(const Tensor& q, const Tensor& k, int i, std::span<const float> w) {
    const int lk = k.dim(0), d = q.dim(1);
    const double sc = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> s(static_cast<std::size_t>(lk));
    double m = -INFINITY;
    for (int j = 0; j < lk; ++j) {
        double acc = 0.0;
        for (int c = 0; c < d; ++c) acc += static_cast<double>(q[static_cast<std::size_t>(i * d + c)]) * k[static_cast<std::size_t>(j * d + c)];
        s[static_cast<std::size_t>(j)] = acc * sc;
        m = std::max(m, s[static_cast<std::size_t>(j)]);
    }
    double z = 0.0;
    for (auto& x : s) {
        x = std::exp(x - m);
        z += x;
    }
    for (auto& x : s) x /= z;
    if (!w.empty()) {
        double zw = 0.0;
        for (int j = 0; j < lk; ++j) zw += w[static_cast<std::size_t>(j)] * s[static_cast<std::size_t>(j)];
        for (int j = 0; j < lk; ++j) s[static_cast<std::size_t>(j)] = w[static_cast<std::size_t>(j)] * s[static_cast<std::size_t>(j)] / zw;
    }
    return s;
}

void check_weights(std::span<const float> w, int lk) {
    if (static_cast<int>(w.size()) != lk) throw ShapeError("attention: weight count does not match key count");
    bool any = false;
    for (float x : w) {
        if (!(x >= 0.0f) || !std::isfinite(x)) throw std::invalid_argument("attention: weights must be finite and >= 0");
        any = any || x > 0.0f;
    }
    if (!any) throw std::invalid_argument("attention: all weights are zero");
}

Tensor apply(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const float> w) {
    const int lq = q.dim(0), lk = k.dim(0), dv = v.dim(1);
    Tensor out({lq, dv});
    for (int i = 0; i < lq; ++i) {
        const auto p = probs_row(q, k, i, w);
        for (int c = 0; c < dv; ++c) {
            double acc = 0.0;
            for (int j = 0; j < lk; ++j) acc += p[static_cast<std::size_t>(j)] * v[static_cast<std::size_t>(j * dv + c)];
            out[static_cast<std::size_t>(i * dv + c)] = static_cast<float>(acc);
        }
    }
    return out;
}

}  // namespace

Tensor standard_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    check(q, k, &v);
    return apply(q, k, v, {});
}

Tensor weighted_attention_probs(const Tensor& q, const Tensor& k, std::span<const float> w) {
    check(q, k, nullptr);
    check_weights(w, k.dim(0));
    const int lq = q.dim(0), lk = k.dim(0);
    Tensor out({lq, lk});
    for (int i = 0; i < lq; ++i) {
        const auto p = probs_row(q, k, i, w);
        for (int j = 0; j < lk; ++j) out[static_cast<std::size_t>(i * lk + j)] = static_cast<float>(p[static_cast<std::size_t>(j)]);
    }
    return out;
}

Tensor weighted_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const float> w) {
    check(q, k, &v);
    check_weights(w, k.dim(0));
    return apply(q, k, v, w);
}

Tensor log_weight_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const float> w) {
    check(q, k, &v);
    check_weights(w, k.dim(0));
    if (v.dim(1) != q.dim(1)) throw ShapeError("log_weight_attention: value width must equal the key width");
    const int lq = q.dim(0), lk = k.dim(0), d = q.dim(1);
    nn::Graph g(false);
    Tensor weights({1, lk}, std::vector<float>(w.begin(), w.end()));
    nn::Var out = nn::attention(g, g.constant(q.reshaped({1, lq, d})), g.constant(k.reshaped({1, lk, d})),
                            g.constant(v.reshaped({1, lk, d})), 1, &weights);
    return g.value(out).reshaped({lq, d});
}

}  // namespace fabric::denoiser
