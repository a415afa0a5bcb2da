#include "fabric/nn/param_store.hpp"

#include <cmath>

namespace fabric::nn {

Tensor& ParamStore::add(const std::string& name, Tensor init) {
    if (params_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    m_.emplace(name, Tensor(init.shape()));
    v_.emplace(name, Tensor(init.shape()));
    return params_.emplace(name, std::move(init)).first->second;
}

Tensor& ParamStore::add_uniform(const std::string& name, Shape shape, int fan_in, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
    std::uniform_real_distribution<float> dist(-bound, bound);
    for (auto& x : t.data()) x = dist(rng);
    return add(name, std::move(t));
}

Tensor& ParamStore::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
}

std::size_t ParamStore::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
}

void Adam::step(ParamStore& store, const Grad& grads, const AdamConfig& cfg) {
    for (const auto& [name, g] : grads) {
        const Tensor& p = store.at(name);
        if (g.shape() != p.shape()) {
            throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match parameter " + name);
        }
        if (!g.all_finite()) throw NonFiniteGradient("non-finite gradient for parameter " + name);
    }
    store.step_ += 1;
    const double t = static_cast<double>(store.step_);
    const float c1 = static_cast<float>(1.0 - std::pow(static_cast<double>(cfg.beta1), t));
    const float c2 = static_cast<float>(1.0 - std::pow(static_cast<double>(cfg.beta2), t));
    for (auto& [name, p] : store.params_) {
        auto git = grads.find(name);
        Tensor& m = store.m_.at(name);
        Tensor& v = store.v_.at(name);
        const float* g = git != grads.end() ? git->second.ptr() : nullptr;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const float gi = g ? g[i] : 0.0f;
            m[i] = cfg.beta1 * m[i] + (1.0f - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0f - cfg.beta2) * gi * gi;
            const float mhat = m[i] / c1;
            const float vhat = v[i] / c2;
            p[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

}  // namespace fabric::nn
