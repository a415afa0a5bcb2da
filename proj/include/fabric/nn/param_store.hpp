#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>

#include "fabric/tensor.hpp"

namespace fabric::nn {

/// Named parameter tensors plus Adam state. Iteration order is the name order.
class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor init);
    /// Glorot-uniform style initialisation scaled by fan_in.
    Tensor& add_uniform(const std::string& name, Shape shape, int fan_in, std::mt19937_64& rng);

    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;

    const std::map<std::string, Tensor>& params() const noexcept { return params_; }
    std::map<std::string, Tensor>& params() noexcept { return params_; }
    std::size_t parameter_count() const;

    Tensor& first_moment(const std::string& name) { return m_.at(name); }
    Tensor& second_moment(const std::string& name) { return v_.at(name); }
    std::int64_t step() const noexcept { return step_; }
    void set_step(std::int64_t s) noexcept { step_ = s; }

    friend class Adam;

private:
    std::map<std::string, Tensor> params_;
    std::map<std::string, Tensor> m_;
    std::map<std::string, Tensor> v_;
    std::int64_t step_ = 0;
};

/// Gradients keyed by parameter name.
using Grad = std::map<std::string, Tensor>;

class NonFiniteGradient : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct AdamConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

class Adam {
public:
    /// Applies one bias-corrected Adam update. Parameters absent from `grads`
    /// are treated as having zero gradient. Any non-finite gradient rejects the
    /// whole update before anything is modified.
    static void step(ParamStore& store, const Grad& grads, const AdamConfig& cfg);
};

}  // namespace fabric::nn
