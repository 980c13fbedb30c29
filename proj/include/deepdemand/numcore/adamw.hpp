#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "deepdemand/numcore/tensor.hpp"

namespace deepdemand::numcore {

struct AdamWConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 1e-4;
};

/// Moment accumulators for one parameter list. The list order must stay fixed across steps.
struct OptState {
    AdamWConfig config;
    std::size_t step = 0;
    std::vector<Tensor> first_moment;
    std::vector<Tensor> second_moment;

    OptState() = default;
    explicit OptState(AdamWConfig c) : config(c) {}
};

/// One AdamW update: params are first shrunk by (1 - lr * decay), then moved by the bias-corrected
/// adaptive step. Gradients are read from Parameter::grad and left untouched.
inline void adamw_step(OptState& state, std::span<Parameter* const> params) {
    if (state.first_moment.empty()) {
        for (const Parameter* p : params) {
            state.first_moment.push_back(Tensor::zeros_like(p->value));
            state.second_moment.push_back(Tensor::zeros_like(p->value));
        }
    }
    if (state.first_moment.size() != params.size())
        throw ShapeError("adamw_step: optimizer state tracks " + std::to_string(state.first_moment.size()) +
                         " parameters, got " + std::to_string(params.size()));
    for (std::size_t k = 0; k < params.size(); ++k) {
        const Parameter& p = *params[k];
        if (p.grad.shape() != p.value.shape() || state.first_moment[k].shape() != p.value.shape())
            throw ShapeError("adamw_step: shape mismatch for " + p.name);
        if (!p.grad.all_finite()) throw TrainingError("non-finite gradient in parameter " + p.name);
    }

    const AdamWConfig& c = state.config;
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    const double decay = 1.0 - c.learning_rate * c.weight_decay;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Parameter& p = *params[k];
        auto w = p.value.values();
        auto g = p.grad.values();
        auto m = state.first_moment[k].values();
        auto v = state.second_moment[k].values();
        for (std::size_t i = 0; i < w.size(); ++i) {
            w[i] *= decay;
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            w[i] -= c.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.epsilon);
        }
    }
}

inline void zero_grads(std::span<Parameter* const> params) {
    for (Parameter* p : params) p->zero_grad();
}

}  // namespace deepdemand::numcore
