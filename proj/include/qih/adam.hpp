#pragma once

#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "qih/tensor.hpp"

namespace qih {

template <class T>
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t step = 0;
    // Keyed by tensor identity; buffers are created on first update.
    std::unordered_map<const Tensor<T>*, std::pair<std::vector<T>, std::vector<T>>> moments;
};

// One Adam update over every trainable parameter that has a gradient.
// Frozen tensors are never written. Gradients are left in place.
template <class T>
void adam_step(const std::vector<ParamPtr<T>>& params, AdamState<T>& state, double learning_rate) {
    if (!(learning_rate > 0)) throw ConfigError("adam_step: learning rate must be positive");
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (const auto& p : params) {
        if (!p->trainable || !p->grad) continue;
        const auto& g = *p->grad;
        if (g.size() != p->data.size()) throw ShapeError("adam_step: gradient shape mismatch for '" + p->name + "'");
        auto& [m, v] = state.moments[p.get()];
        if (m.empty()) {
            m.assign(p->size(), T{0});
            v.assign(p->size(), T{0});
        }
        if (m.size() != p->size()) throw ShapeError("adam_step: moment buffers do not match '" + p->name + "'");
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double gi = g[i];
            const double mi = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            const double vi = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double update = learning_rate * (mi / bc1) / (std::sqrt(vi / bc2) + state.epsilon);
            p->data[i] = static_cast<T>(p->data[i] - update);
        }
    }
}

template <class T>
void zero_grad(const std::vector<ParamPtr<T>>& params) {
    for (const auto& p : params) p->grad.reset();
}

} // namespace qih
