#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "qih/graph.hpp"

namespace qih {

// Builds a fresh graph, returns the scalar loss node. Must be a pure function
// of the parameter values so repeated builds are comparable.
template <class T>
using LossBuilder = std::function<Var(Graph<T>&)>;

// Max over all components of |analytic - central difference| / max(1, |central difference|).
template <class T>
double finite_difference_check(const LossBuilder<T>& build, const std::vector<ParamPtr<T>>& params, double eps,
                               Mode mode = Mode::Train, std::uint64_t seed = 0) {
    if (eps < 1e-5 || eps > 1e-2) throw ConfigError("finite_difference_check: eps must be in [1e-5, 1e-2]");
    for (const auto& p : params) p->grad.reset();
    {
        Graph<T> g(mode, seed);
        g.backward(build(g));
    }
    auto evaluate = [&] {
        Graph<T> g(mode, seed);
        const double v = static_cast<double>(g.scalar(build(g)));
        if (!std::isfinite(v)) throw NumericError("finite_difference_check: non-finite loss");
        return v;
    };
    double worst = 0;
    for (const auto& p : params) {
        if (!p->trainable) continue;
        for (std::size_t i = 0; i < p->size(); ++i) {
            const T saved = p->data[i];
            p->data[i] = static_cast<T>(saved + eps);
            const double up = evaluate();
            p->data[i] = static_cast<T>(saved - eps);
            const double down = evaluate();
            p->data[i] = saved;
            const double fd = (up - down) / (2 * eps);
            const double analytic = p->grad ? static_cast<double>((*p->grad)[i]) : 0.0;
            if (!std::isfinite(analytic)) throw NumericError("finite_difference_check: non-finite gradient");
            worst = std::max(worst, std::abs(analytic - fd) / std::max(1.0, std::abs(fd)));
        }
    }
    for (const auto& p : params) p->grad.reset();
    return worst;
}

} // namespace qih
