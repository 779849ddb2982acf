#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "coda/grid.hpp"
#include "coda/nets.hpp"

namespace coda {

// w ← w − lr·g
template <typename T>
void sgd_step(ModelParams<T>& params, const std::vector<Grid<T>>& grads, double lr) {
    if (grads.size() != params.count())
        throw std::invalid_argument("sgd_step: gradient count mismatch");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!(grads[i].shape == params.grids[i].shape))
            throw std::invalid_argument("sgd_step: gradient shape mismatch at '" +
                                        params.names[i] + "'");
        auto& w = params.grids[i].data;
        const auto& g = grads[i].data;
        for (std::size_t e = 0; e < w.size(); ++e) w[e] = T(double(w[e]) - lr * double(g[e]));
    }
}

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double weight_decay = 1e-4;  // classic L2: added to the gradient before moments
};

template <typename T>
struct AdamState {
    std::vector<Grid<T>> m;  // first moments, aligned with param order
    std::vector<Grid<T>> v;  // second moments
    std::int64_t t = 0;      // completed steps
};

template <typename T>
AdamState<T> adam_init(const ModelParams<T>& params) {
    AdamState<T> s;
    for (const auto& g : params.grids) {
        s.m.emplace_back(g.shape, T(0));
        s.v.emplace_back(g.shape, T(0));
    }
    return s;
}

// Bias-corrected Adam with L2 weight decay folded into the gradient.
template <typename T>
void adam_step(ModelParams<T>& params, const std::vector<Grid<T>>& grads, AdamState<T>& state,
               double lr, const AdamConfig& cfg = {}) {
    if (grads.size() != params.count() || state.m.size() != params.count())
        throw std::invalid_argument("adam_step: array count mismatch");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.t));
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!(grads[i].shape == params.grids[i].shape))
            throw std::invalid_argument("adam_step: gradient shape mismatch at '" +
                                        params.names[i] + "'");
        auto& w = params.grids[i].data;
        auto& m = state.m[i].data;
        auto& v = state.v[i].data;
        const auto& g = grads[i].data;
        for (std::size_t e = 0; e < w.size(); ++e) {
            const double ge = double(g[e]) + cfg.weight_decay * double(w[e]);
            const double me = cfg.beta1 * double(m[e]) + (1.0 - cfg.beta1) * ge;
            const double ve = cfg.beta2 * double(v[e]) + (1.0 - cfg.beta2) * ge * ge;
            m[e] = T(me);
            v[e] = T(ve);
            const double mhat = me / bc1;
            const double vhat = ve / bc2;
            w[e] = T(double(w[e]) - lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
}

// base·(1 − t/t_max)^power, clamped to 0 past t_max.
inline double poly_decay(double base_lr, std::int64_t t, std::int64_t t_max, double power = 0.9) {
    if (t_max < 1) throw std::invalid_argument("poly_decay: t_max must be >= 1");
    if (t < 0) throw std::invalid_argument("poly_decay: t must be >= 0");
    if (t >= t_max) return 0.0;
    return base_lr * std::pow(1.0 - double(t) / double(t_max), power);
}

}  // namespace coda
