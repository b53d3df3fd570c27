#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "scan/errors.hpp"
#include "scan/tensor.hpp"

namespace scan {

// Named learnable tensor with its gradient accumulator.
template <typename T>
struct Param {
    std::string name;
    TensorT<T> value;
    TensorT<T> grad;
};

// Standard Adam with bias correction. One state covers one parameter list;
// moment buffers mirror parameter shapes exactly.
template <typename T>
struct AdamState {
    std::vector<TensorT<T>> m, v;
    std::int64_t t = 0;
    T beta1 = T(0.9), beta2 = T(0.999), eps = T(1e-8);

    void init(const std::vector<Param<T>*>& params) {
        m.clear();
        v.clear();
        for (const auto* p : params) {
            m.emplace_back(p->value.shape);
            v.emplace_back(p->value.shape);
        }
        t = 0;
    }
};

// One optimizer step. Throws DiagnosticsError naming the parameter if any
// gradient entry is not finite; the step is not applied in that case.
template <typename T>
void adam_step(const std::vector<Param<T>*>& params, AdamState<T>& state, T lr) {
    if (state.m.size() != params.size())
        throw ConfigError("adam_step: state holds " + std::to_string(state.m.size()) +
                          " buffers for " + std::to_string(params.size()) + " parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.m[i].shape != params[i]->value.shape)
            throw ShapeError("adam_step: moment shape " + state.m[i].shape_str() +
                             " does not mirror parameter " + params[i]->name);
        for (T g : params[i]->grad.values)
            if (!std::isfinite(static_cast<double>(g)))
                throw DiagnosticsError("adam_step: non-finite gradient in parameter '" +
                                           params[i]->name + "'",
                                       params[i]->name);
    }

    state.t += 1;
    const T bc1 = T(1) - std::pow(state.beta1, T(state.t));
    const T bc2 = T(1) - std::pow(state.beta2, T(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i]->value.values;
        const auto& g = params[i]->grad.values;
        auto& m = state.m[i].values;
        auto& v = state.v[i].values;
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = state.beta1 * m[j] + (T(1) - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (T(1) - state.beta2) * g[j] * g[j];
            const T mhat = m[j] / bc1;
            const T vhat = v[j] / bc2;
            p[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

// Rescales gradients so their global L2 norm is at most max_norm. Off by
// default in training; exists as a rescue flag for unstable runs.
template <typename T>
void clip_grad_norm(const std::vector<Param<T>*>& params, T max_norm) {
    double sq = 0;
    for (const auto* p : params)
        for (T g : p->grad.values) sq += double(g) * double(g);
    const double norm = std::sqrt(sq);
    if (norm <= double(max_norm) || norm == 0) return;
    const T scale = T(double(max_norm) / norm);
    for (auto* p : params)
        for (auto& g : p->grad.values) g *= scale;
}

}  // namespace scan
