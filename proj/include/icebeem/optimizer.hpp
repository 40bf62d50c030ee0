#pragma once

#include <cmath>
#include <cstdint>

#include "icebeem/matrix.hpp"

namespace icebeem {

/// Bias-corrected Adam (Kingma & Ba). No amsgrad, no weight decay.
struct AdamState {
    std::size_t step = 0;
    Vector m, v;  // first/second moment accumulators
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static AdamState create(std::size_t n, double lr) {
        AdamState s;
        s.lr = lr;
        s.m.assign(n, 0.0);
        s.v.assign(n, 0.0);
        return s;
    }
};

inline void adam_step(AdamState& state, Vector& params, const Vector& grads) {
    if (params.size() != state.m.size() || grads.size() != state.m.size())
        throw std::invalid_argument("adam_step: shape mismatch");
    for (double g : grads)
        if (!std::isfinite(g)) throw NumericalError("adam_step: non-finite gradient");

    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
        const double m_hat = state.m[i] / bc1;
        const double v_hat = state.v[i] / bc2;
        params[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
}

/// Momentum SGD with an exponential learning-rate schedule: the rate decays
/// from lr to lr * decay across total_steps.
struct MomentumSgdState {
    std::size_t step = 0;
    Vector velocity;
    double lr = 0.01;
    double momentum = 0.9;
    double decay = 0.1;
    std::size_t total_steps = 1;

    static MomentumSgdState create(std::size_t n, double lr, std::size_t total_steps) {
        MomentumSgdState s;
        s.lr = lr;
        s.total_steps = std::max<std::size_t>(1, total_steps);
        s.velocity.assign(n, 0.0);
        return s;
    }
};

inline void momentum_sgd_step(MomentumSgdState& state, Vector& params, const Vector& grads) {
    if (params.size() != state.velocity.size() || grads.size() != state.velocity.size())
        throw std::invalid_argument("momentum_sgd_step: shape mismatch");
    for (double g : grads)
        if (!std::isfinite(g)) throw NumericalError("momentum_sgd_step: non-finite gradient");

    const double frac = static_cast<double>(state.step) / static_cast<double>(state.total_steps);
    const double rate = state.lr * std::pow(state.decay, frac);
    ++state.step;
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.velocity[i] = state.momentum * state.velocity[i] + grads[i];
        params[i] -= rate * state.velocity[i];
    }
}

}  // namespace icebeem
