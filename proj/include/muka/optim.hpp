#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "muka/mlp.hpp"

namespace muka {

enum class OptimizerKind { sgd, adam };

inline std::string to_string(OptimizerKind k) {
    return k == OptimizerKind::sgd ? "sgd" : "adam";
}

inline OptimizerKind optimizer_from_string(const std::string& s) {
    if (s == "sgd") return OptimizerKind::sgd;
    if (s == "adam") return OptimizerKind::adam;
    throw std::invalid_argument("unknown optimizer: " + s);
}

struct OptimizerState {
    OptimizerKind kind = OptimizerKind::adam;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    long step = 0;
    std::vector<double> m;  // first moment (adam)
    std::vector<double> v;  // second moment (adam)

    static OptimizerState sgd(double lr) {
        OptimizerState s;
        s.kind = OptimizerKind::sgd;
        s.learning_rate = lr;
        return s;
    }

    static OptimizerState adam(double lr, double b1 = 0.9, double b2 = 0.999,
                               double eps = 1e-8) {
        OptimizerState s;
        s.kind = OptimizerKind::adam;
        s.learning_rate = lr;
        s.beta1 = b1;
        s.beta2 = b2;
        s.epsilon = eps;
        return s;
    }

    void validate() const {
        if (!(learning_rate > 0.0))
            throw std::invalid_argument("OptimizerState: learning_rate must be > 0");
    }
};

// In-place parameter update. Moments are allocated lazily on the first adam
// step and must then keep matching the parameter length.
inline void optimizer_step(OptimizerState& state, ParameterSet& params,
                           std::span<const double> grads) {
    state.validate();
    if (grads.size() != params.size())
        throw std::invalid_argument("optimizer_step: gradient length " +
                                    std::to_string(grads.size()) + " != parameter length " +
                                    std::to_string(params.size()));
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!std::isfinite(grads[i]))
            throw std::runtime_error("optimizer_step: non-finite gradient at " +
                                     params.layout.span_name(i) + " (flat index " +
                                     std::to_string(i) + ")");
    }

    state.step += 1;
    if (state.kind == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < grads.size(); ++i)
            params.values[i] -= state.learning_rate * grads[i];
        return;
    }

    if (state.m.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    if (state.m.size() != params.size() || state.v.size() != params.size())
        throw std::invalid_argument("optimizer_step: moment arrays do not match parameters");

    const double b1 = state.beta1, b2 = state.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < grads.size(); ++i) {
        const double g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        params.values[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
}

}  // namespace muka
