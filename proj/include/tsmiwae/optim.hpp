#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "tsmiwae/params.hpp"

namespace tsmiwae {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    bool operator==(const AdamWConfig&) const = default;
};

// Decoupled-weight-decay Adam. Moment buffers are keyed like the ParamStore
// and always match their parameter's shape.
struct AdamWState {
    AdamWConfig cfg;
    long step = 0;
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;

    bool operator==(const AdamWState&) const = default;
};

inline void adamw_step(AdamWState& state, ParamStore& params, const GradMap& grads) {
    state.step += 1;
    double bc1 = 1.0 - std::pow(state.cfg.beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(state.cfg.beta2, static_cast<double>(state.step));
    for (auto& [name, var] : params.vars) {
        auto git = grads.find(name);
        if (git == grads.end()) throw ContractError("adamw_step: missing gradient for " + name);
        const std::vector<double>& g = git->second;
        if (g.size() != var.value.size()) throw ContractError("adamw_step: gradient shape mismatch for " + name);
        for (double gi : g)
            if (!std::isfinite(gi)) throw NumericError("adamw_step: non-finite gradient for parameter " + name);
        std::vector<double>& m = state.m.try_emplace(name, var.value.size(), 0.0).first->second;
        std::vector<double>& v = state.v.try_emplace(name, var.value.size(), 0.0).first->second;
        for (size_t i = 0; i < var.value.size(); ++i) {
            m[i] = state.cfg.beta1 * m[i] + (1.0 - state.cfg.beta1) * g[i];
            v[i] = state.cfg.beta2 * v[i] + (1.0 - state.cfg.beta2) * g[i] * g[i];
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            double w = var.value[i];
            var.value[i] = w - state.cfg.lr * mhat / (std::sqrt(vhat) + state.cfg.eps) -
                           state.cfg.lr * state.cfg.weight_decay * w;
        }
    }
}

}  // namespace tsmiwae
