#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "tsmiwae/random.hpp"
#include "tsmiwae/tensor.hpp"

namespace tsmiwae {

// A named parameter tensor living outside any tape.
struct Variable {
    Shape shape;
    std::vector<double> value;

    bool operator==(const Variable&) const = default;
};

using GradMap = std::map<std::string, std::vector<double>>;

// Named parameter set. std::map keeps iteration deterministic, which the
// optimizer and serialization rely on. Parameter groups are identified by
// name prefix ("enc.", "dec.", "prior.", "mis.", "cls.", "gru.").
struct ParamStore {
    std::map<std::string, Variable> vars;

    Variable& add(const std::string& name, Shape shape, std::vector<double> value) {
        if (numel(shape) != static_cast<long long>(value.size()))
            throw ContractError("ParamStore::add: value count does not match shape for " + name);
        auto [it, inserted] = vars.emplace(name, Variable{std::move(shape), std::move(value)});
        if (!inserted) throw ContractError("ParamStore::add: duplicate parameter " + name);
        return it->second;
    }

    Variable& at(const std::string& name) {
        auto it = vars.find(name);
        if (it == vars.end()) throw ContractError("ParamStore: unknown parameter " + name);
        return it->second;
    }
    const Variable& at(const std::string& name) const {
        auto it = vars.find(name);
        if (it == vars.end()) throw ContractError("ParamStore: unknown parameter " + name);
        return it->second;
    }
    bool contains(const std::string& name) const { return vars.count(name) != 0; }

    size_t scalar_count() const {
        size_t n = 0;
        for (const auto& [k, v] : vars) n += v.value.size();
        return n;
    }

    std::vector<std::string> names_with_prefix(const std::string& prefix) const {
        std::vector<std::string> out;
        for (const auto& [k, v] : vars)
            if (k.rfind(prefix, 0) == 0) out.push_back(k);
        return out;
    }

    bool operator==(const ParamStore&) const = default;
};

// Binds ParamStore variables onto one tape for a forward/backward pass. Each
// variable gets exactly one leaf node per pass so gradient contributions from
// every use accumulate in one place.
class ParamCtx {
public:
    ParamCtx(Tape& tape, const ParamStore& store) : tape_(&tape), store_(&store) {}

    Tensor operator()(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        const Variable& v = store_->at(name);
        Tensor t = tape_->leaf(v.shape, v.value);
        bound_.emplace(name, t);
        return t;
    }

    // Gradients after Tape::backward. Every parameter of the store gets an
    // entry; parameters that never entered the graph (or were unreachable
    // from the loss) report exactly zero.
    GradMap grads() const {
        GradMap g;
        for (const auto& [name, v] : store_->vars) {
            auto it = bound_.find(name);
            if (it == bound_.end())
                g.emplace(name, std::vector<double>(v.value.size(), 0.0));
            else
                g.emplace(name, tape_->grad_of(it->second));
        }
        return g;
    }

private:
    Tape* tape_;
    const ParamStore* store_;
    std::map<std::string, Tensor> bound_;
};

// ---------------------------------------------------------------------------
// Deterministic initializers. Draws are keyed by parameter name so adding or
// removing one parameter never shifts another's initial values.
// ---------------------------------------------------------------------------

inline void init_xavier(ParamStore& store, const std::string& name, Shape shape, int fan_in, int fan_out,
                        uint64_t seed) {
    RngStream rng = derive_stream(seed, "init/" + name);
    double bound = std::sqrt(6.0 / (fan_in + fan_out));
    std::vector<double> v(numel(shape));
    for (double& x : v) x = rng.uniform(-bound, bound);
    store.add(name, std::move(shape), std::move(v));
}

inline void init_const(ParamStore& store, const std::string& name, Shape shape, double value) {
    store.add(name, std::move(shape), std::vector<double>(numel(shape), value));
}

inline void init_zeros(ParamStore& store, const std::string& name, Shape shape) {
    init_const(store, name, std::move(shape), 0.0);
}

}  // namespace tsmiwae
