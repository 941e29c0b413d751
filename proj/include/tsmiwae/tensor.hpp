#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tsmiwae/common.hpp"

namespace tsmiwae {

using Shape = std::vector<int>;

inline long long numel(const Shape& s) {
    long long n = 1;
    for (int d : s) n *= d;
    return n;
}

class Tape;

// Lightweight handle to a node on a Tape. Copying a Tensor copies the handle,
// not the values; all storage lives in the tape.
class Tensor {
public:
    Tensor() = default;

    bool valid() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    int id() const { return node_; }

    const Shape& shape() const;
    std::span<const double> values() const;
    bool requires_grad() const;

    int rows() const { return shape().empty() ? 1 : shape()[0]; }
    int cols() const { return shape().size() < 2 ? 1 : shape()[1]; }
    double item() const;

private:
    friend class Tape;
    Tensor(Tape* t, int node) : tape_(t), node_(node) {}

    Tape* tape_ = nullptr;
    int node_ = -1;
};

// Reverse-mode gradient tape. Nodes are appended in evaluation order, which
// is a topological order of the graph, so the backward sweep is a single
// reverse pass that touches each reachable node exactly once. Adjoint buffers
// of nodes not reachable from the loss stay exactly zero.
//
// A Tape and the tensors built on it are confined to one thread for the
// duration of a forward/backward pass.
class Tape {
public:
    // Called during the reverse sweep with the node's own id; reads the
    // node's adjoint and accumulates into its parents' adjoints.
    using BackwardFn = std::function<void(Tape&, int)>;

    Tensor make(Shape shape, std::vector<double> values, std::vector<int> parents, BackwardFn backward) {
        if (numel(shape) != static_cast<long long>(values.size()))
            throw ContractError("tensor value count does not match shape");
        bool rg = false;
        for (int p : parents)
            if (nodes_[p].requires_grad) rg = true;
        Node n;
        n.shape = std::move(shape);
        n.value = std::move(values);
        n.parents = std::move(parents);
        n.backward = rg ? std::move(backward) : BackwardFn{};
        n.requires_grad = rg;
        nodes_.push_back(std::move(n));
        return Tensor(this, static_cast<int>(nodes_.size()) - 1);
    }

    Tensor constant(Shape shape, std::vector<double> values) {
        if (numel(shape) != static_cast<long long>(values.size()))
            throw ContractError("tensor value count does not match shape");
        Node n;
        n.shape = std::move(shape);
        n.value = std::move(values);
        nodes_.push_back(std::move(n));
        return Tensor(this, static_cast<int>(nodes_.size()) - 1);
    }

    Tensor scalar(double v) { return constant({}, {v}); }

    // Gradient leaf: a parameter entering the graph. Its adjoint is the
    // gradient after backward().
    Tensor leaf(Shape shape, std::span<const double> init) {
        Node n;
        n.shape = std::move(shape);
        n.value.assign(init.begin(), init.end());
        if (numel(n.shape) != static_cast<long long>(n.value.size()))
            throw ContractError("leaf value count does not match shape");
        n.requires_grad = true;
        nodes_.push_back(std::move(n));
        return Tensor(this, static_cast<int>(nodes_.size()) - 1);
    }

    const Shape& shape(int node) const { return nodes_[node].shape; }
    std::span<const double> values(int node) const { return nodes_[node].value; }
    std::span<double> values_mut(int node) { return nodes_[node].value; }
    bool requires_grad(int node) const { return nodes_[node].requires_grad; }

    // Adjoint accumulation buffer for a node (allocated lazily during backward).
    std::span<double> adjoint(int node) {
        Node& n = nodes_[node];
        if (n.adjoint.empty()) n.adjoint.assign(n.value.size(), 0.0);
        return n.adjoint;
    }

    bool has_adjoint(int node) const { return !nodes_[node].adjoint.empty(); }

    // Runs the reverse sweep from a scalar loss. Only nodes that both require
    // gradients and are ancestors of the loss participate.
    void backward(const Tensor& loss) {
        if (loss.tape() != this) throw ContractError("backward: loss from another tape");
        const Node& ln = nodes_[loss.id()];
        if (numel(ln.shape) != 1) throw ContractError("backward: loss must be scalar");
        if (!std::isfinite(ln.value[0])) throw ContractError("backward: loss is not finite");

        std::vector<char> reach(nodes_.size(), 0);
        if (!ln.requires_grad) return;  // loss does not depend on any parameter
        reach[loss.id()] = 1;
        for (int i = loss.id(); i >= 0; --i) {
            if (!reach[i]) continue;
            for (int p : nodes_[i].parents)
                if (nodes_[p].requires_grad) reach[p] = 1;
        }
        adjoint(loss.id())[0] = 1.0;
        for (int i = loss.id(); i >= 0; --i) {
            if (reach[i] && nodes_[i].backward) nodes_[i].backward(*this, i);
        }
    }

    // Gradient of the last backward() with respect to a leaf (zeros if the
    // leaf did not participate).
    std::vector<double> grad_of(const Tensor& t) const {
        const Node& n = nodes_[t.id()];
        if (n.adjoint.empty()) return std::vector<double>(n.value.size(), 0.0);
        return n.adjoint;
    }

    size_t node_count() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

private:
    struct Node {
        Shape shape;
        std::vector<double> value;
        std::vector<double> adjoint;
        std::vector<int> parents;
        BackwardFn backward;
        bool requires_grad = false;
    };

    std::vector<Node> nodes_;
};

inline const Shape& Tensor::shape() const { return tape_->shape(node_); }
inline std::span<const double> Tensor::values() const { return tape_->values(node_); }
inline bool Tensor::requires_grad() const { return tape_->requires_grad(node_); }
inline double Tensor::item() const {
    if (numel(shape()) != 1) throw ContractError("item(): tensor is not a scalar");
    return values()[0];
}

}  // namespace tsmiwae
