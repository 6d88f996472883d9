#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "asgk/errors.hpp"
#include "asgk/rng.hpp"

namespace asgk {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

namespace detail {
inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

// Inference scope: ops created while a NoGradGuard is alive record no tape.
inline int& no_grad_depth() {
    thread_local int depth = 0;
    return depth;
}
} // namespace detail

struct NoGradGuard {
    NoGradGuard() { ++detail::no_grad_depth(); }
    ~NoGradGuard() { --detail::no_grad_depth(); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth() == 0; }

struct TensorNode {
    Shape dims;
    std::vector<double> data;
    std::vector<double> grad; // sized iff requires_grad
    bool requires_grad = false;
    std::uint64_t id = detail::next_node_id();
    // Tape edges. Creation order is a topological order: parents always
    // precede children, so ids sort the backward sweep.
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

// Value-semantic handle over a shared autodiff node. Copies alias the same
// storage, as in every tape-based framework.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape dims) {
        auto n = std::make_shared<TensorNode>();
        n->data.assign(shape_numel(dims), 0.0);
        n->dims = std::move(dims);
        return Tensor(std::move(n));
    }

    static Tensor full(Shape dims, double value) {
        Tensor t = zeros(std::move(dims));
        std::fill(t.node_->data.begin(), t.node_->data.end(), value);
        return t;
    }

    static Tensor from(Shape dims, std::vector<double> values) {
        if (shape_numel(dims) != values.size())
            throw ShapeError("data length " + std::to_string(values.size()) +
                             " does not match dims " + shape_str(dims));
        auto n = std::make_shared<TensorNode>();
        n->dims = std::move(dims);
        n->data = std::move(values);
        return Tensor(std::move(n));
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    // Glorot-uniform leaf parameter; biases and embeddings use zeros()/full().
    static Tensor glorot(Shape dims, SeededRng& rng) {
        std::size_t fan_in = dims.size() >= 2 ? dims[dims.size() - 1] : dims[0];
        std::size_t fan_out = dims.size() >= 2 ? dims[dims.size() - 2] : dims[0];
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        Tensor t = zeros(std::move(dims));
        for (double& v : t.node_->data) v = rng.uniform(-limit, limit);
        t.set_requires_grad(true);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& dims() const { return node_->dims; }
    std::size_t rank() const { return node_->dims.size(); }
    std::size_t numel() const { return node_->data.size(); }
    std::size_t dim(std::size_t i) const { return node_->dims[i]; }

    std::span<const double> values() const { return node_->data; }
    std::span<double> mutable_values() const { return node_->data; }

    double value() const {
        if (numel() != 1) throw ContractError("value() requires a scalar, got " + shape_str(dims()));
        return node_->data[0];
    }

    double at(std::size_t flat) const { return node_->data[flat]; }

    bool requires_grad() const { return node_->requires_grad; }

    void set_requires_grad(bool rg) {
        node_->requires_grad = rg;
        if (rg) node_->ensure_grad();
        else node_->grad.clear();
    }

    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() const { return node_->grad; }

    void zero_grad() const {
        if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    std::shared_ptr<TensorNode> node() const { return node_; }
    TensorNode* raw() const { return node_.get(); }

private:
    std::shared_ptr<TensorNode> node_;
};

namespace detail {

inline void check_finite(const TensorNode& n, const char* op) {
    for (double v : n.data) {
        if (!std::isfinite(v))
            throw NumericError(std::string(op) + " produced a non-finite value");
    }
}

// Builds an op output. Parents that cannot receive gradient are still kept
// alive through the closure captures, but only grad-requiring parents are
// recorded on the tape.
inline Tensor make_op(Shape dims, std::vector<double> data, const char* op,
                      const std::vector<Tensor>& inputs,
                      std::function<void(TensorNode&)> backward_fn) {
    auto n = std::make_shared<TensorNode>();
    n->dims = std::move(dims);
    n->data = std::move(data);
    check_finite(*n, op);
    if (grad_enabled()) {
        bool needs = false;
        for (const Tensor& t : inputs) needs = needs || t.requires_grad();
        if (needs) {
            n->requires_grad = true;
            n->ensure_grad();
            for (const Tensor& t : inputs)
                if (t.requires_grad()) n->parents.push_back(t.node());
            n->backward_fn = std::move(backward_fn);
        }
    }
    return Tensor(std::move(n));
}

} // namespace detail

// Reverse sweep from a scalar loss. Gradients accumulate (+=) into every
// requires_grad node reached through the tape; leaves without requires_grad
// are untouched. The tape is released afterwards so intermediate nodes free
// as soon as the caller drops them.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw ContractError("backward requires a scalar loss, got " + shape_str(loss.dims()));
    if (!loss.requires_grad()) return;

    // Shared ownership keeps every reachable node alive through the whole
    // sweep: dropping tape edges below must not free nodes mid-iteration.
    std::vector<std::shared_ptr<TensorNode>> order;
    std::unordered_set<const TensorNode*> seen;
    std::vector<std::shared_ptr<TensorNode>> stack{loss.node()};
    seen.insert(loss.raw());
    while (!stack.empty()) {
        std::shared_ptr<TensorNode> n = std::move(stack.back());
        stack.pop_back();
        for (auto& p : n->parents) {
            if (seen.insert(p.get()).second) stack.push_back(p);
        }
        order.push_back(std::move(n));
    }
    std::sort(order.begin(), order.end(),
              [](const std::shared_ptr<TensorNode>& a, const std::shared_ptr<TensorNode>& b) {
                  return a->id > b->id;
              });

    loss.raw()->grad[0] += 1.0;
    for (auto& n : order) {
        if (n->backward_fn) n->backward_fn(*n);
    }
    // Free the pass's tape; parameter grads persist on their leaves. Edges are
    // cleared before `order` releases the nodes, so destruction never recurses
    // down long parent chains.
    for (auto& n : order) {
        n->backward_fn = nullptr;
        n->parents.clear();
    }
}

} // namespace asgk
