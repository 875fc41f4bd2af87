#pragma once

#include "kercnn/tensor.hpp"

#include <functional>
#include <utility>
#include <vector>

namespace kercnn {

// ---------------------------------------------------------------------------
// Reverse-mode autodiff on an append-only tape.
//
//   Tape<T> tape;
//   auto x = tape.leaf(point);              // watched leaf (gets a gradient)
//   auto y = some_op(tape, x, ...);         // ops append nodes
//   tape.backward(y);                       // y must be scalar
//   const Tensor<T>& g = tape.grad(x);
//
// Inputs of a node always have smaller ids than the node itself, so one
// reverse sweep in id order visits every node after all of its consumers.
// Gradients accumulate across fan-out in that fixed order, which keeps
// backward passes bit-deterministic. A tape must not be shared across
// threads; run one tape per thread instead.
// ---------------------------------------------------------------------------

template <typename T>
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, Var<T>)>;

    Var<T> leaf(Tensor<T> value, bool needs_grad = true) {
        return push_node("leaf", std::move(value), needs_grad, {});
    }

    Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

    // Appends an op node. needs_grad is inherited from the inputs; the
    // backward closure runs only when the node received a gradient, and is
    // handed its own var so it can read the accumulated output gradient.
    Var<T> push(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                BackwardFn backward) {
        bool needs = false;
        for (const Var<T>& in : inputs) {
            if (in.id < 0 || in.id >= static_cast<int>(nodes_.size()))
                throw std::invalid_argument(std::string(op) + ": input var not on this tape");
            needs = needs || nodes_[static_cast<std::size_t>(in.id)].needs_grad;
        }
        Var<T> v = push_node(op, std::move(value), needs, std::move(backward));
        return v;
    }

    const Tensor<T>& value(Var<T> v) const { return node(v).value; }

    // Gradient of the last backward() w.r.t. v; zeros if v was never reached.
    const Tensor<T>& grad(Var<T> v) {
        Node& n = node(v);
        ensure_grad(n);
        return n.grad;
    }

    // Accumulation entry point for backward closures.
    void accum(Var<T> v, const Tensor<T>& g) {
        Node& n = node(v);
        if (!n.needs_grad) return;
        if (g.shape() != n.value.shape())
            throw std::invalid_argument("grad accum: shape mismatch");
        ensure_grad(n);
        T* dst = n.grad.data();
        const T* src = g.data();
        for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += src[i];
    }

    // In-place accumulation buffer (zero-initialised on first use) for
    // closures that write large gradients directly, e.g. col2im.
    Tensor<T>* grad_buffer(Var<T> v) {
        Node& n = node(v);
        if (!n.needs_grad) return nullptr;
        ensure_grad(n);
        return &n.grad;
    }

    bool needs_grad(Var<T> v) const { return node(v).needs_grad; }

    void backward(Var<T> root) {
        Node& r = node(root);
        if (r.value.size() != 1)
            throw std::invalid_argument("backward: root must be scalar");
        ensure_grad(r);
        r.grad.flat(0) = T(1);
        sweep(root.id);
    }

    // Preloads gradients on the given vars, then runs one reverse sweep.
    // Used to pull filter gradients out of a hoisted kernel-construction tape.
    void backward_seeded(const std::vector<std::pair<Var<T>, Tensor<T>>>& seeds) {
        int top = -1;
        for (const auto& [v, g] : seeds) {
            accum_seed(v, g);
            top = std::max(top, v.id);
        }
        if (top >= 0) sweep(top);
    }

    std::size_t node_count() const { return nodes_.size(); }

    void set_check_finite(bool on) { check_finite_ = on; }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool grad_live = false;
        bool needs_grad = false;
        const char* op = "";
        BackwardFn backward;
    };

    Var<T> push_node(const char* op, Tensor<T> value, bool needs_grad,
                     BackwardFn backward) {
        if (check_finite_) value.check_finite(op);
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        n.op = op;
        n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var<T>{static_cast<int>(nodes_.size()) - 1};
    }

    Node& node(Var<T> v) {
        if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
            throw std::invalid_argument("invalid var");
        return nodes_[static_cast<std::size_t>(v.id)];
    }
    const Node& node(Var<T> v) const {
        if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
            throw std::invalid_argument("invalid var");
        return nodes_[static_cast<std::size_t>(v.id)];
    }

    void ensure_grad(Node& n) {
        if (!n.grad_live) {
            n.grad = Tensor<T>(n.value.shape());
            n.grad_live = true;
        }
    }

    void accum_seed(Var<T> v, const Tensor<T>& g) {
        Node& n = node(v);
        if (g.shape() != n.value.shape())
            throw std::invalid_argument("backward_seeded: seed shape mismatch");
        ensure_grad(n);
        for (std::size_t i = 0; i < n.grad.size(); ++i) n.grad.flat(i) += g.flat(i);
    }

    void sweep(int from) {
        for (int i = from; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.grad_live || !n.needs_grad || !n.backward) continue;
            n.backward(*this, Var<T>{i});
        }
        if (check_finite_) {
            for (Node& n : nodes_)
                if (n.grad_live) n.grad.check_finite("backward");
        }
    }

    std::vector<Node> nodes_;
    bool check_finite_ = true;
};

// ---------------------------------------------------------------------------
// Central-difference gradient audit.
//
// f builds a scalar-valued graph from a watched leaf. Returns the worst
// relative mismatch between the tape gradient and (f(x+h)-f(x-h))/2h over
// every coordinate; coordinates where both values are below 1e-8 in
// magnitude count as exact (error 0), and the relative denominator is
// floored at 1e-6.
// ---------------------------------------------------------------------------
template <typename T>
double finite_diff_check(const std::function<Var<T>(Tape<T>&, Var<T>)>& f,
                         const Tensor<T>& point, double step) {
    if (step <= 0) throw std::invalid_argument("finite_diff_check: step must be > 0");

    Tape<T> tape;
    Var<T> x = tape.leaf(point);
    Var<T> y = f(tape, x);
    if (tape.value(y).size() != 1)
        throw std::invalid_argument("finite_diff_check: f must return a scalar");
    tape.backward(y);
    const Tensor<T> analytic = tape.grad(x);

    auto eval = [&](const Tensor<T>& p) -> double {
        Tape<T> t;
        Var<T> xi = t.leaf(p, false);
        Var<T> yi = f(t, xi);
        return static_cast<double>(t.value(yi).flat(0));
    };

    Tensor<T> p = point;
    double worst = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const T orig = p.flat(i);
        p.flat(i) = orig + static_cast<T>(step);
        const double fp = eval(p);
        p.flat(i) = orig - static_cast<T>(step);
        const double fm = eval(p);
        p.flat(i) = orig;

        const double fd = (fp - fm) / (2.0 * step);
        const double an = static_cast<double>(analytic.flat(i));
        const double mag = std::max(std::abs(fd), std::abs(an));
        if (mag <= 1e-8) continue;
        worst = std::max(worst, std::abs(fd - an) / std::max(mag, 1e-6));
    }
    return worst;
}

}  // namespace kercnn
