#pragma once

#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

#include "polyssm/tensor.hpp"

namespace polyssm {

/// Trainable array with a gradient accumulator of identical shape.
template <class T>
struct Parameter {
    Parameter(std::string name_, Tensor<T> value_)
        : name(std::move(name_)), value(std::move(value_)), grad(value.shape()) {}

    void zero_grad() { grad.fill(T{0}); }

    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
};

template <class T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <class T>
class Var {
public:
    Var() = default;
    Var(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

    const Tensor<T>& value() const { return graph_->value(id_); }
    const Shape& shape() const { return value().shape(); }
    std::size_t id() const { return id_; }
    Graph<T>& graph() const { return *graph_; }
    bool valid() const { return graph_ != nullptr; }

private:
    Graph<T>* graph_ = nullptr;
    std::size_t id_ = 0;
};

/// Define-by-run tape. Nodes are appended in execution order, which is a
/// topological order, and backward walks them in reverse.
template <class T>
class Graph {
public:
    /// Accumulates d(loss)/d(inputs) given d(loss)/d(output).
    using Backward = std::function<void(Graph&, const Tensor<T>& grad_out)>;

    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t size() const { return nodes_.size(); }

    Var<T> input(Tensor<T> value) {
        check_finite(value, "input");
        Node& n = nodes_.emplace_back();
        n.op = "input";
        n.owned = std::move(value);
        return Var<T>(this, nodes_.size() - 1);
    }

    /// Leaf bound to `p`; backward adds into p.grad. The parameter must
    /// outlive the graph and must not be mutated while the graph is alive.
    Var<T> param(Parameter<T>& p) {
        check_finite(p.value, p.name);
        Node& n = nodes_.emplace_back();
        n.op = "param";
        n.external = &p.value;
        n.param = &p;
        n.requires_grad = grad_enabled_;
        return Var<T>(this, nodes_.size() - 1);
    }

    Var<T> record(std::string_view op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                  Backward backward) {
        return record(op, std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
                      std::move(backward));
    }

    Var<T> record(std::string_view op, Tensor<T> value, std::span<const Var<T>> inputs,
                  Backward backward) {
        check_finite(value, op);
        bool needs = false;
        for (const Var<T>& in : inputs) {
            if (&in.graph() != this) {
                throw std::logic_error(std::string(op) + ": operand belongs to another graph");
            }
            needs = needs || nodes_[in.id()].requires_grad;
        }
        Node& n = nodes_.emplace_back();
        n.op = op;
        n.owned = std::move(value);
        n.requires_grad = grad_enabled_ && needs;
        if (n.requires_grad) n.backward = std::move(backward);
        return Var<T>(this, nodes_.size() - 1);
    }

    const Tensor<T>& value(std::size_t id) const {
        const Node& n = nodes_[id];
        return n.external ? *n.external : n.owned;
    }

    bool requires_grad(const Var<T>& v) const { return nodes_[v.id()].requires_grad; }

    /// Gradient accumulator for `v`, zero-initialized on first access
    /// within a backward pass.
    Tensor<T>& grad(const Var<T>& v) {
        Node& n = nodes_[v.id()];
        if (!n.has_grad) {
            n.grad = Tensor<T>(value(v.id()).shape());
            n.has_grad = true;
        }
        return n.grad;
    }

    void backward(const Var<T>& loss) {
        if (&loss.graph() != this) throw std::logic_error("backward: loss from another graph");
        if (loss.value().numel() != 1) {
            throw DimensionError("backward needs a scalar loss, got shape " +
                                 to_string(loss.shape()));
        }
        for (Node& n : nodes_) {
            n.has_grad = false;
            n.grad = Tensor<T>();
        }
        grad(loss).fill(T{1});
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || !n.has_grad) continue;
            if (n.backward) n.backward(*this, n.grad);
            if (n.param != nullptr) {
                auto dst = n.param->grad.data();
                auto src = n.grad.data();
                for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
            }
        }
    }

private:
    struct Node {
        std::string_view op;
        Tensor<T> owned;
        const Tensor<T>* external = nullptr;
        Parameter<T>* param = nullptr;
        bool requires_grad = false;
        bool has_grad = false;
        Backward backward;
        Tensor<T> grad;
    };

    static void check_finite(const Tensor<T>& t, std::string_view what) {
        if (!t.all_finite()) {
            throw NumericError("non-finite value produced by " + std::string(what) +
                               " (shape " + to_string(t.shape()) + ")");
        }
    }

    bool grad_enabled_;
    std::deque<Node> nodes_;
};

}  // namespace polyssm
