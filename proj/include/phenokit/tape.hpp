#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "phenokit/tensor.hpp"

namespace phenokit {

// Reverse-mode tape. Nodes are appended in evaluation order, so inputs always
// precede outputs and a reverse index walk is a reverse topological order.
// The tape owns every value and every gradient buffer; Var is a cheap handle.
template <typename T>
class Tape {
  public:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;  // allocated during backward() for nodes that need it
        std::vector<int> parents;
        std::function<void(Tape&, int)> backward;  // (tape, own id)
        const char* op = "leaf";
        bool requires_grad = false;
        bool grad_ready = false;
    };

    int leaf(Tensor<T> value, bool requires_grad, const char* name = "leaf") {
        check_finite(value, name);
        Node n;
        n.value = std::move(value);
        n.op = name;
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    int make(const char* op, Tensor<T> value, std::vector<int> parents,
             std::function<void(Tape&, int)> backward) {
        check_finite(value, op);
        Node n;
        n.value = std::move(value);
        n.parents = std::move(parents);
        n.op = op;
        for (int p : n.parents)
            if (node(p).requires_grad) n.requires_grad = true;
        if (n.requires_grad) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    Tensor<T>& val(int id) { return node(id).value; }
    const Tensor<T>& val(int id) const { return node(id).value; }

    // Gradient of the last backward() target w.r.t. node id. Zero tensor for
    // leaves the loss does not reach.
    const Tensor<T>& grad(int id) {
        Node& n = node(id);
        if (!n.grad_ready) {
            n.grad = Tensor<T>(n.value.shape, T(0));
            n.grad_ready = true;
        }
        return n.grad;
    }

    // Accumulates g into the node's gradient buffer; no-op if the node does
    // not require grad. Used by op backward rules.
    void accum(int id, const Tensor<T>& g) {
        Node& n = node(id);
        if (!n.requires_grad) return;
        if (!n.grad_ready) {
            n.grad = Tensor<T>(n.value.shape, T(0));
            n.grad_ready = true;
        }
        if (g.shape != n.grad.shape)
            throw InvariantError(std::string("gradient shape mismatch at '") + n.op + "': " +
                                 shape_str(g.shape) + " vs " + shape_str(n.grad.shape));
        for (std::int64_t i = 0; i < g.numel(); ++i) n.grad[i] += g[i];
    }

    void backward(int loss_id) {
        if (backward_done_)
            throw InvariantError("backward() called twice on the same tape without reset");
        Node& loss = node(loss_id);
        if (loss.value.numel() != 1)
            throw InvariantError("backward() target must be a scalar, got shape " +
                                 shape_str(loss.value.shape));
        backward_done_ = true;

        std::vector<char> reachable(nodes_.size(), 0);
        std::vector<int> stack{loss_id};
        reachable[static_cast<std::size_t>(loss_id)] = 1;
        while (!stack.empty()) {
            const int id = stack.back();
            stack.pop_back();
            for (int p : node(id).parents) {
                if (!reachable[static_cast<std::size_t>(p)]) {
                    reachable[static_cast<std::size_t>(p)] = 1;
                    stack.push_back(p);
                }
            }
        }

        if (loss.requires_grad) {
            loss.grad = Tensor<T>(loss.value.shape, T(1));
            loss.grad_ready = true;
            for (int id = loss_id; id >= 0; --id) {
                Node& n = node(id);
                if (!reachable[static_cast<std::size_t>(id)] || !n.requires_grad || !n.backward)
                    continue;
                n.backward(*this, id);
                check_finite(n.grad, n.op);
            }
        }
    }

    void reset_backward() {
        backward_done_ = false;
        for (auto& n : nodes_) {
            n.grad = Tensor<T>();
            n.grad_ready = false;
        }
    }

    std::size_t size() const { return nodes_.size(); }

  private:
    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;

    const Tensor<T>& val() const { return tape->val(id); }
    const Shape& shape() const { return tape->val(id).shape; }
    std::int64_t dim(int i) const { return tape->val(id).dim(i); }
    std::int64_t numel() const { return tape->val(id).numel(); }
};

template <typename T>
Var<T> make_leaf(Tape<T>& tape, Tensor<T> value, bool requires_grad, const char* name = "leaf") {
    return Var<T>{&tape, tape.leaf(std::move(value), requires_grad, name)};
}

}  // namespace phenokit
