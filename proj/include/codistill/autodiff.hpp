#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "codistill/tensor.hpp"

namespace codistill {

// Handle to a node in a Graph.
struct Var {
    std::size_t id = 0;
};

// Matrix-level reverse-mode autodiff tape.
//
// Nodes are appended in evaluation order; backward() walks them in reverse.
// A node only records a backward closure when at least one input requires a
// gradient, so graphs built purely from constants cost no more than a plain
// forward pass. Parameter leaves reference caller-owned matrices, which must
// outlive the graph.
class Graph {
public:
    using Backward = std::function<void(Graph&, const Matrix& out_grad)>;

    Var constant(Matrix value);
    Var constant_ref(const Matrix& value);
    Var parameter(const Matrix& value);

    const Matrix& value(Var v) const;
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
    /// Gradient accumulated by backward(); an empty matrix if none reached it.
    const Matrix& grad(Var v) const { return nodes_[v.id].grad; }
    /// Adds `g` into the gradient slot of `v` (no-op for constants).
    void accumulate(Var v, const Matrix& g);
    /// Mutable gradient slot, zero-initialized on first use.
    Matrix& grad_slot(Var v);

    std::size_t size() const { return nodes_.size(); }

    /// Seeds d(out)/d(out) = 1 for a 1x1 node and propagates.
    void backward(Var scalar_out);

    /// Generic node: `fn` receives the output gradient and must accumulate into inputs.
    Var custom(Matrix value, std::span<const Var> inputs, Backward fn);

    Var matmul(Var a, Var b);
    Var add(Var a, Var b);
    Var add_bias(Var x, Var bias);
    Var layer_norm(Var x, Var gain, Var bias);
    Var gelu(Var x);
    Var attention(Var q, Var k, Var v, std::size_t heads, bool causal);
    Var gather_rows(Var table, std::span<const int> ids);
    Var slice_rows(Var x, std::size_t begin, std::size_t count);
    /// wa * a + wb * b for 1x1 nodes; a zero weight contributes no gradient.
    Var weighted_sum(Var a, double wa, Var b, double wb);

private:
    struct Node {
        Matrix owned;
        const Matrix* ref = nullptr;
        Matrix grad;
        bool requires_grad = false;
        Backward backward;
    };

    Var push(Node node);

    std::deque<Node> nodes_;
};

}  // namespace codistill
