#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dverge/tensor.hpp"

DVERGE_NAMESPACE_BEGIN

using NodeId = std::size_t;

enum class OpKind {
    Leaf,
    Dense,       // x[B,in] * W[out,in]^T + b[out]
    Conv2d,      // cross-correlation, x[B,C,H,W], W[O,C,k,k], b[O]
    Relu,
    LeakyRelu,
    MeanPool,    // non-overlapping window over the two trailing axes
    Flatten,     // [B, ...] -> [B, prod(...)]
    Add,
    Sub,
    Mul,
    Scale,
    Softmax,     // row-wise over [B, C]
    Log,
    LogSoftmax,  // row-wise over [B, C]
    Sum,         // all elements -> rank-0
    RowSum,      // [B, ...] -> [B]
    L2NormSq,    // [B, ...] -> [B], sum of squares per row
};

const char* op_name(OpKind kind);

inline constexpr Scalar kLeakySlope = Scalar(0.1);

/// Raised for malformed graphs, shape mismatches and non-finite values.
/// Carries the id of the node that failed.
class GraphError : public std::runtime_error {
public:
    GraphError(NodeId node, const std::string& message);
    NodeId node() const { return node_; }

private:
    NodeId node_;
};

/// Non-owning map from leaf name to tensor. Bound tensors must outlive the
/// evaluate/backward pair that uses them.
class Bindings {
public:
    Bindings& bind(std::string name, const Tensor& value);
    const Tensor* find(const std::string& name) const;

private:
    std::vector<std::pair<std::string, const Tensor*>> entries_;
};

using Gradients = std::map<std::string, Tensor>;

/// Static computation graph with reverse-mode differentiation. Nodes are
/// appended in topological order; shapes are resolved at evaluation time, so
/// one graph serves every batch size.
///
/// A graph caches the intermediates of its most recent evaluation. Copy the
/// graph to evaluate it from several threads.
class Graph {
public:
    Graph() = default;
    // Copies and moves carry the structure only; cached values refer to
    // tensors owned elsewhere and are dropped.
    Graph(const Graph& other) : nodes_(other.nodes_) {}
    Graph(Graph&& other) noexcept : nodes_(std::move(other.nodes_)) {}
    Graph& operator=(const Graph& other);
    Graph& operator=(Graph&& other) noexcept;
    ~Graph() = default;

    NodeId leaf(std::string name, bool requires_grad = false);

    NodeId dense(NodeId x, NodeId weight, NodeId bias);
    NodeId conv2d(NodeId x, NodeId weight, NodeId bias, std::size_t stride = 1, std::size_t padding = 0);
    NodeId relu(NodeId x);
    NodeId leaky_relu(NodeId x, Scalar slope = kLeakySlope);
    NodeId mean_pool(NodeId x, std::size_t window);
    NodeId flatten(NodeId x);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId x, Scalar factor);
    NodeId softmax(NodeId x);
    NodeId log(NodeId x);
    NodeId log_softmax(NodeId x);
    NodeId sum(NodeId x);
    NodeId row_sum(NodeId x);
    NodeId l2_norm_sq(NodeId x);

    /// Runs every ancestor of `output` and returns its value. Throws
    /// GraphError on unbound leaves, shape mismatches or non-finite results.
    const Tensor& evaluate(const Bindings& bindings, NodeId output);

    /// Value of a node computed by the most recent evaluate().
    const Tensor& value(NodeId node) const;
    bool has_value(NodeId node) const;

    /// Propagates `seed` (shaped like the value of `output`) back to the
    /// leaves. Returns gradients for the requested leaves, or for every
    /// requires_grad leaf when `wrt` is empty.
    Gradients backward(NodeId output, const Tensor& seed, std::span<const std::string> wrt = {});

    std::size_t size() const { return nodes_.size(); }
    OpKind kind(NodeId node) const { return nodes_.at(node).kind; }
    const std::vector<NodeId>& inputs(NodeId node) const { return nodes_.at(node).inputs; }
    std::vector<std::string> leaf_names() const;
    bool requires_grad(const std::string& leaf_name) const;
    NodeId find_leaf(const std::string& name) const;

private:
    struct Node {
        OpKind kind = OpKind::Leaf;
        std::vector<NodeId> inputs;
        std::string name;
        bool requires_grad = false;
        Scalar factor = 0;
        std::size_t stride = 1;
        std::size_t padding = 0;
        std::size_t window = 1;
    };

    static Node op(OpKind kind, std::vector<NodeId> inputs) {
        Node n;
        n.kind = kind;
        n.inputs = std::move(inputs);
        return n;
    }
    NodeId push(Node node);
    void check_input(NodeId id) const;
    void forward_node(NodeId id, const Bindings& bindings);
    void backward_node(NodeId id, const std::vector<bool>& live);
    Tensor& grad_slot(NodeId id);
    void reset_state();

    std::vector<Node> nodes_;
    // Per-evaluation state.
    std::vector<Tensor> owned_;
    std::vector<const Tensor*> values_;
    std::vector<Tensor> aux_;  // im2col buffers for conv nodes
    std::vector<bool> fresh_;
    std::vector<Tensor> grads_;
    std::vector<bool> touched_;
    std::vector<Scalar> scratch_a_;
    std::vector<Scalar> scratch_b_;
};

DVERGE_NAMESPACE_END
