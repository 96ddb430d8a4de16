#include "dverge/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "blas.hpp"

DVERGE_NAMESPACE_BEGIN

namespace {

std::string describe(NodeId id, OpKind kind) { return "node " + std::to_string(id) + " (" + op_name(kind) + ")"; }

// Valid output columns [lo, hi) for kernel offset kj: those whose input
// column ow * stride + kj - pad lies inside [0, width).
std::pair<std::size_t, std::size_t> valid_range(std::size_t kj, std::size_t stride, std::size_t pad, std::size_t width,
                                                std::size_t out_w) {
    std::size_t lo = 0;
    while (lo < out_w && lo * stride + kj < pad) ++lo;
    std::size_t hi = out_w;
    while (hi > lo && (hi - 1) * stride + kj >= pad + width) --hi;
    return {lo, hi};
}

// cols row r starts at cols + r * row_stride and holds out_h * out_w entries.
void im2col(const Scalar* x, std::size_t channels, std::size_t height, std::size_t width, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, Scalar* cols,
            std::size_t row_stride) {
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
                Scalar* dst = cols + ((c * k + ki) * k + kj) * row_stride;
                const auto [lo, hi] = valid_range(kj, stride, pad, width, out_w);
                for (std::size_t oh = 0; oh < out_h; ++oh) {
                    Scalar* row = dst + oh * out_w;
                    const std::size_t ih_shifted = oh * stride + ki;
                    if (ih_shifted < pad || ih_shifted - pad >= height) {
                        std::fill_n(row, out_w, Scalar(0));
                        continue;
                    }
                    // src[ow] is the input column ow * stride + kj - pad
                    const Scalar* src = x + (c * height + ih_shifted - pad) * width + kj;
                    for (std::size_t ow = 0; ow < lo; ++ow) row[ow] = 0;
                    if (stride == 1) {
                        for (std::size_t ow = lo; ow < hi; ++ow) row[ow] = src[ow - pad];
                    } else {
                        for (std::size_t ow = lo; ow < hi; ++ow) row[ow] = src[ow * stride - pad];
                    }
                    for (std::size_t ow = hi; ow < out_w; ++ow) row[ow] = 0;
                }
            }
        }
    }
}

void col2im(const Scalar* cols, std::size_t channels, std::size_t height, std::size_t width, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, Scalar* dx,
            std::size_t row_stride) {
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
                const Scalar* src = cols + ((c * k + ki) * k + kj) * row_stride;
                const auto [lo, hi] = valid_range(kj, stride, pad, width, out_w);
                for (std::size_t oh = 0; oh < out_h; ++oh) {
                    const std::size_t ih_shifted = oh * stride + ki;
                    if (ih_shifted < pad || ih_shifted - pad >= height) continue;
                    Scalar* dst = dx + (c * height + ih_shifted - pad) * width + kj;
                    const Scalar* row = src + oh * out_w;
                    if (stride == 1) {
                        for (std::size_t ow = lo; ow < hi; ++ow) dst[ow - pad] += row[ow];
                    } else {
                        for (std::size_t ow = lo; ow < hi; ++ow) dst[ow * stride - pad] += row[ow];
                    }
                }
            }
        }
    }
}

}  // namespace

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Dense: return "dense";
        case OpKind::Conv2d: return "conv2d";
        case OpKind::Relu: return "relu";
        case OpKind::LeakyRelu: return "leaky_relu";
        case OpKind::MeanPool: return "mean_pool";
        case OpKind::Flatten: return "flatten";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Scale: return "scale";
        case OpKind::Softmax: return "softmax";
        case OpKind::Log: return "log";
        case OpKind::LogSoftmax: return "log_softmax";
        case OpKind::Sum: return "sum";
        case OpKind::RowSum: return "row_sum";
        case OpKind::L2NormSq: return "l2_norm_sq";
    }
    return "unknown";
}

GraphError::GraphError(NodeId node, const std::string& message)
    : std::runtime_error("graph node " + std::to_string(node) + ": " + message), node_(node) {}

Bindings& Bindings::bind(std::string name, const Tensor& value) {
    for (auto& [n, p] : entries_) {
        if (n == name) {
            p = &value;
            return *this;
        }
    }
    entries_.emplace_back(std::move(name), &value);
    return *this;
}

const Tensor* Bindings::find(const std::string& name) const {
    for (const auto& [n, p] : entries_) {
        if (n == name) return p;
    }
    return nullptr;
}

// ---------------------------------------------------------------------------
// construction

Graph& Graph::operator=(const Graph& other) {
    if (this != &other) {
        nodes_ = other.nodes_;
        reset_state();
    }
    return *this;
}

Graph& Graph::operator=(Graph&& other) noexcept {
    nodes_ = std::move(other.nodes_);
    reset_state();
    return *this;
}

void Graph::reset_state() {
    owned_.clear();
    values_.clear();
    aux_.clear();
    fresh_.clear();
    grads_.clear();
    touched_.clear();
}

NodeId Graph::push(Node node) {
    for (NodeId in : node.inputs) check_input(in);
    nodes_.push_back(std::move(node));
    return nodes_.size() - 1;
}

void Graph::check_input(NodeId id) const {
    if (id >= nodes_.size()) {
        throw GraphError(nodes_.size(), "input node " + std::to_string(id) + " does not exist yet");
    }
}

NodeId Graph::leaf(std::string name, bool requires_grad) {
    for (const auto& n : nodes_) {
        if (n.kind == OpKind::Leaf && n.name == name) {
            throw GraphError(nodes_.size(), "duplicate leaf name '" + name + "'");
        }
    }
    Node n;
    n.kind = OpKind::Leaf;
    n.name = std::move(name);
    n.requires_grad = requires_grad;
    return push(std::move(n));
}

NodeId Graph::dense(NodeId x, NodeId weight, NodeId bias) { return push(op(OpKind::Dense, {x, weight, bias})); }

NodeId Graph::conv2d(NodeId x, NodeId weight, NodeId bias, std::size_t stride, std::size_t padding) {
    if (stride == 0) throw GraphError(nodes_.size(), "conv2d stride must be positive");
    Node n = op(OpKind::Conv2d, {x, weight, bias});
    n.stride = stride;
    n.padding = padding;
    return push(std::move(n));
}

NodeId Graph::relu(NodeId x) { return push(op(OpKind::Relu, {x})); }

NodeId Graph::leaky_relu(NodeId x, Scalar slope) {
    Node n = op(OpKind::LeakyRelu, {x});
    n.factor = slope;
    return push(std::move(n));
}

NodeId Graph::mean_pool(NodeId x, std::size_t window) {
    if (window == 0) throw GraphError(nodes_.size(), "mean_pool window must be positive");
    Node n = op(OpKind::MeanPool, {x});
    n.window = window;
    return push(std::move(n));
}

NodeId Graph::flatten(NodeId x) { return push(op(OpKind::Flatten, {x})); }
NodeId Graph::add(NodeId a, NodeId b) { return push(op(OpKind::Add, {a, b})); }
NodeId Graph::sub(NodeId a, NodeId b) { return push(op(OpKind::Sub, {a, b})); }
NodeId Graph::mul(NodeId a, NodeId b) { return push(op(OpKind::Mul, {a, b})); }

NodeId Graph::scale(NodeId x, Scalar factor) {
    Node n = op(OpKind::Scale, {x});
    n.factor = factor;
    return push(std::move(n));
}

NodeId Graph::softmax(NodeId x) { return push(op(OpKind::Softmax, {x})); }
NodeId Graph::log(NodeId x) { return push(op(OpKind::Log, {x})); }
NodeId Graph::log_softmax(NodeId x) { return push(op(OpKind::LogSoftmax, {x})); }
NodeId Graph::sum(NodeId x) { return push(op(OpKind::Sum, {x})); }
NodeId Graph::row_sum(NodeId x) { return push(op(OpKind::RowSum, {x})); }
NodeId Graph::l2_norm_sq(NodeId x) { return push(op(OpKind::L2NormSq, {x})); }

std::vector<std::string> Graph::leaf_names() const {
    std::vector<std::string> names;
    for (const auto& n : nodes_) {
        if (n.kind == OpKind::Leaf) names.push_back(n.name);
    }
    return names;
}

NodeId Graph::find_leaf(const std::string& name) const {
    for (NodeId id = 0; id < nodes_.size(); ++id) {
        if (nodes_[id].kind == OpKind::Leaf && nodes_[id].name == name) return id;
    }
    throw std::out_of_range("graph: no leaf named '" + name + "'");
}

bool Graph::requires_grad(const std::string& leaf_name) const { return nodes_[find_leaf(leaf_name)].requires_grad; }

// ---------------------------------------------------------------------------
// forward

const Tensor& Graph::evaluate(const Bindings& bindings, NodeId output) {
    if (output >= nodes_.size()) throw GraphError(output, "output node does not exist");
    const std::size_t n = nodes_.size();
    owned_.resize(n);
    aux_.resize(n);
    values_.assign(n, nullptr);
    fresh_.assign(n, false);

    std::vector<bool> needed(n, false);
    needed[output] = true;
    for (NodeId id = output + 1; id-- > 0;) {
        if (!needed[id]) continue;
        for (NodeId in : nodes_[id].inputs) needed[in] = true;
    }
    for (NodeId id = 0; id <= output; ++id) {
        if (!needed[id]) continue;
        forward_node(id, bindings);
        fresh_[id] = true;
    }
    return *values_[output];
}

const Tensor& Graph::value(NodeId node) const {
    if (!has_value(node)) throw GraphError(node, "no value; node was not part of the last evaluation");
    return *values_[node];
}

bool Graph::has_value(NodeId node) const { return node < fresh_.size() && fresh_[node]; }

void Graph::forward_node(NodeId id, const Bindings& bindings) {
    const Node& node = nodes_[id];
    if (node.kind == OpKind::Leaf) {
        const Tensor* bound = bindings.find(node.name);
        if (bound == nullptr) throw GraphError(id, "leaf '" + node.name + "' is not bound");
        if (!bound->all_finite()) throw GraphError(id, "leaf '" + node.name + "' holds non-finite values");
        values_[id] = bound;
        return;
    }

    auto in = [&](std::size_t k) -> const Tensor& { return *values_[node.inputs[k]]; };
    auto fail = [&](const std::string& what) { throw GraphError(id, describe(id, node.kind) + ": " + what); };
    Tensor& out = owned_[id];

    switch (node.kind) {
        case OpKind::Dense: {
            const Tensor& x = in(0);
            const Tensor& w = in(1);
            const Tensor& b = in(2);
            if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || w.dim(1) != x.dim(1) || b.dim(0) != w.dim(0)) {
                fail("shape mismatch x" + shape_to_string(x.shape()) + " w" + shape_to_string(w.shape()) + " b" +
                     shape_to_string(b.shape()));
            }
            const std::size_t rows = x.dim(0), fan_in = x.dim(1), fan_out = w.dim(0);
            out.reset({rows, fan_out});
            for (std::size_t r = 0; r < rows; ++r) std::copy(b.raw(), b.raw() + fan_out, out.raw() + r * fan_out);
            if (rows > 0 && fan_in > 0) {
                detail::gemm(false, true, static_cast<int>(rows), static_cast<int>(fan_out), static_cast<int>(fan_in),
                             1, x.raw(), static_cast<int>(fan_in), w.raw(), static_cast<int>(fan_in), 1, out.raw(),
                             static_cast<int>(fan_out));
            }
            break;
        }
        case OpKind::Conv2d: {
            const Tensor& x = in(0);
            const Tensor& w = in(1);
            const Tensor& b = in(2);
            if (x.rank() != 4 || w.rank() != 4 || b.rank() != 1 || w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3) ||
                b.dim(0) != w.dim(0)) {
                fail("shape mismatch x" + shape_to_string(x.shape()) + " w" + shape_to_string(w.shape()) + " b" +
                     shape_to_string(b.shape()));
            }
            const std::size_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), wd = x.dim(3);
            const std::size_t oc = w.dim(0), k = w.dim(2), s = node.stride, p = node.padding;
            if (h + 2 * p < k || wd + 2 * p < k) fail("kernel larger than padded input");
            const std::size_t oh = (h + 2 * p - k) / s + 1, ow = (wd + 2 * p - k) / s + 1;
            const std::size_t ckk = ch * k * k, plane = oh * ow;
            // One GEMM for the whole batch: cols is [ckk, batch * plane].
            const std::size_t span = batch * plane;
            Tensor& cols = aux_[id];
            cols.reset({ckk, span});
            for (std::size_t n = 0; n < batch; ++n) {
                im2col(x.raw() + n * ch * h * wd, ch, h, wd, k, s, p, oh, ow, cols.raw() + n * plane, span);
            }
            std::vector<Scalar>& tmp = scratch_a_;
            tmp.assign(oc * span, Scalar(0));
            if (span > 0) {
                detail::gemm(false, false, static_cast<int>(oc), static_cast<int>(span), static_cast<int>(ckk), 1,
                             w.raw(), static_cast<int>(ckk), cols.raw(), static_cast<int>(span), 0, tmp.data(),
                             static_cast<int>(span));
            }
            out.reset({batch, oc, oh, ow});
            for (std::size_t n = 0; n < batch; ++n) {
                for (std::size_t o = 0; o < oc; ++o) {
                    const Scalar* src = tmp.data() + o * span + n * plane;
                    Scalar* dst = out.raw() + (n * oc + o) * plane;
                    for (std::size_t j = 0; j < plane; ++j) dst[j] = src[j] + b[o];
                }
            }
            break;
        }
        case OpKind::Relu:
        case OpKind::LeakyRelu: {
            const Tensor& x = in(0);
            const Scalar slope = node.kind == OpKind::Relu ? Scalar(0) : node.factor;
            out.reset(x.shape());
            for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0 ? x[i] : slope * x[i];
            break;
        }
        case OpKind::MeanPool: {
            const Tensor& x = in(0);
            const std::size_t k = node.window;
            if (x.rank() != 4 || x.dim(2) % k != 0 || x.dim(3) % k != 0) {
                fail("input " + shape_to_string(x.shape()) + " not divisible by window " + std::to_string(k));
            }
            const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), wd = x.dim(3);
            const std::size_t oh = h / k, ow = wd / k;
            const Scalar inv = Scalar(1) / static_cast<Scalar>(k * k);
            out.reset({x.dim(0), x.dim(1), oh, ow});
            for (std::size_t pl = 0; pl < planes; ++pl) {
                const Scalar* src = x.raw() + pl * h * wd;
                Scalar* dst = out.raw() + pl * oh * ow;
                for (std::size_t i = 0; i < oh; ++i) {
                    for (std::size_t j = 0; j < ow; ++j) {
                        Scalar acc = 0;
                        for (std::size_t a = 0; a < k; ++a) {
                            for (std::size_t c = 0; c < k; ++c) acc += src[(i * k + a) * wd + j * k + c];
                        }
                        dst[i * ow + j] = acc * inv;
                    }
                }
            }
            break;
        }
        case OpKind::Flatten: {
            const Tensor& x = in(0);
            if (x.rank() < 1) fail("cannot flatten a rank-0 tensor");
            out.reset({x.dim(0), x.rows() == 0 ? 0 : x.size() / x.dim(0)});
            std::copy(x.data().begin(), x.data().end(), out.data().begin());
            break;
        }
        case OpKind::Add:
        case OpKind::Sub:
        case OpKind::Mul: {
            const Tensor& a = in(0);
            const Tensor& b = in(1);
            if (a.shape() != b.shape()) {
                fail("operand shapes differ " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
            }
            out.reset(a.shape());
            if (node.kind == OpKind::Add) {
                for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
            } else if (node.kind == OpKind::Sub) {
                for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
            } else {
                for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
            }
            break;
        }
        case OpKind::Scale: {
            const Tensor& x = in(0);
            out.reset(x.shape());
            for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * node.factor;
            break;
        }
        case OpKind::Softmax:
        case OpKind::LogSoftmax: {
            const Tensor& x = in(0);
            if (x.rank() != 2 || x.dim(1) == 0) fail("expects [rows, classes], got " + shape_to_string(x.shape()));
            out.reset(x.shape());
            const std::size_t c = x.dim(1);
            for (std::size_t r = 0; r < x.dim(0); ++r) {
                const Scalar* src = x.raw() + r * c;
                Scalar* dst = out.raw() + r * c;
                const Scalar m = *std::max_element(src, src + c);
                Scalar z = 0;
                for (std::size_t j = 0; j < c; ++j) z += std::exp(src[j] - m);
                if (node.kind == OpKind::Softmax) {
                    for (std::size_t j = 0; j < c; ++j) dst[j] = std::exp(src[j] - m) / z;
                } else {
                    const Scalar lz = std::log(z);
                    for (std::size_t j = 0; j < c; ++j) dst[j] = src[j] - m - lz;
                }
            }
            break;
        }
        case OpKind::Log: {
            const Tensor& x = in(0);
            out.reset(x.shape());
            for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::log(x[i]);
            break;
        }
        case OpKind::Sum: {
            const Tensor& x = in(0);
            Scalar acc = 0;
            for (Scalar v : x.data()) acc += v;
            out = Tensor::scalar(acc);
            break;
        }
        case OpKind::RowSum:
        case OpKind::L2NormSq: {
            const Tensor& x = in(0);
            if (x.rank() < 1) fail("expects a batched input, got rank 0");
            const std::size_t rows = x.dim(0), width = x.row_size();
            out.reset({rows});
            for (std::size_t r = 0; r < rows; ++r) {
                Scalar acc = 0;
                const Scalar* src = x.raw() + r * width;
                if (node.kind == OpKind::RowSum) {
                    for (std::size_t j = 0; j < width; ++j) acc += src[j];
                } else {
                    for (std::size_t j = 0; j < width; ++j) acc += src[j] * src[j];
                }
                out[r] = acc;
            }
            break;
        }
        case OpKind::Leaf:
            break;
    }
    if (!out.all_finite()) fail("non-finite output");
    values_[id] = &out;
}

// ---------------------------------------------------------------------------
// backward

Gradients Graph::backward(NodeId output, const Tensor& seed, std::span<const std::string> wrt) {
    if (output >= nodes_.size() || !has_value(output)) {
        throw GraphError(output, "backward called before forward evaluation of this node");
    }
    if (seed.shape() != values_[output]->shape()) {
        throw GraphError(output, "seed shape " + shape_to_string(seed.shape()) + " does not match output " +
                                     shape_to_string(values_[output]->shape()));
    }

    const std::size_t n = nodes_.size();
    std::vector<bool> target(n, false);
    std::vector<NodeId> target_ids;
    if (wrt.empty()) {
        for (NodeId id = 0; id < n; ++id) {
            if (nodes_[id].kind == OpKind::Leaf && nodes_[id].requires_grad) {
                target[id] = true;
                target_ids.push_back(id);
            }
        }
    } else {
        for (const auto& name : wrt) {
            const NodeId id = find_leaf(name);
            if (!nodes_[id].requires_grad) throw GraphError(id, "leaf '" + name + "' does not require grad");
            target[id] = true;
            target_ids.push_back(id);
        }
    }

    // live: evaluated and depends on at least one target leaf
    std::vector<bool> live(n, false);
    for (NodeId id = 0; id <= output; ++id) {
        if (!fresh_[id]) continue;
        if (nodes_[id].kind == OpKind::Leaf) {
            live[id] = target[id];
        } else {
            for (NodeId in : nodes_[id].inputs) live[id] = live[id] || live[in];
        }
    }

    grads_.resize(n);
    touched_.assign(n, false);
    grads_[output] = seed;
    touched_[output] = true;
    for (NodeId id = output + 1; id-- > 0;) {
        if (!live[id] || !touched_[id] || nodes_[id].kind == OpKind::Leaf) continue;
        backward_node(id, live);
    }

    Gradients result;
    for (NodeId id : target_ids) {
        if (!fresh_[id]) continue;
        if (touched_[id]) {
            result.emplace(nodes_[id].name, std::move(grads_[id]));
            grads_[id] = Tensor();
        } else {
            result.emplace(nodes_[id].name, Tensor(values_[id]->shape()));
        }
    }
    return result;
}

Tensor& Graph::grad_slot(NodeId id) {
    if (!touched_[id]) {
        grads_[id].reset(values_[id]->shape());
        touched_[id] = true;
    }
    return grads_[id];
}

void Graph::backward_node(NodeId id, const std::vector<bool>& live) {
    const Node& node = nodes_[id];
    const Tensor& dy = grads_[id];
    auto in = [&](std::size_t k) -> const Tensor& { return *values_[node.inputs[k]]; };
    auto wants = [&](std::size_t k) { return live[node.inputs[k]]; };
    auto slot = [&](std::size_t k) -> Tensor& { return grad_slot(node.inputs[k]); };

    switch (node.kind) {
        case OpKind::Dense: {
            const Tensor& x = in(0);
            const Tensor& w = in(1);
            const int rows = static_cast<int>(x.dim(0)), fan_in = static_cast<int>(x.dim(1)),
                      fan_out = static_cast<int>(w.dim(0));
            if (rows == 0) break;
            if (wants(0)) {
                detail::gemm(false, false, rows, fan_in, fan_out, 1, dy.raw(), fan_out, w.raw(), fan_in, 1,
                             slot(0).raw(), fan_in);
            }
            if (wants(1)) {
                detail::gemm(true, false, fan_out, fan_in, rows, 1, dy.raw(), fan_out, x.raw(), fan_in, 1,
                             slot(1).raw(), fan_in);
            }
            if (wants(2)) {
                Tensor& db = slot(2);
                for (int r = 0; r < rows; ++r) {
                    for (int o = 0; o < fan_out; ++o) db[static_cast<std::size_t>(o)] += dy[static_cast<std::size_t>(r * fan_out + o)];
                }
            }
            break;
        }
        case OpKind::Conv2d: {
            const Tensor& x = in(0);
            const Tensor& w = in(1);
            const Tensor& cols = aux_[id];
            const std::size_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), wd = x.dim(3);
            const std::size_t oc = w.dim(0), k = w.dim(2);
            const std::size_t oh = dy.dim(2), ow = dy.dim(3);
            const std::size_t ckk = ch * k * k, plane = oh * ow;
            const std::size_t span = batch * plane;
            if (span == 0) break;
            // dy permuted to [oc, batch * plane] to match the cols layout
            std::vector<Scalar>& g = scratch_a_;
            g.resize(oc * span);
            for (std::size_t n = 0; n < batch; ++n) {
                for (std::size_t o = 0; o < oc; ++o) {
                    std::copy_n(dy.raw() + (n * oc + o) * plane, plane, g.data() + o * span + n * plane);
                }
            }
            if (wants(1)) {
                detail::gemm(false, true, static_cast<int>(oc), static_cast<int>(ckk), static_cast<int>(span), 1,
                             g.data(), static_cast<int>(span), cols.raw(), static_cast<int>(span), 1, slot(1).raw(),
                             static_cast<int>(ckk));
            }
            if (wants(2)) {
                Tensor& db = slot(2);
                for (std::size_t o = 0; o < oc; ++o) {
                    Scalar acc = 0;
                    for (std::size_t j = 0; j < span; ++j) acc += g[o * span + j];
                    db[o] += acc;
                }
            }
            if (wants(0)) {
                std::vector<Scalar>& dcols = scratch_b_;
                dcols.resize(ckk * span);
                detail::gemm(true, false, static_cast<int>(ckk), static_cast<int>(span), static_cast<int>(oc), 1,
                             w.raw(), static_cast<int>(ckk), g.data(), static_cast<int>(span), 0, dcols.data(),
                             static_cast<int>(span));
                Tensor& dx = slot(0);
                for (std::size_t n = 0; n < batch; ++n) {
                    col2im(dcols.data() + n * plane, ch, h, wd, k, node.stride, node.padding, oh, ow,
                           dx.raw() + n * ch * h * wd, span);
                }
            }
            break;
        }
        case OpKind::Relu:
        case OpKind::LeakyRelu: {
            const Tensor& x = in(0);
            const Scalar slope = node.kind == OpKind::Relu ? Scalar(0) : node.factor;
            Tensor& dx = slot(0);
            for (std::size_t i = 0; i < x.size(); ++i) dx[i] += x[i] > 0 ? dy[i] : slope * dy[i];
            break;
        }
        case OpKind::MeanPool: {
            const Tensor& x = in(0);
            const std::size_t k = node.window;
            const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), wd = x.dim(3);
            const std::size_t oh = h / k, ow = wd / k;
            const Scalar inv = Scalar(1) / static_cast<Scalar>(k * k);
            Tensor& dx = slot(0);
            for (std::size_t pl = 0; pl < planes; ++pl) {
                const Scalar* g = dy.raw() + pl * oh * ow;
                Scalar* dst = dx.raw() + pl * h * wd;
                for (std::size_t i = 0; i < h; ++i) {
                    for (std::size_t j = 0; j < wd; ++j) dst[i * wd + j] += g[(i / k) * ow + j / k] * inv;
                }
            }
            break;
        }
        case OpKind::Flatten: {
            Tensor& dx = slot(0);
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
            break;
        }
        case OpKind::Add:
        case OpKind::Sub: {
            const Scalar sign = node.kind == OpKind::Add ? Scalar(1) : Scalar(-1);
            if (wants(0)) {
                Tensor& da = slot(0);
                for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i];
            }
            if (wants(1)) {
                Tensor& db = slot(1);
                for (std::size_t i = 0; i < db.size(); ++i) db[i] += sign * dy[i];
            }
            break;
        }
        case OpKind::Mul: {
            const Tensor& a = in(0);
            const Tensor& b = in(1);
            if (wants(0)) {
                Tensor& da = slot(0);
                for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i] * b[i];
            }
            if (wants(1)) {
                Tensor& db = slot(1);
                for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[i] * a[i];
            }
            break;
        }
        case OpKind::Scale: {
            Tensor& dx = slot(0);
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += node.factor * dy[i];
            break;
        }
        case OpKind::Softmax: {
            const Tensor& y = *values_[id];
            const std::size_t rows = y.dim(0), c = y.dim(1);
            Tensor& dx = slot(0);
            for (std::size_t r = 0; r < rows; ++r) {
                Scalar dot = 0;
                for (std::size_t j = 0; j < c; ++j) dot += dy[r * c + j] * y[r * c + j];
                for (std::size_t j = 0; j < c; ++j) dx[r * c + j] += y[r * c + j] * (dy[r * c + j] - dot);
            }
            break;
        }
        case OpKind::LogSoftmax: {
            const Tensor& y = *values_[id];
            const std::size_t rows = y.dim(0), c = y.dim(1);
            Tensor& dx = slot(0);
            for (std::size_t r = 0; r < rows; ++r) {
                Scalar total = 0;
                for (std::size_t j = 0; j < c; ++j) total += dy[r * c + j];
                for (std::size_t j = 0; j < c; ++j) dx[r * c + j] += dy[r * c + j] - std::exp(y[r * c + j]) * total;
            }
            break;
        }
        case OpKind::Log: {
            const Tensor& x = in(0);
            Tensor& dx = slot(0);
            for (std::size_t i = 0; i < x.size(); ++i) dx[i] += dy[i] / x[i];
            break;
        }
        case OpKind::Sum: {
            Tensor& dx = slot(0);
            const Scalar g = dy[0];
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g;
            break;
        }
        case OpKind::RowSum:
        case OpKind::L2NormSq: {
            const Tensor& x = in(0);
            const std::size_t rows = x.dim(0), width = x.row_size();
            Tensor& dx = slot(0);
            for (std::size_t r = 0; r < rows; ++r) {
                const Scalar g = dy[r];
                for (std::size_t j = 0; j < width; ++j) {
                    dx[r * width + j] += node.kind == OpKind::RowSum ? g : Scalar(2) * x[r * width + j] * g;
                }
            }
            break;
        }
        case OpKind::Leaf:
            break;
    }
}

DVERGE_NAMESPACE_END
