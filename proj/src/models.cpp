#include "dverge/models.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dverge/rng.hpp"

DVERGE_NAMESPACE_BEGIN

std::string to_string(Architecture arch) {
    switch (arch) {
        case Architecture::MlpSmall: return "mlp-small";
        case Architecture::CnnSmall: return "cnn-small";
        case Architecture::CnnResidual: return "cnn-residual";
    }
    return "unknown";
}

std::string to_string(Activation act) { return act == Activation::Relu ? "relu" : "leaky-relu"; }

Architecture parse_architecture(const std::string& name) {
    if (name == "mlp-small") return Architecture::MlpSmall;
    if (name == "cnn-small") return Architecture::CnnSmall;
    if (name == "cnn-residual") return Architecture::CnnResidual;
    throw std::invalid_argument("unknown architecture '" + name + "'");
}

Activation parse_activation(const std::string& name) {
    if (name == "relu") return Activation::Relu;
    if (name == "leaky-relu") return Activation::LeakyRelu;
    throw std::invalid_argument("unknown activation '" + name + "'");
}

std::string to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::Dense: return "dense";
        case LayerKind::Conv: return "conv";
        case LayerKind::MeanPool: return "meanpool";
        case LayerKind::Flatten: return "flatten";
        case LayerKind::Residual: return "residual";
    }
    return "unknown";
}

LayerKind parse_layer_kind(const std::string& name) {
    if (name == "dense") return LayerKind::Dense;
    if (name == "conv") return LayerKind::Conv;
    if (name == "meanpool") return LayerKind::MeanPool;
    if (name == "flatten") return LayerKind::Flatten;
    if (name == "residual") return LayerKind::Residual;
    throw std::invalid_argument("unknown layer kind '" + name + "'");
}

std::vector<LayerSpec> architecture_layers(const ModelSpec& spec) {
    const std::size_t w = spec.width;
    if (w == 0) throw std::invalid_argument("width multiplier must be positive");
    if (spec.classes < 2) throw std::invalid_argument("class count must be at least 2");

    auto conv = [](std::size_t out, std::size_t stride) {
        LayerSpec l;
        l.kind = LayerKind::Conv;
        l.out = out;
        l.kernel = 3;
        l.stride = stride;
        l.padding = 1;
        l.activation = true;
        l.tap = true;
        return l;
    };
    auto dense = [](std::size_t out, bool act) {
        LayerSpec l;
        l.kind = LayerKind::Dense;
        l.out = out;
        l.activation = act;
        l.tap = true;
        return l;
    };
    LayerSpec flatten;
    flatten.kind = LayerKind::Flatten;
    LayerSpec pool;
    pool.kind = LayerKind::MeanPool;
    pool.window = 2;
    pool.tap = true;

    switch (spec.arch) {
        case Architecture::MlpSmall:
            return {flatten, dense(64 * w, true), dense(32 * w, true), dense(spec.classes, false)};
        case Architecture::CnnSmall:
        case Architecture::CnnResidual: {
            if (spec.input_shape.size() != 3 || spec.input_shape[1] % 4 != 0 || spec.input_shape[2] % 4 != 0) {
                throw std::invalid_argument("convolutional architectures need a [C,H,W] input with H,W divisible by 4");
            }
            std::vector<LayerSpec> layers{conv(8 * w, 1), conv(16 * w, 2)};
            if (spec.arch == Architecture::CnnResidual) {
                LayerSpec res = conv(16 * w, 1);
                res.kind = LayerKind::Residual;
                layers.push_back(res);
            }
            layers.push_back(pool);
            layers.push_back(flatten);
            layers.push_back(dense(spec.classes, false));
            return layers;
        }
    }
    throw std::invalid_argument("unknown architecture");
}

// ---------------------------------------------------------------------------

LayeredModel::LayeredModel(std::string id, Shape input_shape, std::size_t classes, Activation activation,
                           std::vector<LayerSpec> layers, std::uint64_t seed)
    : id_(std::move(id)),
      input_shape_(std::move(input_shape)),
      classes_(classes),
      activation_(activation),
      layers_(std::move(layers)),
      seed_(seed) {
    build_graph();
}

void LayeredModel::build_graph() {
    Rng rng(seed_);
    input_node_ = graph_.leaf("input", true);
    NodeId h = input_node_;
    Shape shape = input_shape_;  // per-sample shape

    auto init_param = [&](const std::string& name, Shape pshape, Scalar bound) {
        Tensor t(std::move(pshape));
        for (auto& v : t.values()) v = rng.uniform(-bound, bound);
        params_.emplace(name, std::move(t));
        return graph_.leaf(name, true);
    };
    auto activate = [&](NodeId x) {
        return activation_ == Activation::Relu ? graph_.relu(x) : graph_.leaky_relu(x, kLeakySlope);
    };

    for (std::size_t k = 0; k < layers_.size(); ++k) {
        const LayerSpec& layer = layers_[k];
        const std::string prefix = "layer" + std::to_string(k) + ".";
        NodeId pre = h;
        switch (layer.kind) {
            case LayerKind::Dense: {
                if (shape.size() != 1) {
                    throw std::invalid_argument("layer " + std::to_string(k) + ": dense needs a flat input; add a flatten layer");
                }
                const std::size_t fan_in = shape[0];
                const Scalar wb = std::sqrt(Scalar(6) / static_cast<Scalar>(fan_in));
                const Scalar bb = Scalar(1) / std::sqrt(static_cast<Scalar>(fan_in));
                NodeId w = init_param(prefix + "weight", {layer.out, fan_in}, wb);
                NodeId b = init_param(prefix + "bias", {layer.out}, bb);
                pre = graph_.dense(h, w, b);
                shape = {layer.out};
                break;
            }
            case LayerKind::Conv:
            case LayerKind::Residual: {
                if (shape.size() != 3) throw std::invalid_argument("layer " + std::to_string(k) + ": conv needs [C,H,W]");
                const std::size_t ch = shape[0], kk = layer.kernel;
                if (layer.kind == LayerKind::Residual && (layer.out != ch || layer.stride != 1 || 2 * layer.padding + 1 != kk)) {
                    throw std::invalid_argument("layer " + std::to_string(k) + ": residual block must preserve shape");
                }
                const std::size_t fan_in = ch * kk * kk;
                const Scalar wb = std::sqrt(Scalar(6) / static_cast<Scalar>(fan_in));
                const Scalar bb = Scalar(1) / std::sqrt(static_cast<Scalar>(fan_in));
                NodeId w = init_param(prefix + "weight", {layer.out, ch, kk, kk}, wb);
                NodeId b = init_param(prefix + "bias", {layer.out}, bb);
                pre = graph_.conv2d(h, w, b, layer.stride, layer.padding);
                if (layer.kind == LayerKind::Residual) pre = graph_.add(pre, h);
                const std::size_t oh = (shape[1] + 2 * layer.padding - kk) / layer.stride + 1;
                const std::size_t ow = (shape[2] + 2 * layer.padding - kk) / layer.stride + 1;
                shape = {layer.out, oh, ow};
                break;
            }
            case LayerKind::MeanPool: {
                if (shape.size() != 3 || shape[1] % layer.window != 0 || shape[2] % layer.window != 0) {
                    throw std::invalid_argument("layer " + std::to_string(k) + ": mean pool window does not divide input");
                }
                pre = graph_.mean_pool(h, layer.window);
                shape = {shape[0], shape[1] / layer.window, shape[2] / layer.window};
                break;
            }
            case LayerKind::Flatten:
                pre = graph_.flatten(h);
                shape = {shape_numel(shape)};
                break;
        }
        if (layer.tap) taps_.push_back(pre);
        h = layer.activation ? activate(pre) : pre;
    }
    if (shape.size() != 1 || shape[0] != classes_) {
        throw std::invalid_argument("model output shape " + shape_to_string(shape) + " does not match " +
                                    std::to_string(classes_) + " classes");
    }
    logits_node_ = h;
}

std::size_t LayeredModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
}

std::vector<std::string> LayeredModel::parameter_names() const {
    std::vector<std::string> names;
    for (const auto& [name, t] : params_) names.push_back(name);
    return names;
}

void LayeredModel::check_input(const Tensor& x) const {
    if (x.rank() != input_shape_.size() + 1 || !std::equal(input_shape_.begin(), input_shape_.end(), x.shape().begin() + 1)) {
        throw std::invalid_argument("model '" + id_ + "': input shape " + shape_to_string(x.shape()) +
                                    " does not match [B]+" + shape_to_string(input_shape_));
    }
}

void LayeredModel::check_tap(std::size_t l) const {
    if (l < 1 || l > taps_.size()) {
        throw std::out_of_range("model '" + id_ + "': tap index " + std::to_string(l) + " outside [1, " +
                                std::to_string(taps_.size()) + "]");
    }
}

const Tensor& LayeredModel::forward(const Tensor& x) {
    check_input(x);
    last_input_ = x;
    Bindings b;
    b.bind("input", last_input_);
    for (const auto& [name, t] : params_) b.bind(name, t);
    last_output_.reset();
    const Tensor& out = graph_.evaluate(b, logits_node_);
    last_output_ = logits_node_;
    return out;
}

const Tensor& LayeredModel::forward_tap(const Tensor& x, std::size_t l) {
    check_tap(l);
    check_input(x);
    last_input_ = x;
    Bindings b;
    b.bind("input", last_input_);
    for (const auto& [name, t] : params_) b.bind(name, t);
    last_output_.reset();
    const Tensor& out = graph_.evaluate(b, taps_[l - 1]);
    last_output_ = taps_[l - 1];
    return out;
}

TapOutput LayeredModel::forward_with_tap(const Tensor& x, std::size_t l) {
    check_tap(l);
    TapOutput out;
    out.logits = forward(x);
    out.tap = graph_.value(taps_[l - 1]);
    return out;
}

ModelGrads LayeredModel::backward(const Tensor& seed, GradTarget target) {
    if (!last_output_) throw std::logic_error("model '" + id_ + "': backward before forward");
    std::vector<std::string> wrt;
    if (target != GradTarget::Parameters) wrt.push_back("input");
    if (target != GradTarget::Input) {
        for (const auto& [name, t] : params_) wrt.push_back(name);
    }
    Gradients g = graph_.backward(*last_output_, seed, wrt);
    ModelGrads out;
    if (target != GradTarget::Parameters) out.input = std::move(g.at("input"));
    if (target != GradTarget::Input) {
        for (const auto& [name, t] : params_) {
            auto it = g.find(name);
            out.params.emplace(name, it != g.end() ? std::move(it->second) : Tensor(t.shape()));
        }
    }
    return out;
}

LayeredModel build_model(const ModelSpec& spec, std::string id) {
    LayeredModel model(std::move(id), spec.input_shape, spec.classes, spec.activation, architecture_layers(spec),
                       spec.seed);
    model.set_spec(spec);
    return model;
}

// ---------------------------------------------------------------------------

Ensemble::Ensemble(std::vector<LayeredModel> members) : members_(std::move(members)) {
    if (members_.empty()) throw std::invalid_argument("ensemble needs at least one sub-model");
    for (const auto& m : members_) {
        if (m.input_shape() != members_[0].input_shape() || m.classes() != members_[0].classes()) {
            throw std::invalid_argument("ensemble sub-models must share input shape and class count");
        }
    }
}

Ensemble Ensemble::build(const ModelSpec& spec, std::size_t count) {
    std::vector<LayeredModel> members;
    members.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        ModelSpec s = spec;
        s.seed = derive_seed(spec.seed, i);
        members.push_back(build_model(s, "sub" + std::to_string(i)));
    }
    return Ensemble(std::move(members));
}

Tensor softmax_rows(const Tensor& logits) {
    if (logits.rank() != 2) throw std::invalid_argument("softmax_rows expects [rows, classes]");
    Tensor out(logits.shape());
    const std::size_t c = logits.dim(1);
    for (std::size_t r = 0; r < logits.dim(0); ++r) {
        const Scalar* src = logits.raw() + r * c;
        Scalar* dst = out.raw() + r * c;
        const Scalar m = *std::max_element(src, src + c);
        Scalar z = 0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(src[j] - m);
        for (std::size_t j = 0; j < c; ++j) dst[j] = std::exp(src[j] - m) / z;
    }
    return out;
}

std::vector<std::size_t> argmax_rows(const Tensor& scores) {
    if (scores.rank() != 2) throw std::invalid_argument("argmax_rows expects [rows, classes]");
    std::vector<std::size_t> labels(scores.dim(0));
    const std::size_t c = scores.dim(1);
    for (std::size_t r = 0; r < labels.size(); ++r) {
        const Scalar* row = scores.raw() + r * c;
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j) {
            if (row[j] > row[best]) best = j;
        }
        labels[r] = best;
    }
    return labels;
}

Prediction predict(LayeredModel& model, const Tensor& x) {
    Prediction p;
    p.prob = softmax_rows(model.forward(x));
    p.labels = argmax_rows(p.prob);
    return p;
}

Prediction ensemble_predict(Ensemble& ensemble, const Tensor& x) {
    if (ensemble.empty()) throw std::invalid_argument("ensemble_predict: empty ensemble");
    return predict_mean(ensemble.members(), x);
}

Prediction predict_mean(std::span<LayeredModel> models, const Tensor& x) {
    if (models.empty()) throw std::invalid_argument("predict_mean: no models");
    std::vector<Tensor> probs;
    probs.reserve(models.size());
    for (auto& m : models) probs.push_back(softmax_rows(m.forward(x)));
    Prediction p;
    p.prob = Tensor(probs[0].shape());
    const Scalar inv = Scalar(1) / static_cast<Scalar>(probs.size());
    std::vector<Scalar> column(probs.size());
    for (std::size_t i = 0; i < p.prob.size(); ++i) {
        for (std::size_t k = 0; k < probs.size(); ++k) column[k] = probs[k][i];
        std::sort(column.begin(), column.end());
        Scalar acc = 0;
        for (Scalar v : column) acc += v;
        p.prob[i] = acc * inv;
    }
    p.labels = argmax_rows(p.prob);
    return p;
}

DVERGE_NAMESPACE_END
