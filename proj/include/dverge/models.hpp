#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dverge/graph.hpp"
#include "dverge/optim.hpp"
#include "dverge/tensor.hpp"

DVERGE_NAMESPACE_BEGIN

enum class Architecture { MlpSmall, CnnSmall, CnnResidual };
enum class Activation { Relu, LeakyRelu };

std::string to_string(Architecture arch);
std::string to_string(Activation act);
Architecture parse_architecture(const std::string& name);
Activation parse_activation(const std::string& name);

enum class LayerKind { Dense, Conv, MeanPool, Flatten, Residual };

std::string to_string(LayerKind kind);
LayerKind parse_layer_kind(const std::string& name);

/// One stage of a layered classifier. A parameterized layer (dense, conv,
/// residual) produces a pre-activation value; `tap` exposes that value for
/// feature distillation and `activation` applies the model's nonlinearity
/// after it.
struct LayerSpec {
    LayerKind kind = LayerKind::Dense;
    std::size_t out = 0;  // units (dense) or channels (conv/residual)
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t padding = 1;
    std::size_t window = 2;  // mean pool
    bool activation = false;
    bool tap = false;

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ModelSpec {
    Architecture arch = Architecture::CnnSmall;
    Shape input_shape{1, 16, 16};
    std::size_t classes = 10;
    std::size_t width = 1;
    Activation activation = Activation::Relu;
    std::uint64_t seed = 0;

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Layer list for a named architecture.
///   mlp-small:    flatten, dense(64w)+act, dense(32w)+act, dense(C)           3 taps
///   cnn-small:    conv(8w,3x3)+act, conv(16w,3x3,stride 2)+act, meanpool(2),
///                 flatten, dense(C)                                           4 taps
///   cnn-residual: cnn-small with a 16w-channel additive skip block after the
///                 second conv                                                 5 taps
std::vector<LayerSpec> architecture_layers(const ModelSpec& spec);

struct TapOutput {
    Tensor logits;
    Tensor tap;
};

struct ModelGrads {
    Tensor input;
    ParamMap params;
};

enum class GradTarget { Input, Parameters, Both };

/// Feed-forward classifier over a Graph. Tap indices are 1-based and ordered
/// from the input; the last tap of every built-in architecture is the logit
/// layer.
class LayeredModel {
public:
    LayeredModel(std::string id, Shape input_shape, std::size_t classes, Activation activation,
                 std::vector<LayerSpec> layers, std::uint64_t seed);

    const std::string& id() const { return id_; }
    void set_id(std::string id) { id_ = std::move(id); }
    const Shape& input_shape() const { return input_shape_; }
    std::size_t classes() const { return classes_; }
    Activation activation() const { return activation_; }
    const std::vector<LayerSpec>& layers() const { return layers_; }
    std::uint64_t seed() const { return seed_; }
    /// Set when the model was built from a named architecture.
    const std::optional<ModelSpec>& spec() const { return spec_; }
    void set_spec(ModelSpec spec) { spec_ = std::move(spec); }

    std::size_t tap_count() const { return taps_.size(); }
    ParamMap& parameters() { return params_; }
    const ParamMap& parameters() const { return params_; }
    std::size_t parameter_count() const;
    std::vector<std::string> parameter_names() const;

    /// Evaluates the logits for a batch [B, input_shape...].
    const Tensor& forward(const Tensor& x);
    /// Evaluates only as far as tap `l`.
    const Tensor& forward_tap(const Tensor& x, std::size_t l);
    TapOutput forward_with_tap(const Tensor& x, std::size_t l);

    /// Back-propagates `seed` from the output of the most recent forward()
    /// or forward_tap() call.
    ModelGrads backward(const Tensor& seed, GradTarget target);

    void check_input(const Tensor& x) const;

private:
    void build_graph();
    void check_tap(std::size_t l) const;

    std::string id_;
    Shape input_shape_;
    std::size_t classes_;
    Activation activation_;
    std::vector<LayerSpec> layers_;
    std::uint64_t seed_;
    std::optional<ModelSpec> spec_;

    Graph graph_;
    ParamMap params_;
    NodeId input_node_ = 0;
    NodeId logits_node_ = 0;
    std::vector<NodeId> taps_;

    Tensor last_input_;
    std::optional<NodeId> last_output_;
};

/// Builds a model for a named architecture with fan-in scaled uniform
/// initialization drawn from `spec.seed`.
LayeredModel build_model(const ModelSpec& spec, std::string id = "model");

/// Averaged-probability ensemble of sub-models sharing input shape and class
/// count.
class Ensemble {
public:
    Ensemble() = default;
    explicit Ensemble(std::vector<LayeredModel> members);

    /// N sub-models from one spec; member i is seeded with derive_seed(seed, i).
    static Ensemble build(const ModelSpec& spec, std::size_t count);

    std::size_t size() const { return members_.size(); }
    bool empty() const { return members_.empty(); }
    LayeredModel& operator[](std::size_t i) { return members_.at(i); }
    const LayeredModel& operator[](std::size_t i) const { return members_.at(i); }
    std::vector<LayeredModel>& members() { return members_; }
    const std::vector<LayeredModel>& members() const { return members_; }
    const Shape& input_shape() const { return members_.at(0).input_shape(); }
    std::size_t classes() const { return members_.at(0).classes(); }

private:
    std::vector<LayeredModel> members_;
};

struct Prediction {
    Tensor prob;
    std::vector<std::size_t> labels;
};

Tensor softmax_rows(const Tensor& logits);
/// Per-row argmax; ties resolve to the lowest class index.
std::vector<std::size_t> argmax_rows(const Tensor& scores);

Prediction predict(LayeredModel& model, const Tensor& x);
/// Mean softmax over a set of models (one model gives its own softmax).
Prediction predict_mean(std::span<LayeredModel> models, const Tensor& x);
/// Mean of sub-model softmax vectors. The mean is accumulated in sorted order
/// per element, so it does not depend on member order.
Prediction ensemble_predict(Ensemble& ensemble, const Tensor& x);

DVERGE_NAMESPACE_END
