#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dverge/attacks.hpp"
#include "dverge/distill.hpp"
#include "dverge/models.hpp"
#include "dverge/optim.hpp"

DVERGE_NAMESPACE_BEGIN

/// Which tap feature distillation uses. Uniform draws a tap per sample (or per
/// epoch in training); Fixed uses `layer` for every model.
struct LayerPolicy {
    enum class Kind { Uniform, Fixed };
    Kind kind = Kind::Uniform;
    std::size_t layer = 1;

    static LayerPolicy uniform() { return {}; }
    static LayerPolicy fixed(std::size_t l) { return {Kind::Fixed, l}; }
    std::string describe() const;
    /// Tap for a model with `taps` taps given a uniform draw u in [0, 1).
    std::size_t pick(std::size_t taps, double u) const;
};

struct DiversityEstimate {
    std::string model_i;
    std::string model_j;
    double value = 0;
    std::size_t sample_count = 0;
    Scalar epsilon = 0;
    std::string layer_policy;
};

/// Labeled image set used by the estimators below.
struct LabeledSet {
    const Tensor* images = nullptr;
    std::span<const std::size_t> labels;
    std::size_t size() const { return labels.size(); }
};

/// Monte Carlo estimate of half the summed cross-entropy each model suffers on
/// the other's distilled features, scored against the target label. Both
/// directions share the sampled (target, source, layer draw) triples, so the
/// estimate is exactly symmetric in its two model arguments.
DiversityEstimate pairwise_diversity(LayeredModel& fi, LayeredModel& fj, LabeledSet eval, const DistillSpec& distill,
                                     LayerPolicy policy, std::size_t samples, std::uint64_t seed,
                                     std::size_t batch = 128);

/// Mean CE of `model` on each batch's distilled images against the source
/// labels, summed over batches.
double diversity_loss(LayeredModel& model, std::span<const DistilledBatch> others);

struct LossAndGrads {
    double loss = 0;
    ParamMap grads;
};

/// diversity_loss together with its parameter gradient.
LossAndGrads diversity_loss_grad(LayeredModel& model, std::span<const DistilledBatch> others);

/// Mean CE over a batch with the parameter gradient of that mean.
LossAndGrads cross_entropy_grad(LayeredModel& model, const Tensor& x, std::span<const std::size_t> labels);

struct TransferMatrix {
    std::size_t n = 0;
    std::vector<double> values;  // row-major: (i, j) = adversarials of i evaluated on j
    Scalar epsilon = 0;
    std::size_t steps = 0;
    std::size_t restarts = 0;
    std::size_t sample_count = 0;
    std::vector<std::size_t> sample_indices;

    double at(std::size_t i, std::size_t j) const { return values.at(i * n + j); }
    double mean_off_diagonal() const;
};

/// Indices of samples every sub-model classifies correctly.
std::vector<std::size_t> commonly_correct(Ensemble& ensemble, LabeledSet eval, std::size_t batch = 256);

/// Pairwise attack success rates on up to `max_samples` commonly-correct
/// samples (a seeded random subset when more are available). Every row uses
/// the same attack seed.
TransferMatrix transfer_matrix(Ensemble& ensemble, const AttackSpec& spec, LabeledSet eval, std::size_t max_samples,
                               std::uint64_t seed, std::size_t workers = 1);

DVERGE_NAMESPACE_END
