#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dverge/models.hpp"
#include "dverge/tensor.hpp"

DVERGE_NAMESPACE_BEGIN

struct DistillSpec {
    Scalar epsilon = Scalar(0.07);
    std::size_t steps = 10;
    Scalar step_size = Scalar(0.007);
    Scalar momentum = 1;
    std::size_t layer = 1;     // 1-based tap index
    bool best_iterate = true;  // false returns the final iterate

    /// Spec with step size epsilon / 10.
    static DistillSpec with_epsilon(Scalar epsilon, std::size_t layer = 1);
    void validate() const;
};

struct DistilledBatch {
    Tensor distilled;
    Tensor sources;
    std::vector<std::size_t> source_labels;
    Tensor targets;
    std::vector<std::size_t> target_labels;
    std::size_t layer = 1;
    std::vector<Scalar> objective_values;  // ||f(x') - f(x)||_2 per row
    std::vector<Scalar> initial_values;    // same at x' = x_s
};

/// Finds, per row, a point within epsilon of the source image whose tap
/// representation approaches that of the target image. Starts at the source,
/// with no random start, so `seed` only tags the run.
DistilledBatch distill_features(LayeredModel& model, const DistillSpec& spec, const Tensor& targets,
                                std::span<const std::size_t> target_labels, const Tensor& sources,
                                std::span<const std::size_t> source_labels, std::uint64_t seed = 0,
                                std::size_t workers = 1);

/// Per-row squared distance between the tap values of `a` and `b`.
std::vector<Scalar> tap_distance_sq(LayeredModel& model, std::size_t layer, const Tensor& a, const Tensor& b);

DVERGE_NAMESPACE_END
