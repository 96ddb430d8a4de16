#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dverge/models.hpp"
#include "dverge/tensor.hpp"

DVERGE_NAMESPACE_BEGIN

enum class LossKind { CE, CW };

std::string to_string(LossKind kind);
LossKind parse_loss_kind(const std::string& name);

struct AttackSpec {
    Scalar epsilon = Scalar(0.03);
    std::size_t steps = 50;
    Scalar step_size = Scalar(0.006);
    Scalar momentum = 1;
    std::size_t restarts = 1;
    LossKind loss = LossKind::CE;
    bool targeted = false;
    std::vector<std::size_t> target_labels;  // required when targeted
    bool start_at_zero = true;               // first restart starts at delta = 0

    void validate() const;
};

struct AdvBatch {
    Tensor originals;
    Tensor adversarials;
    std::vector<std::size_t> labels;
    std::vector<bool> success;
    std::vector<Scalar> final_loss;  // attack objective at the returned point
    bool zero_gradient = false;      // the gradient vanished for every row at every step
};

/// Per-row CE (-log softmax at the label) or CW margin (best wrong logit minus
/// the label logit).
std::vector<Scalar> attack_loss(const Tensor& logits, std::span<const std::size_t> labels, LossKind kind);

struct LossGrad {
    std::vector<Scalar> loss;
    Tensor input_grad;  // empty when not requested
};

/// Attack objective (to be maximized) and its input gradient. A single model
/// is scored on its logits; several models are scored on the log of their
/// mean softmax. Targeted objectives are negated CE toward the target, or the
/// target-versus-best-other margin for CW.
LossGrad attack_objective(std::span<LayeredModel> models, const Tensor& x, std::span<const std::size_t> labels,
                          LossKind kind, bool targeted, bool want_grad);

/// Momentum PGD with restarts; per row the highest-objective iterate over all
/// restarts and steps (including each starting point) is returned.
AdvBatch pgd_attack(std::span<LayeredModel> target, const Tensor& x, std::span<const std::size_t> labels,
                    const AttackSpec& spec, std::uint64_t seed, std::size_t workers = 1);
AdvBatch pgd_attack(LayeredModel& target, const Tensor& x, std::span<const std::size_t> labels, const AttackSpec& spec,
                    std::uint64_t seed, std::size_t workers = 1);
AdvBatch pgd_attack(Ensemble& target, const Tensor& x, std::span<const std::size_t> labels, const AttackSpec& spec,
                    std::uint64_t seed, std::size_t workers = 1);

/// Same optimization, but returns one batch per restart (each the best iterate
/// of that restart alone). pgd_attack is the per-row best over these.
std::vector<AdvBatch> pgd_restarts(std::span<LayeredModel> target, const Tensor& x,
                                   std::span<const std::size_t> labels, const AttackSpec& spec, std::uint64_t seed,
                                   std::size_t workers = 1);

/// Fraction of rows whose adversarial the evaluator misclassifies (against the
/// true labels).
double success_rate(const AdvBatch& adv, std::span<LayeredModel> evaluator);
double success_rate(const AdvBatch& adv, LayeredModel& evaluator);
double success_rate(const AdvBatch& adv, Ensemble& evaluator);

/// Asserts the L-infinity ball and [0,1] range; returns the first offending row
/// or -1.
long first_violation(const Tensor& anchor, const Tensor& points, Scalar epsilon, Scalar tolerance = Scalar(1e-6));

DVERGE_NAMESPACE_END
