#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dverge/attacks.hpp"
#include "dverge/diversity.hpp"
#include "dverge/models.hpp"

DVERGE_NAMESPACE_BEGIN

double clean_accuracy(std::span<LayeredModel> models, LabeledSet eval, std::size_t batch = 256);
double clean_accuracy(Ensemble& ensemble, LabeledSet eval, std::size_t batch = 256);
double clean_accuracy(LayeredModel& model, LabeledSet eval, std::size_t batch = 256);

/// Per row: correct on the clean input and on every restart's adversarial.
std::vector<bool> robust_mask(std::span<LayeredModel> models, LabeledSet eval, const AttackSpec& spec,
                              std::uint64_t seed, std::size_t workers = 1);

/// White-box accuracy against the ensemble for ascending epsilons. A row stays
/// robust at a given epsilon only if it survived every smaller epsilon too, so
/// the curve is non-increasing. Each attack's step size is epsilon times
/// `step_ratio` when step_ratio > 0, else the template's step size.
std::vector<double> whitebox_eval(Ensemble& ensemble, std::span<const Scalar> eps, const AttackSpec& tmpl,
                                  LabeledSet eval, std::uint64_t seed, Scalar step_ratio = Scalar(0.2),
                                  std::size_t workers = 1);

/// One battery member: a loss and a number of restarts. Each restart counts as
/// its own version.
struct BatteryEntry {
    LossKind loss = LossKind::CE;
    std::size_t restarts = 1;
};

struct BatterySpec {
    std::vector<BatteryEntry> entries{{LossKind::CE, 3}, {LossKind::CW, 1}};
    std::size_t steps = 100;
    Scalar step_ratio = Scalar(0.2);  // step size = ratio * epsilon
    Scalar momentum = 1;

    std::size_t versions_per_surrogate() const;
    std::string describe() const;
};

/// Transfer adversarials from every surrogate, one tensor per version.
std::vector<Tensor> generate_battery(std::span<Ensemble*> surrogates, Scalar eps, const BatterySpec& battery,
                                     LabeledSet eval, std::uint64_t seed, std::size_t workers = 1);

/// Fraction of rows the defender gets right on the clean input and on every
/// version.
double all_or_nothing_accuracy(Ensemble& defender, std::span<const Tensor> versions, LabeledSet eval,
                               std::size_t batch = 256);

double blackbox_eval(Ensemble& defender, std::span<Ensemble*> surrogates, Scalar eps, const BatterySpec& battery,
                     LabeledSet eval, std::uint64_t seed, std::size_t workers = 1);

struct DecisionGrid {
    std::size_t center_index = 0;
    std::size_t resolution = 0;  // G
    Scalar eps_max = 0;
    Tensor axis_v;  // sign of the surrogate's loss gradient (entries in {-1, 0, 1})
    Tensor axis_h;  // Rademacher
    std::vector<std::size_t> labels;  // row-major G x G; row = vertical offset
    std::string diagnostic;

    Scalar offset(std::size_t k) const;
    std::size_t at(std::size_t row, std::size_t col) const { return labels.at(row * resolution + col); }
};

/// Labels of the ensemble on clip(x + a axis_v + b axis_h, 0, 1) over a G x G
/// grid with a, b in [-eps_max, eps_max].
DecisionGrid decision_grid(Ensemble& ensemble, Ensemble& surrogate, const Tensor& image, std::size_t label,
                           std::size_t resolution, Scalar eps_max, std::uint64_t seed, bool pgd_direction = false);

/// White-box accuracy at each iteration budget (same seed for every budget).
/// A budget of zero reports clean accuracy.
std::vector<double> convergence_check(Ensemble& ensemble, std::span<const std::size_t> iterations,
                                      const AttackSpec& spec, LabeledSet eval, std::uint64_t seed,
                                      std::size_t workers = 1);

/// Mean pairwise diversity over all sub-model pairs.
double mean_pairwise_diversity(Ensemble& ensemble, LabeledSet eval, const DistillSpec& distill, LayerPolicy policy,
                               std::size_t samples, std::uint64_t seed);

struct EvalReport {
    double clean_accuracy = 0;
    std::vector<Scalar> eps;
    std::vector<double> whitebox;
    std::vector<double> blackbox;
    std::string battery;
    std::size_t sample_count = 0;
    std::uint64_t seed = 0;

    std::string to_json() const;
};

DVERGE_NAMESPACE_END
