#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dverge/attacks.hpp"
#include "dverge/data_io.hpp"
#include "dverge/distill.hpp"
#include "dverge/diversity.hpp"
#include "dverge/models.hpp"
#include "dverge/optim.hpp"

DVERGE_NAMESPACE_BEGIN

enum class TrainMode { Baseline, Dverge, AdvT, DvergeAdvT };

std::string to_string(TrainMode mode);
TrainMode parse_train_mode(const std::string& name);

/// Per-epoch measurements taken on a held-out set while training.
struct ProbeSpec {
    bool enabled = false;
    std::size_t samples = 100;        // commonly-correct samples for the transfer probe
    AttackSpec attack;                // transfer probe attack
    std::size_t diversity_samples = 100;
    DistillSpec distill;              // diversity probe distillation
};

struct TrainPlan {
    TrainMode mode = TrainMode::Dverge;
    std::size_t n = 3;
    std::size_t epochs = 30;
    std::size_t batch_size = 64;
    std::size_t batches_per_epoch = 0;  // 0: one pass over the training set
    Scalar lr = Scalar(0.05);
    Scalar pretrain_lr = 0;  // clean pretraining phase; 0: same as lr
    Scalar lr_decay = Scalar(0.1);
    std::vector<std::size_t> decay_epochs;  // empty: 60% and 90% of the phase
    Scalar momentum = Scalar(0.9);
    Scalar weight_decay = Scalar(1e-4);
    DistillSpec distill = DistillSpec::with_epsilon(Scalar(0.07));
    AttackSpec advt = default_advt();
    Scalar lambda = 1;
    LayerPolicy layer_policy;
    std::size_t pretrain_epochs = 0;
    std::uint64_t seed = 0;
    std::vector<bool> frozen;  // optional per sub-model; frozen members never update
    ProbeSpec probe;
    std::size_t workers = 1;

    static AttackSpec default_advt();
    void validate() const;
    bool is_frozen(std::size_t i) const { return i < frozen.size() && frozen[i]; }
    Scalar lr_at(std::size_t epoch, std::size_t phase_epochs) const;
    SgdConfig sgd(std::size_t epoch, std::size_t phase_epochs) const;
};

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based within its phase
    std::string phase;
    Scalar lr = 0;
    std::vector<double> loss;  // mean training loss per sub-model
    std::optional<std::size_t> layer;
    std::optional<double> clean_accuracy;
    std::optional<double> diversity;
    std::optional<double> transferability;
};

struct TrainLog {
    std::vector<EpochRecord> records;
    std::string to_jsonl() const;
};

/// Trailing mean with the given window (shorter at the start).
std::vector<double> rolling_mean(std::span<const double> values, std::size_t window);

/// Optimizer state carried across epochs of one phase.
struct TrainState {
    std::vector<ParamMap> velocity;
    void ensure(const Ensemble& ensemble);
};

std::uint64_t sub_model_seed(std::uint64_t seed, std::size_t i);

/// Clean CE training of every sub-model with its own shuffling stream.
TrainLog pretrain_clean(Ensemble& ensemble, const TrainPlan& plan, const Dataset& train, std::size_t epochs,
                        const Dataset* eval = nullptr);

/// One epoch of round-robin diversification. All distillations of a batch use
/// the current parameters; updates are applied after every gradient of the
/// batch is computed.
EpochRecord dverge_epoch(Ensemble& ensemble, const TrainPlan& plan, const Dataset& train, std::size_t epoch,
                         TrainState& state, const Dataset* eval = nullptr);

struct StepResult {
    std::vector<double> loss;      // per sub-model
    std::vector<ParamMap> grads;   // per sub-model
};

/// PGD adversarials of (x, y) against `target`, then each member's mean CE on
/// them with its parameter gradient.
StepResult advt_step(std::span<LayeredModel> target, const Tensor& x, std::span<const std::size_t> labels,
                     const AttackSpec& spec, std::uint64_t seed, std::size_t workers = 1);

/// Per sub-model: lambda times the diversification term on the batch's
/// distilled features plus CE on PGD adversarials of the source batch
/// generated against that sub-model alone (seed sub_model_seed(seed, i)).
/// `layer_draw` in [0, 1) picks each model's tap under the plan's layer policy.
/// Applies the updates unless `apply` is false.
StepResult combined_step(Ensemble& ensemble, const Tensor& x, std::span<const std::size_t> y, const Tensor& xs,
                         std::span<const std::size_t> ys, const TrainPlan& plan, double layer_draw,
                         std::uint64_t seed, TrainState& state, const SgdConfig& sgd, bool apply = true);

/// Adversarial training epoch (pure AdvT or the combined mode).
EpochRecord advt_epoch(Ensemble& ensemble, const TrainPlan& plan, const Dataset& train, std::size_t epoch,
                       TrainState& state, const Dataset* eval = nullptr);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Runs the plan: optional clean pretraining, then the mode's epochs.
TrainLog train(Ensemble& ensemble, const TrainPlan& plan, const Dataset& train, const Dataset* eval = nullptr,
               const EpochCallback& on_epoch = {});

DVERGE_NAMESPACE_END
