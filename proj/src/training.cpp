#include "dverge/training.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dverge/eval_harness.hpp"
#include "dverge/graph.hpp"
#include "dverge/parallel.hpp"
#include "dverge/rng.hpp"
#include "json.hpp"

DVERGE_NAMESPACE_BEGIN

std::string to_string(TrainMode mode) {
    switch (mode) {
        case TrainMode::Baseline: return "baseline";
        case TrainMode::Dverge: return "dverge";
        case TrainMode::AdvT: return "advt";
        case TrainMode::DvergeAdvT: return "dverge+advt";
    }
    return "unknown";
}

TrainMode parse_train_mode(const std::string& name) {
    if (name == "baseline") return TrainMode::Baseline;
    if (name == "dverge") return TrainMode::Dverge;
    if (name == "advt") return TrainMode::AdvT;
    if (name == "dverge+advt") return TrainMode::DvergeAdvT;
    throw std::invalid_argument("unknown training mode '" + name + "'");
}

AttackSpec TrainPlan::default_advt() {
    AttackSpec s;
    s.epsilon = Scalar(8.0 / 255.0);
    s.steps = 10;
    s.step_size = Scalar(2.0 / 255.0);
    s.restarts = 1;
    s.start_at_zero = false;
    return s;
}

void TrainPlan::validate() const {
    if (n < 1) throw std::invalid_argument("plan: n must be >= 1");
    if (epochs < 1 && pretrain_epochs < 1) throw std::invalid_argument("plan: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("plan: batch_size must be >= 1");
    if (!(lr > 0)) throw std::invalid_argument("plan: lr must be > 0");
    if (!(pretrain_lr >= 0)) throw std::invalid_argument("plan: pretrain_lr must be >= 0");
    if (!(lambda >= 0)) throw std::invalid_argument("plan: lambda must be >= 0");
    if (!(momentum >= 0) || !(weight_decay >= 0)) throw std::invalid_argument("plan: momentum and weight_decay must be >= 0");
    if (mode == TrainMode::Dverge || mode == TrainMode::DvergeAdvT) distill.validate();
    if (mode == TrainMode::AdvT || mode == TrainMode::DvergeAdvT) advt.validate();
    if (!frozen.empty() && frozen.size() != n) throw std::invalid_argument("plan: frozen list must have n entries");
}

Scalar TrainPlan::lr_at(std::size_t epoch, std::size_t phase_epochs) const {
    std::vector<std::size_t> points = decay_epochs;
    if (points.empty()) points = {phase_epochs * 6 / 10, phase_epochs * 9 / 10};
    Scalar out = lr;
    for (auto p : points) {
        if (p > 0 && epoch >= p) out *= lr_decay;
    }
    return out;
}

SgdConfig TrainPlan::sgd(std::size_t epoch, std::size_t phase_epochs) const {
    SgdConfig c;
    c.lr = lr_at(epoch, phase_epochs);
    c.momentum = momentum;
    c.weight_decay = weight_decay;
    return c;
}

std::string TrainLog::to_jsonl() const {
    std::string out;
    for (const auto& r : records) {
        nlohmann::json j = {{"phase", r.phase}, {"epoch", r.epoch}, {"lr", r.lr}, {"loss", r.loss}};
        j["layer"] = r.layer ? nlohmann::json(*r.layer) : nlohmann::json(nullptr);
        j["clean_accuracy"] = r.clean_accuracy ? nlohmann::json(*r.clean_accuracy) : nlohmann::json(nullptr);
        j["diversity"] = r.diversity ? nlohmann::json(*r.diversity) : nlohmann::json(nullptr);
        j["transferability"] = r.transferability ? nlohmann::json(*r.transferability) : nlohmann::json(nullptr);
        out += j.dump();
        out += '\n';
    }
    return out;
}

std::vector<double> rolling_mean(std::span<const double> values, std::size_t window) {
    if (window == 0) throw std::invalid_argument("rolling_mean: window must be positive");
    std::vector<double> out(values.size());
    double sum = 0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        sum += values[i];
        if (i >= window) sum -= values[i - window];
        out[i] = sum / static_cast<double>(std::min(i + 1, window));
    }
    return out;
}

void TrainState::ensure(const Ensemble& ensemble) {
    if (velocity.size() == ensemble.size()) return;
    velocity.assign(ensemble.size(), ParamMap{});
}

std::uint64_t sub_model_seed(std::uint64_t seed, std::size_t i) { return derive_seed(seed, i); }

namespace {

struct Batch {
    Tensor x;
    std::vector<std::size_t> y;
};

Batch gather(const Dataset& d, const std::vector<std::size_t>& idx) {
    Batch b;
    b.x = d.images.gather_rows(idx);
    for (auto i : idx) b.y.push_back(d.labels[i]);
    return b;
}

std::vector<std::vector<std::size_t>> epoch_batches(const TrainPlan& plan, std::size_t count, std::uint64_t seed) {
    auto batches = shuffled_batches(count, plan.batch_size, seed);
    if (plan.batches_per_epoch > 0 && batches.size() > plan.batches_per_epoch) batches.resize(plan.batches_per_epoch);
    return batches;
}

LabeledSet view(const Dataset& d) { return LabeledSet{&d.images, d.labels}; }

void check_finite(double loss, const std::string& phase, std::size_t epoch, std::size_t member) {
    if (!std::isfinite(loss)) {
        throw std::runtime_error(phase + " diverged at epoch " + std::to_string(epoch) + " (sub-model " +
                                 std::to_string(member) + ")");
    }
}

void add_scaled(ParamMap& dst, const ParamMap& src, Scalar s) {
    for (auto& [name, t] : dst) {
        const Tensor& o = src.at(name);
        for (std::size_t k = 0; k < t.size(); ++k) t[k] = s * t[k] + o[k];
    }
}

void finish_record(EpochRecord& rec, Ensemble& ensemble, const TrainPlan& plan, const Dataset* eval, bool probes) {
    if (eval == nullptr || eval->size() == 0) return;
    rec.clean_accuracy = clean_accuracy(ensemble, view(*eval));
    if (!probes || !plan.probe.enabled || ensemble.size() < 2) return;
    const std::uint64_t ps = derive_seed(plan.seed, "probe");
    try {
        rec.transferability =
            transfer_matrix(ensemble, plan.probe.attack, view(*eval), plan.probe.samples, ps, plan.workers)
                .mean_off_diagonal();
    } catch (const std::runtime_error&) {
        // no commonly-correct samples yet
    }
    rec.diversity = mean_pairwise_diversity(ensemble, view(*eval), plan.probe.distill, plan.layer_policy,
                                            plan.probe.diversity_samples, ps);
}

// Runs a graph-throwing computation and reports divergence with the epoch.
template <class Fn>
auto guarded(const std::string& phase, std::size_t epoch, Fn&& fn) {
    try {
        return fn();
    } catch (const GraphError& e) {
        throw std::runtime_error(phase + " diverged at epoch " + std::to_string(epoch) + ": " + e.what());
    }
}

}  // namespace

TrainLog pretrain_clean(Ensemble& ensemble, const TrainPlan& plan, const Dataset& train, std::size_t epochs,
                        const Dataset* eval) {
    if (train.size() == 0) throw std::invalid_argument("pretrain_clean: empty training set");
    TrainLog log;
    std::vector<ParamMap> velocity(ensemble.size());
    const std::uint64_t base = derive_seed(plan.seed, "pretrain");
    for (std::size_t e = 0; e < epochs; ++e) {
        EpochRecord rec;
        rec.epoch = e + 1;
        rec.phase = "pretrain";
        const SgdConfig sgd = plan.sgd(e, epochs);
        rec.lr = sgd.lr;
        rec.loss.assign(ensemble.size(), 0.0);
        guarded("pretrain", e + 1, [&] {
            parallel_chunks(ensemble.size(), plan.workers, [&](std::size_t begin, std::size_t end, std::size_t) {
                for (std::size_t i = begin; i < end; ++i) {
                    if (plan.is_frozen(i)) continue;
                    const auto batches = epoch_batches(plan, train.size(), derive_seed(sub_model_seed(base, i), e));
                    double total = 0;
                    for (const auto& idx : batches) {
                        const Batch b = gather(train, idx);
                        LossAndGrads lg = cross_entropy_grad(ensemble[i], b.x, b.y);
                        check_finite(lg.loss, "pretrain", e + 1, i);
                        sgd_step(ensemble[i].parameters(), lg.grads, sgd, velocity[i]);
                        total += lg.loss;
                    }
                    rec.loss[i] = total / static_cast<double>(batches.size());
                }
            });
            return 0;
        });
        finish_record(rec, ensemble, plan, eval, false);
        log.records.push_back(std::move(rec));
    }
    return log;
}

EpochRecord dverge_epoch(Ensemble& ensemble, const TrainPlan& plan, const Dataset& train, std::size_t epoch,
                         TrainState& state, const Dataset* eval) {
    if (train.size() == 0) throw std::invalid_argument("dverge_epoch: empty training set");
    state.ensure(ensemble);
    const std::size_t n = ensemble.size();
    Rng rng(derive_seed(derive_seed(plan.seed, "dverge"), epoch));
    const double draw = rng.uniform();
    std::vector<DistillSpec> specs(n, plan.distill);
    for (std::size_t i = 0; i < n; ++i) specs[i].layer = plan.layer_policy.pick(ensemble[i].tap_count(), draw);

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.phase = "dverge";
    rec.layer = specs[0].layer;
    const SgdConfig sgd = plan.sgd(epoch, plan.epochs);
    rec.lr = sgd.lr;
    rec.loss.assign(n, 0.0);

    const auto batches = epoch_batches(plan, train.size(), rng.next_u64());
    if (n >= 2) {
        guarded("dverge", epoch + 1, [&] {
            for (const auto& idx : batches) {
                const Batch b = gather(train, idx);
                std::vector<std::size_t> sidx(idx.size());
                for (auto& s : sidx) s = rng.below(train.size());
                const Batch src = gather(train, sidx);

                std::vector<DistilledBatch> distilled(n);
                parallel_chunks(n, plan.workers, [&](std::size_t begin, std::size_t end, std::size_t) {
                    for (std::size_t i = begin; i < end; ++i) {
                        distilled[i] = distill_features(ensemble[i], specs[i], b.x, b.y, src.x, src.y);
                    }
                });
                std::vector<LossAndGrads> grads(n);
                parallel_chunks(n, plan.workers, [&](std::size_t begin, std::size_t end, std::size_t) {
                    for (std::size_t i = begin; i < end; ++i) {
                        if (plan.is_frozen(i)) continue;
                        std::vector<DistilledBatch> others;
                        for (std::size_t j = 0; j < n; ++j) {
                            if (j != i) others.push_back(distilled[j]);
                        }
                        grads[i] = diversity_loss_grad(ensemble[i], others);
                    }
                });
                for (std::size_t i = 0; i < n; ++i) {
                    if (plan.is_frozen(i)) continue;
                    check_finite(grads[i].loss, "dverge", epoch + 1, i);
                    sgd_step(ensemble[i].parameters(), grads[i].grads, sgd, state.velocity[i]);
                    rec.loss[i] += grads[i].loss / static_cast<double>(batches.size());
                }
            }
            return 0;
        });
    }
    finish_record(rec, ensemble, plan, eval, true);
    return rec;
}

StepResult advt_step(std::span<LayeredModel> target, const Tensor& x, std::span<const std::size_t> labels,
                     const AttackSpec& spec, std::uint64_t seed, std::size_t workers) {
    const AdvBatch adv = pgd_attack(target, x, labels, spec, seed, workers);
    StepResult out;
    for (auto& m : target) {
        LossAndGrads lg = cross_entropy_grad(m, adv.adversarials, labels);
        out.loss.push_back(lg.loss);
        out.grads.push_back(std::move(lg.grads));
    }
    return out;
}

StepResult combined_step(Ensemble& ensemble, const Tensor& x, std::span<const std::size_t> y, const Tensor& xs,
                         std::span<const std::size_t> ys, const TrainPlan& plan, double layer_draw,
                         std::uint64_t seed, TrainState& state, const SgdConfig& sgd, bool apply) {
    state.ensure(ensemble);
    const std::size_t n = ensemble.size();
    std::vector<DistilledBatch> distilled(n);
    parallel_chunks(n, plan.workers, [&](std::size_t begin, std::size_t end, std::size_t) {
        for (std::size_t i = begin; i < end; ++i) {
            DistillSpec ds = plan.distill;
            ds.layer = plan.layer_policy.pick(ensemble[i].tap_count(), layer_draw);
            distilled[i] = distill_features(ensemble[i], ds, x, y, xs, ys);
        }
    });

    StepResult out;
    out.loss.assign(n, 0.0);
    out.grads.assign(n, ParamMap{});
    parallel_chunks(n, plan.workers, [&](std::size_t begin, std::size_t end, std::size_t) {
        for (std::size_t i = begin; i < end; ++i) {
            std::vector<DistilledBatch> others;
            for (std::size_t j = 0; j < n; ++j) {
                if (j != i) others.push_back(distilled[j]);
            }
            LossAndGrads div = diversity_loss_grad(ensemble[i], others);
            StepResult adv = advt_step(std::span<LayeredModel>(&ensemble[i], 1), xs, ys, plan.advt,
                                       sub_model_seed(seed, i));
            out.loss[i] = static_cast<double>(plan.lambda) * div.loss + adv.loss[0];
            out.grads[i] = std::move(div.grads);
            add_scaled(out.grads[i], adv.grads[0], plan.lambda);
        }
    });
    if (apply) {
        for (std::size_t i = 0; i < n; ++i) {
            if (!plan.is_frozen(i)) sgd_step(ensemble[i].parameters(), out.grads[i], sgd, state.velocity[i]);
        }
    }
    return out;
}

EpochRecord advt_epoch(Ensemble& ensemble, const TrainPlan& plan, const Dataset& train, std::size_t epoch,
                       TrainState& state, const Dataset* eval) {
    if (train.size() == 0) throw std::invalid_argument("advt_epoch: empty training set");
    state.ensure(ensemble);
    const std::size_t n = ensemble.size();
    const bool combined = plan.mode == TrainMode::DvergeAdvT;
    const std::string phase = combined ? "dverge+advt" : "advt";
    Rng rng(derive_seed(derive_seed(plan.seed, phase), epoch));
    const double draw = rng.uniform();

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.phase = phase;
    if (combined) rec.layer = plan.layer_policy.pick(ensemble[0].tap_count(), draw);
    const SgdConfig sgd = plan.sgd(epoch, plan.epochs);
    rec.lr = sgd.lr;
    rec.loss.assign(n, 0.0);

    const auto batches = epoch_batches(plan, train.size(), rng.next_u64());
    guarded(phase, epoch + 1, [&] {
        for (const auto& idx : batches) {
            const Batch b = gather(train, idx);
            const std::uint64_t step_seed = rng.next_u64();
            StepResult step;
            if (combined) {
                std::vector<std::size_t> sidx(idx.size());
                for (auto& s : sidx) s = rng.below(train.size());
                const Batch src = gather(train, sidx);
                step = combined_step(ensemble, b.x, b.y, src.x, src.y, plan, draw, step_seed, state, sgd, true);
            } else {
                step = advt_step(ensemble.members(), b.x, b.y, plan.advt, step_seed, plan.workers);
                for (std::size_t i = 0; i < n; ++i) {
                    if (!plan.is_frozen(i)) sgd_step(ensemble[i].parameters(), step.grads[i], sgd, state.velocity[i]);
                }
            }
            for (std::size_t i = 0; i < n; ++i) {
                check_finite(step.loss[i], phase, epoch + 1, i);
                rec.loss[i] += step.loss[i] / static_cast<double>(batches.size());
            }
        }
        return 0;
    });
    finish_record(rec, ensemble, plan, eval, true);
    return rec;
}

TrainLog train(Ensemble& ensemble, const TrainPlan& plan, const Dataset& train, const Dataset* eval,
               const EpochCallback& on_epoch) {
    plan.validate();
    if (ensemble.size() != plan.n) {
        throw std::invalid_argument("train: ensemble has " + std::to_string(ensemble.size()) + " members, plan says " +
                                    std::to_string(plan.n));
    }
    TrainLog log;
    auto emit = [&](EpochRecord rec) {
        if (on_epoch) on_epoch(rec);
        log.records.push_back(std::move(rec));
    };
    if (plan.pretrain_epochs > 0) {
        TrainPlan p = plan;
        if (plan.pretrain_lr > 0) p.lr = plan.pretrain_lr;
        // pretrain_clean reports per epoch only at the end, so replay its records
        for (auto& r : pretrain_clean(ensemble, p, train, plan.pretrain_epochs, eval).records) emit(std::move(r));
    }
    if (plan.epochs == 0) return log;
    TrainState state;
    switch (plan.mode) {
        case TrainMode::Baseline: {
            TrainPlan p = plan;
            p.seed = derive_seed(plan.seed, "baseline");
            for (auto& r : pretrain_clean(ensemble, p, train, plan.epochs, eval).records) {
                r.phase = "baseline";
                emit(std::move(r));
            }
            break;
        }
        case TrainMode::Dverge:
            for (std::size_t e = 0; e < plan.epochs; ++e) emit(dverge_epoch(ensemble, plan, train, e, state, eval));
            break;
        case TrainMode::AdvT:
        case TrainMode::DvergeAdvT:
            for (std::size_t e = 0; e < plan.epochs; ++e) emit(advt_epoch(ensemble, plan, train, e, state, eval));
            break;
    }
    return log;
}

DVERGE_NAMESPACE_END
