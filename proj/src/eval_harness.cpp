#include "dverge/eval_harness.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

#include "dverge/rng.hpp"
#include "json.hpp"

DVERGE_NAMESPACE_BEGIN

namespace {

constexpr std::size_t kAttackChunk = 256;

std::vector<std::size_t> labels_of(LabeledSet eval, std::size_t begin, std::size_t end) {
    return std::vector<std::size_t>(eval.labels.begin() + static_cast<std::ptrdiff_t>(begin),
                                    eval.labels.begin() + static_cast<std::ptrdiff_t>(end));
}

void check_eval(LabeledSet eval, const char* what) {
    if (eval.images == nullptr || eval.size() == 0) throw std::invalid_argument(std::string(what) + ": empty eval set");
    if (eval.images->rows() != eval.size()) throw std::invalid_argument(std::string(what) + ": label count mismatch");
}

std::vector<bool> correct_mask(std::span<LayeredModel> models, const Tensor& x, LabeledSet eval, std::size_t begin,
                               std::size_t batch) {
    std::vector<bool> ok(x.rows());
    for (std::size_t b = 0; b < x.rows(); b += batch) {
        const std::size_t e = std::min(x.rows(), b + batch);
        const auto pred = predict_mean(models, x.slice_rows(b, e)).labels;
        for (std::size_t r = b; r < e; ++r) ok[r] = pred[r - b] == eval.labels[begin + r];
    }
    return ok;
}

}  // namespace

double clean_accuracy(std::span<LayeredModel> models, LabeledSet eval, std::size_t batch) {
    check_eval(eval, "clean_accuracy");
    const auto ok = correct_mask(models, *eval.images, eval, 0, std::max<std::size_t>(batch, 1));
    return static_cast<double>(std::count(ok.begin(), ok.end(), true)) / static_cast<double>(ok.size());
}

double clean_accuracy(Ensemble& ensemble, LabeledSet eval, std::size_t batch) {
    return clean_accuracy(std::span<LayeredModel>(ensemble.members()), eval, batch);
}

double clean_accuracy(LayeredModel& model, LabeledSet eval, std::size_t batch) {
    return clean_accuracy(std::span<LayeredModel>(&model, 1), eval, batch);
}

std::vector<bool> robust_mask(std::span<LayeredModel> models, LabeledSet eval, const AttackSpec& spec,
                              std::uint64_t seed, std::size_t workers) {
    check_eval(eval, "robust_mask");
    std::vector<bool> robust = correct_mask(models, *eval.images, eval, 0, kAttackChunk);
    if (spec.epsilon == 0 && spec.restarts == 1 && spec.start_at_zero) return robust;
    for (std::size_t b = 0; b < eval.size(); b += kAttackChunk) {
        const std::size_t e = std::min(eval.size(), b + kAttackChunk);
        const Tensor x = eval.images->slice_rows(b, e);
        const auto y = labels_of(eval, b, e);
        const auto versions = pgd_restarts(models, x, y, spec, derive_seed(seed, b), workers);
        for (const auto& v : versions) {
            for (std::size_t r = 0; r < v.success.size(); ++r) {
                if (v.success[r]) robust[b + r] = false;
            }
        }
    }
    return robust;
}

std::vector<double> whitebox_eval(Ensemble& ensemble, std::span<const Scalar> eps, const AttackSpec& tmpl,
                                  LabeledSet eval, std::uint64_t seed, Scalar step_ratio, std::size_t workers) {
    check_eval(eval, "whitebox_eval");
    if (!std::is_sorted(eps.begin(), eps.end())) throw std::invalid_argument("whitebox_eval: eps list must ascend");
    std::span<LayeredModel> models(ensemble.members());
    std::vector<bool> robust = correct_mask(models, *eval.images, eval, 0, kAttackChunk);
    std::vector<double> out;
    for (std::size_t k = 0; k < eps.size(); ++k) {
        if (eps[k] > 0) {
            AttackSpec spec = tmpl;
            spec.epsilon = eps[k];
            if (step_ratio > 0) spec.step_size = eps[k] * step_ratio;
            const auto mask = robust_mask(models, eval, spec, derive_seed(seed, k), workers);
            for (std::size_t r = 0; r < robust.size(); ++r) robust[r] = robust[r] && mask[r];
        }
        out.push_back(static_cast<double>(std::count(robust.begin(), robust.end(), true)) /
                      static_cast<double>(robust.size()));
    }
    return out;
}

std::size_t BatterySpec::versions_per_surrogate() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.restarts;
    return n;
}

std::string BatterySpec::describe() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (i) os << " + ";
        os << "pgd-" << to_string(entries[i].loss) << " x" << entries[i].restarts;
    }
    os << " (" << steps << " steps, step " << step_ratio << " eps, momentum " << momentum << ")";
    return os.str();
}

std::vector<Tensor> generate_battery(std::span<Ensemble*> surrogates, Scalar eps, const BatterySpec& battery,
                                     LabeledSet eval, std::uint64_t seed, std::size_t workers) {
    check_eval(eval, "generate_battery");
    std::vector<Tensor> versions;
    for (std::size_t s = 0; s < surrogates.size(); ++s) {
        for (std::size_t k = 0; k < battery.entries.size(); ++k) {
            const BatteryEntry& entry = battery.entries[k];
            if (entry.restarts == 0) continue;
            if (eps == 0) {
                for (std::size_t r = 0; r < entry.restarts; ++r) versions.push_back(*eval.images);
                continue;
            }
            AttackSpec spec;
            spec.epsilon = eps;
            spec.steps = battery.steps;
            spec.step_size = eps * battery.step_ratio;
            spec.momentum = battery.momentum;
            spec.restarts = entry.restarts;
            spec.loss = entry.loss;
            spec.start_at_zero = false;
            std::vector<std::vector<Tensor>> parts(entry.restarts);
            const std::uint64_t base = derive_seed(derive_seed(seed, s), k);
            for (std::size_t b = 0; b < eval.size(); b += kAttackChunk) {
                const std::size_t e = std::min(eval.size(), b + kAttackChunk);
                const auto y = labels_of(eval, b, e);
                auto adv = pgd_restarts(surrogates[s]->members(), eval.images->slice_rows(b, e), y, spec,
                                        derive_seed(base, b), workers);
                for (std::size_t r = 0; r < adv.size(); ++r) parts[r].push_back(std::move(adv[r].adversarials));
            }
            for (auto& p : parts) versions.push_back(concat_rows(p));
        }
    }
    return versions;
}

double all_or_nothing_accuracy(Ensemble& defender, std::span<const Tensor> versions, LabeledSet eval,
                               std::size_t batch) {
    check_eval(eval, "all_or_nothing_accuracy");
    std::span<LayeredModel> models(defender.members());
    batch = std::max<std::size_t>(batch, 1);
    std::vector<bool> ok = correct_mask(models, *eval.images, eval, 0, batch);
    for (const auto& v : versions) {
        if (v.shape() != eval.images->shape()) throw std::invalid_argument("all_or_nothing_accuracy: version shape");
        const auto m = correct_mask(models, v, eval, 0, batch);
        for (std::size_t r = 0; r < ok.size(); ++r) ok[r] = ok[r] && m[r];
    }
    return static_cast<double>(std::count(ok.begin(), ok.end(), true)) / static_cast<double>(ok.size());
}

double blackbox_eval(Ensemble& defender, std::span<Ensemble*> surrogates, Scalar eps, const BatterySpec& battery,
                     LabeledSet eval, std::uint64_t seed, std::size_t workers) {
    if (surrogates.empty()) throw std::invalid_argument("blackbox_eval: at least one surrogate required");
    const auto versions = generate_battery(surrogates, eps, battery, eval, seed, workers);
    return all_or_nothing_accuracy(defender, versions, eval);
}

Scalar DecisionGrid::offset(std::size_t k) const {
    const auto g = static_cast<Scalar>(resolution - 1);
    return eps_max * (Scalar(2) * static_cast<Scalar>(k) - g) / g;
}

DecisionGrid decision_grid(Ensemble& ensemble, Ensemble& surrogate, const Tensor& image, std::size_t label,
                           std::size_t resolution, Scalar eps_max, std::uint64_t seed, bool pgd_direction) {
    if (resolution < 3 || resolution % 2 == 0) throw std::invalid_argument("decision_grid: G must be odd and >= 3");
    if (!(eps_max >= 0)) throw std::invalid_argument("decision_grid: eps_max must be >= 0");
    Shape one = image.shape();
    if (one.size() == ensemble.input_shape().size()) one.insert(one.begin(), 1);
    const Tensor x = image.reshaped(one);
    ensemble[0].check_input(x);
    const std::size_t d = x.size();

    DecisionGrid grid;
    grid.resolution = resolution;
    grid.eps_max = eps_max;
    Rng rng(derive_seed(seed, "decision-grid"));
    grid.axis_h = Tensor(ensemble.input_shape());
    for (auto& v : grid.axis_h.values()) v = rng.rademacher();

    grid.axis_v = Tensor(ensemble.input_shape());
    const std::vector<std::size_t> y{label};
    if (pgd_direction && eps_max > 0) {
        AttackSpec spec;
        spec.epsilon = eps_max;
        spec.steps = 20;
        spec.step_size = eps_max / 5;
        const AdvBatch adv = pgd_attack(surrogate, x, y, spec, derive_seed(seed, "decision-pgd"));
        for (std::size_t i = 0; i < d; ++i) {
            const Scalar diff = adv.adversarials[i] - x[i];
            grid.axis_v[i] = diff > 0 ? Scalar(1) : (diff < 0 ? Scalar(-1) : Scalar(0));
        }
    } else {
        const LossGrad lg = attack_objective(surrogate.members(), x, y, LossKind::CE, false, true);
        for (std::size_t i = 0; i < d; ++i) {
            const Scalar g = lg.input_grad[i];
            grid.axis_v[i] = g > 0 ? Scalar(1) : (g < 0 ? Scalar(-1) : Scalar(0));
        }
    }
    if (std::all_of(grid.axis_v.values().begin(), grid.axis_v.values().end(), [](Scalar v) { return v == 0; })) {
        for (auto& v : grid.axis_v.values()) v = rng.rademacher();
        grid.diagnostic = "zero surrogate gradient; vertical axis replaced by a second Rademacher draw";
    }

    Shape batch_shape = one;
    batch_shape[0] = resolution * resolution;
    Tensor pts(batch_shape);
    for (std::size_t r = 0; r < resolution; ++r) {
        const Scalar a = grid.offset(r);
        for (std::size_t c = 0; c < resolution; ++c) {
            const Scalar b = grid.offset(c);
            Scalar* p = pts.raw() + (r * resolution + c) * d;
            for (std::size_t i = 0; i < d; ++i) {
                p[i] = std::clamp(x[i] + a * grid.axis_v[i] + b * grid.axis_h[i], Scalar(0), Scalar(1));
            }
        }
    }
    grid.labels = ensemble_predict(ensemble, pts).labels;
    return grid;
}

std::vector<double> convergence_check(Ensemble& ensemble, std::span<const std::size_t> iterations,
                                      const AttackSpec& spec, LabeledSet eval, std::uint64_t seed,
                                      std::size_t workers) {
    check_eval(eval, "convergence_check");
    if (!std::is_sorted(iterations.begin(), iterations.end())) {
        throw std::invalid_argument("convergence_check: iteration list must ascend");
    }
    std::span<LayeredModel> models(ensemble.members());
    std::vector<double> out;
    for (std::size_t it : iterations) {
        if (it == 0) {
            out.push_back(clean_accuracy(models, eval));
            continue;
        }
        AttackSpec s = spec;
        s.steps = it;
        const auto mask = robust_mask(models, eval, s, seed, workers);
        out.push_back(static_cast<double>(std::count(mask.begin(), mask.end(), true)) /
                      static_cast<double>(mask.size()));
    }
    return out;
}

double mean_pairwise_diversity(Ensemble& ensemble, LabeledSet eval, const DistillSpec& distill, LayerPolicy policy,
                               std::size_t samples, std::uint64_t seed) {
    const std::size_t n = ensemble.size();
    if (n < 2) return 0.0;
    double total = 0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            total += pairwise_diversity(ensemble[i], ensemble[j], eval, distill, policy, samples,
                                        derive_seed(seed, i * n + j))
                         .value;
            ++pairs;
        }
    }
    return total / static_cast<double>(pairs);
}

std::string EvalReport::to_json() const {
    nlohmann::json j = {{"clean_accuracy", clean_accuracy}, {"eps", eps},         {"whitebox", whitebox},
                        {"blackbox", blackbox},             {"battery", battery}, {"sample_count", sample_count},
                        {"seed", seed}};
    return j.dump(2);
}

DVERGE_NAMESPACE_END
