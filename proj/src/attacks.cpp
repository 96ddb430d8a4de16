#include "dverge/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "dverge/graph.hpp"
#include "dverge/parallel.hpp"
#include "dverge/rng.hpp"

DVERGE_NAMESPACE_BEGIN

namespace {

// Keeps log() finite when every member assigns a class zero probability.
constexpr Scalar kProbFloor = Scalar(1e-30);

void check_labels(std::span<const std::size_t> labels, std::size_t rows, std::size_t classes, const char* what) {
    if (labels.size() != rows) {
        throw std::invalid_argument(std::string(what) + ": " + std::to_string(labels.size()) + " labels for " +
                                    std::to_string(rows) + " rows");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= classes) {
            throw std::invalid_argument(std::string(what) + ": label " + std::to_string(labels[i]) + " at row " +
                                        std::to_string(i) + " outside [0, " + std::to_string(classes) + ")");
        }
    }
}

Tensor one_hot(std::span<const std::size_t> labels, std::size_t classes) {
    Tensor t({labels.size(), classes});
    for (std::size_t r = 0; r < labels.size(); ++r) t[r * classes + labels[r]] = 1;
    return t;
}

// Index of the largest score in a row excluding `skip`.
std::size_t best_other(const Scalar* row, std::size_t classes, std::size_t skip) {
    std::size_t best = skip == 0 ? 1 : 0;
    for (std::size_t j = 0; j < classes; ++j) {
        if (j != skip && row[j] > row[best]) best = j;
    }
    return best;
}

Scalar sign_of(Scalar v) { return v > 0 ? Scalar(1) : (v < 0 ? Scalar(-1) : Scalar(0)); }

}  // namespace

std::string to_string(LossKind kind) { return kind == LossKind::CE ? "ce" : "cw"; }

LossKind parse_loss_kind(const std::string& name) {
    if (name == "ce" || name == "CE") return LossKind::CE;
    if (name == "cw" || name == "CW") return LossKind::CW;
    throw std::invalid_argument("unknown loss kind '" + name + "'");
}

void AttackSpec::validate() const {
    if (!(epsilon >= 0) || !std::isfinite(epsilon)) throw std::invalid_argument("attack: epsilon must be >= 0");
    if (!(step_size > 0) || !std::isfinite(step_size)) throw std::invalid_argument("attack: step_size must be > 0");
    if (!(momentum >= 0)) throw std::invalid_argument("attack: momentum must be >= 0");
    if (restarts < 1) throw std::invalid_argument("attack: restarts must be >= 1");
}

std::vector<Scalar> attack_loss(const Tensor& logits, std::span<const std::size_t> labels, LossKind kind) {
    if (logits.rank() != 2) throw std::invalid_argument("attack_loss: logits must be [rows, classes]");
    const std::size_t c = logits.dim(1);
    check_labels(labels, logits.dim(0), c, "attack_loss");
    std::vector<Scalar> out(labels.size());
    for (std::size_t r = 0; r < labels.size(); ++r) {
        const Scalar* z = logits.raw() + r * c;
        if (kind == LossKind::CE) {
            const Scalar m = *std::max_element(z, z + c);
            Scalar s = 0;
            for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - m);
            out[r] = m + std::log(s) - z[labels[r]];
        } else {
            out[r] = z[best_other(z, c, labels[r])] - z[labels[r]];
        }
    }
    return out;
}

LossGrad attack_objective(std::span<LayeredModel> models, const Tensor& x, std::span<const std::size_t> labels,
                          LossKind kind, bool targeted, bool want_grad) {
    if (models.empty()) throw std::invalid_argument("attack: no target models");
    const std::size_t n = models.size();
    const std::size_t classes = models[0].classes();
    const std::size_t rows = x.rows();
    check_labels(labels, rows, classes, "attack");

    std::vector<Tensor> logits;
    logits.reserve(n);
    for (auto& m : models) logits.push_back(m.forward(x));

    Graph g;
    std::vector<NodeId> z(n);
    for (std::size_t k = 0; k < n; ++k) z[k] = g.leaf("z" + std::to_string(k), true);
    NodeId label_mask = g.leaf("label_mask");
    NodeId other_mask = g.leaf("other_mask");
    NodeId floor = g.leaf("floor");

    Bindings b;
    for (std::size_t k = 0; k < n; ++k) b.bind("z" + std::to_string(k), logits[k]);
    Tensor floor_t({rows}, kProbFloor);
    b.bind("floor", floor_t);

    // score: per-class log-probability (or logits for CW on one model)
    NodeId score_source;  // node whose values pick the competing class
    NodeId pbar = 0;
    if (n == 1) {
        score_source = z[0];
    } else {
        NodeId acc = g.softmax(z[0]);
        for (std::size_t k = 1; k < n; ++k) acc = g.add(acc, g.softmax(z[k]));
        pbar = g.scale(acc, Scalar(1) / static_cast<Scalar>(n));
        score_source = pbar;
    }

    Tensor label_t = one_hot(labels, classes);
    b.bind("label_mask", label_t);
    Tensor other_t({rows, classes});
    if (kind == LossKind::CW) {
        const Tensor& s = g.evaluate(b, score_source);
        for (std::size_t r = 0; r < rows; ++r) {
            other_t[r * classes + best_other(s.raw() + r * classes, classes, labels[r])] = 1;
        }
    }
    b.bind("other_mask", other_t);

    // log-probability (or logit) of the class picked by a one-hot mask
    auto picked = [&](NodeId mask) {
        if (n == 1) {
            NodeId base = kind == LossKind::CW ? z[0] : g.log_softmax(z[0]);
            return g.row_sum(g.mul(base, mask));
        }
        return g.log(g.add(g.row_sum(g.mul(pbar, mask)), floor));
    };

    NodeId out;
    if (kind == LossKind::CE) {
        NodeId lp = picked(label_mask);
        out = targeted ? lp : g.scale(lp, Scalar(-1));
    } else {
        NodeId margin = g.sub(picked(other_mask), picked(label_mask));
        out = targeted ? g.scale(margin, Scalar(-1)) : margin;
    }

    LossGrad result;
    const Tensor& v = g.evaluate(b, out);
    result.loss.assign(v.values().begin(), v.values().end());
    if (!want_grad) return result;

    std::vector<std::string> wrt;
    for (std::size_t k = 0; k < n; ++k) wrt.push_back("z" + std::to_string(k));
    Gradients dz = g.backward(out, Tensor({rows}, Scalar(1)), wrt);
    for (std::size_t k = 0; k < n; ++k) {
        ModelGrads mg = models[k].backward(dz.at(wrt[k]), GradTarget::Input);
        if (k == 0) {
            result.input_grad = std::move(mg.input);
        } else {
            for (std::size_t i = 0; i < result.input_grad.size(); ++i) result.input_grad[i] += mg.input[i];
        }
    }
    return result;
}

namespace {

struct RestartOut {
    Tensor best;
    std::vector<Scalar> best_loss;
    bool saw_gradient = false;
};

// One restart over a contiguous block of rows. Row streams are keyed by the
// global row index so chunking does not change the result.
RestartOut run_restart(std::span<LayeredModel> models, const Tensor& x, std::span<const std::size_t> labels,
                       const AttackSpec& spec, std::uint64_t seed, std::size_t restart, std::size_t row_offset) {
    const std::size_t rows = x.rows();
    const std::size_t d = x.row_size();
    const Scalar eps = spec.epsilon;

    Tensor adv = x;
    if (!(spec.start_at_zero && restart == 0)) {
        const std::uint64_t rs = derive_seed(seed, restart);
        for (std::size_t r = 0; r < rows; ++r) {
            Rng rng(derive_seed(rs, row_offset + r));
            Scalar* a = adv.raw() + r * d;
            const Scalar* o = x.raw() + r * d;
            for (std::size_t i = 0; i < d; ++i) a[i] = std::clamp(o[i] + rng.uniform(-eps, eps), Scalar(0), Scalar(1));
        }
    }

    RestartOut out;
    out.best = adv;
    out.best_loss.assign(rows, -std::numeric_limits<Scalar>::infinity());
    Tensor g(x.shape());

    for (std::size_t t = 0;; ++t) {
        const bool last = t == spec.steps;
        LossGrad lg = attack_objective(models, adv, labels, spec.loss, spec.targeted, !last);
        for (std::size_t r = 0; r < rows; ++r) {
            if (lg.loss[r] > out.best_loss[r]) {
                out.best_loss[r] = lg.loss[r];
                std::copy_n(adv.raw() + r * d, d, out.best.raw() + r * d);
            }
        }
        if (last) break;
        for (std::size_t r = 0; r < rows; ++r) {
            const Scalar* grad = lg.input_grad.raw() + r * d;
            Scalar* m = g.raw() + r * d;
            Scalar* a = adv.raw() + r * d;
            const Scalar* o = x.raw() + r * d;
            Scalar l1 = 0;
            for (std::size_t i = 0; i < d; ++i) l1 += std::abs(grad[i]);
            const Scalar inv = l1 > 0 ? Scalar(1) / l1 : Scalar(0);
            if (l1 > 0) out.saw_gradient = true;
            for (std::size_t i = 0; i < d; ++i) {
                m[i] = spec.momentum * m[i] + grad[i] * inv;
                const Scalar moved = a[i] + spec.step_size * sign_of(m[i]);
                a[i] = std::clamp(std::clamp(moved, o[i] - eps, o[i] + eps), Scalar(0), Scalar(1));
            }
        }
    }
    return out;
}

std::vector<bool> success_mask(std::span<LayeredModel> models, const Tensor& adv, std::span<const std::size_t> labels,
                               const AttackSpec& spec, std::size_t row_offset) {
    const auto pred = predict_mean(models, adv).labels;
    std::vector<bool> ok(pred.size());
    for (std::size_t r = 0; r < pred.size(); ++r) {
        ok[r] = spec.targeted ? pred[r] == spec.target_labels[row_offset + r] : pred[r] != labels[r];
    }
    return ok;
}

}  // namespace

std::vector<AdvBatch> pgd_restarts(std::span<LayeredModel> target, const Tensor& x,
                                   std::span<const std::size_t> labels, const AttackSpec& spec, std::uint64_t seed,
                                   std::size_t workers) {
    spec.validate();
    if (target.empty()) throw std::invalid_argument("attack: no target models");
    for (auto& m : target) m.check_input(x);
    check_labels(labels, x.rows(), target[0].classes(), "attack");
    if (spec.targeted) check_labels(spec.target_labels, x.rows(), target[0].classes(), "attack targets");
    for (Scalar v : x.values()) {
        if (!(v >= 0 && v <= 1)) throw std::invalid_argument("attack: inputs must lie in [0, 1]");
    }

    const std::size_t rows = x.rows();
    std::vector<AdvBatch> out(spec.restarts);
    for (auto& a : out) {
        a.originals = x;
        a.adversarials = Tensor(x.shape());
        a.labels.assign(labels.begin(), labels.end());
        a.success.assign(rows, false);
        a.final_loss.assign(rows, 0);
    }
    std::vector<std::vector<char>> saw(spec.restarts, std::vector<char>(std::max<std::size_t>(workers, 1), 0));

    parallel_chunks(rows, workers, [&](std::size_t begin, std::size_t end, std::size_t chunk) {
        std::vector<LayeredModel> local;
        std::span<LayeredModel> models = target;
        if (workers > 1) {
            local.assign(target.begin(), target.end());
            models = local;
        }
        std::vector<std::size_t> idx(end - begin);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
        const Tensor xs = x.slice_rows(begin, end);
        const auto ls = labels.subspan(begin, end - begin);
        const auto objective_labels = spec.targeted ? std::span<const std::size_t>(spec.target_labels).subspan(begin, end - begin) : ls;
        for (std::size_t r = 0; r < spec.restarts; ++r) {
            RestartOut ro = run_restart(models, xs, objective_labels, spec, seed, r, begin);
            const auto ok = success_mask(models, ro.best, ls, spec, begin);
            AdvBatch& a = out[r];
            const std::size_t d = x.row_size();
            std::copy(ro.best.values().begin(), ro.best.values().end(), a.adversarials.raw() + begin * d);
            for (std::size_t i = 0; i < idx.size(); ++i) {
                a.success[begin + i] = ok[i];
                a.final_loss[begin + i] = ro.best_loss[i];
            }
            saw[r][chunk] = ro.saw_gradient ? 1 : 0;
        }
    });

    for (std::size_t r = 0; r < spec.restarts; ++r) {
        out[r].zero_gradient = spec.steps > 0 && rows > 0 &&
                               std::none_of(saw[r].begin(), saw[r].end(), [](char c) { return c != 0; });
    }
    return out;
}

AdvBatch pgd_attack(std::span<LayeredModel> target, const Tensor& x, std::span<const std::size_t> labels,
                    const AttackSpec& spec, std::uint64_t seed, std::size_t workers) {
    std::vector<AdvBatch> versions = pgd_restarts(target, x, labels, spec, seed, workers);
    AdvBatch best = std::move(versions[0]);
    const std::size_t d = x.row_size();
    for (std::size_t v = 1; v < versions.size(); ++v) {
        const AdvBatch& cand = versions[v];
        for (std::size_t r = 0; r < x.rows(); ++r) {
            if (cand.final_loss[r] > best.final_loss[r]) {
                best.final_loss[r] = cand.final_loss[r];
                best.success[r] = cand.success[r];
                std::copy_n(cand.adversarials.raw() + r * d, d, best.adversarials.raw() + r * d);
            }
        }
        best.zero_gradient = best.zero_gradient && cand.zero_gradient;
    }
    return best;
}

AdvBatch pgd_attack(LayeredModel& target, const Tensor& x, std::span<const std::size_t> labels, const AttackSpec& spec,
                    std::uint64_t seed, std::size_t workers) {
    return pgd_attack(std::span<LayeredModel>(&target, 1), x, labels, spec, seed, workers);
}

AdvBatch pgd_attack(Ensemble& target, const Tensor& x, std::span<const std::size_t> labels, const AttackSpec& spec,
                    std::uint64_t seed, std::size_t workers) {
    return pgd_attack(std::span<LayeredModel>(target.members()), x, labels, spec, seed, workers);
}

double success_rate(const AdvBatch& adv, std::span<LayeredModel> evaluator) {
    const std::size_t rows = adv.adversarials.rows();
    if (rows == 0) return 0.0;
    const auto pred = predict_mean(evaluator, adv.adversarials).labels;
    std::size_t hits = 0;
    for (std::size_t r = 0; r < rows; ++r) hits += pred[r] != adv.labels[r] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(rows);
}

double success_rate(const AdvBatch& adv, LayeredModel& evaluator) {
    return success_rate(adv, std::span<LayeredModel>(&evaluator, 1));
}

double success_rate(const AdvBatch& adv, Ensemble& evaluator) {
    return success_rate(adv, std::span<LayeredModel>(evaluator.members()));
}

long first_violation(const Tensor& anchor, const Tensor& points, Scalar epsilon, Scalar tolerance) {
    if (anchor.shape() != points.shape()) throw std::invalid_argument("first_violation: shape mismatch");
    const std::size_t d = anchor.row_size();
    for (std::size_t r = 0; r < anchor.rows(); ++r) {
        for (std::size_t i = 0; i < d; ++i) {
            const Scalar p = points[r * d + i];
            if (!(p >= 0 && p <= 1) || std::abs(p - anchor[r * d + i]) > epsilon + tolerance) {
                return static_cast<long>(r);
            }
        }
    }
    return -1;
}

DVERGE_NAMESPACE_END
