#include "dverge/distill.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "dverge/parallel.hpp"

DVERGE_NAMESPACE_BEGIN

DistillSpec DistillSpec::with_epsilon(Scalar epsilon, std::size_t layer) {
    DistillSpec s;
    s.epsilon = epsilon;
    s.step_size = epsilon / 10;
    s.layer = layer;
    return s;
}

void DistillSpec::validate() const {
    if (!(epsilon >= 0) || !std::isfinite(epsilon)) throw std::invalid_argument("distill: epsilon must be >= 0");
    if (steps < 1) throw std::invalid_argument("distill: steps must be >= 1");
    if (!(step_size > 0) || !std::isfinite(step_size)) throw std::invalid_argument("distill: step_size must be > 0");
    if (!(momentum >= 0)) throw std::invalid_argument("distill: momentum must be >= 0");
}

std::vector<Scalar> tap_distance_sq(LayeredModel& model, std::size_t layer, const Tensor& a, const Tensor& b) {
    const Tensor ta = model.forward_tap(a, layer);
    const Tensor& tb = model.forward_tap(b, layer);
    const std::size_t d = ta.row_size();
    std::vector<Scalar> out(ta.rows());
    for (std::size_t r = 0; r < out.size(); ++r) {
        Scalar s = 0;
        for (std::size_t i = 0; i < d; ++i) {
            const Scalar diff = ta[r * d + i] - tb[r * d + i];
            s += diff * diff;
        }
        out[r] = s;
    }
    return out;
}

namespace {

struct DistillOut {
    Tensor z;
    std::vector<Scalar> objective;  // squared
    std::vector<Scalar> initial;    // squared
};

DistillOut distill_rows(LayeredModel& model, const DistillSpec& spec, const Tensor& x, const Tensor& xs) {
    const std::size_t rows = x.rows();
    const std::size_t d = x.row_size();
    const Scalar eps = spec.epsilon;
    const Tensor anchor = model.forward_tap(x, spec.layer);
    const std::size_t td = anchor.row_size();

    Tensor z = xs;
    Tensor g(x.shape());
    Tensor seed(anchor.shape());
    DistillOut out;
    out.z = z;
    out.objective.assign(rows, std::numeric_limits<Scalar>::infinity());
    out.initial.assign(rows, 0);

    for (std::size_t t = 0;; ++t) {
        const bool last = t == spec.steps;
        const Tensor& f = model.forward_tap(z, spec.layer);
        for (std::size_t r = 0; r < rows; ++r) {
            Scalar s = 0;
            for (std::size_t i = 0; i < td; ++i) {
                const Scalar diff = f[r * td + i] - anchor[r * td + i];
                seed[r * td + i] = 2 * diff;
                s += diff * diff;
            }
            if (t == 0) out.initial[r] = s;
            const bool take = spec.best_iterate ? s < out.objective[r] : last;
            if (take) {
                out.objective[r] = s;
                std::copy_n(z.raw() + r * d, d, out.z.raw() + r * d);
            }
        }
        if (last) break;
        const Tensor grad = model.backward(seed, GradTarget::Input).input;
        for (std::size_t r = 0; r < rows; ++r) {
            const Scalar* gr = grad.raw() + r * d;
            Scalar* m = g.raw() + r * d;
            Scalar* zr = z.raw() + r * d;
            const Scalar* s = xs.raw() + r * d;
            Scalar l1 = 0;
            for (std::size_t i = 0; i < d; ++i) l1 += std::abs(gr[i]);
            const Scalar inv = l1 > 0 ? Scalar(1) / l1 : Scalar(0);
            for (std::size_t i = 0; i < d; ++i) {
                m[i] = spec.momentum * m[i] + gr[i] * inv;
                const Scalar dir = m[i] > 0 ? Scalar(1) : (m[i] < 0 ? Scalar(-1) : Scalar(0));
                const Scalar moved = zr[i] - spec.step_size * dir;
                zr[i] = std::clamp(std::clamp(moved, s[i] - eps, s[i] + eps), Scalar(0), Scalar(1));
            }
        }
    }
    return out;
}

}  // namespace

DistilledBatch distill_features(LayeredModel& model, const DistillSpec& spec, const Tensor& targets,
                                std::span<const std::size_t> target_labels, const Tensor& sources,
                                std::span<const std::size_t> source_labels, std::uint64_t /*seed*/,
                                std::size_t workers) {
    spec.validate();
    if (spec.layer < 1 || spec.layer > model.tap_count()) {
        throw std::out_of_range("distill: layer " + std::to_string(spec.layer) + " outside [1, " +
                                std::to_string(model.tap_count()) + "]");
    }
    model.check_input(targets);
    model.check_input(sources);
    if (targets.rows() != sources.rows()) throw std::invalid_argument("distill: target and source batch sizes differ");
    if (target_labels.size() != targets.rows() || source_labels.size() != sources.rows()) {
        throw std::invalid_argument("distill: label count does not match batch size");
    }
    for (Scalar v : sources.values()) {
        if (!(v >= 0 && v <= 1)) throw std::invalid_argument("distill: source images must lie in [0, 1]");
    }

    DistilledBatch out;
    out.sources = sources;
    out.source_labels.assign(source_labels.begin(), source_labels.end());
    out.targets = targets;
    out.target_labels.assign(target_labels.begin(), target_labels.end());
    out.layer = spec.layer;
    out.distilled = Tensor(sources.shape());
    const std::size_t rows = sources.rows();
    out.objective_values.assign(rows, 0);
    out.initial_values.assign(rows, 0);

    parallel_chunks(rows, workers, [&](std::size_t begin, std::size_t end, std::size_t) {
        if (begin == end) return;
        std::optional<LayeredModel> local;
        LayeredModel* m = &model;
        if (workers > 1) {
            local.emplace(model);
            m = &*local;
        }
        DistillOut d = distill_rows(*m, spec, targets.slice_rows(begin, end), sources.slice_rows(begin, end));
        std::copy(d.z.values().begin(), d.z.values().end(), out.distilled.raw() + begin * sources.row_size());
        for (std::size_t r = begin; r < end; ++r) {
            out.objective_values[r] = std::sqrt(d.objective[r - begin]);
            out.initial_values[r] = std::sqrt(d.initial[r - begin]);
        }
    });
    return out;
}

DVERGE_NAMESPACE_END
