#include "dverge/diversity.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "dverge/rng.hpp"

DVERGE_NAMESPACE_BEGIN

std::string LayerPolicy::describe() const {
    return kind == Kind::Uniform ? "uniform" : "fixed:" + std::to_string(layer);
}

std::size_t LayerPolicy::pick(std::size_t taps, double u) const {
    if (kind == Kind::Fixed) {
        if (layer < 1 || layer > taps) {
            throw std::out_of_range("layer policy: fixed layer " + std::to_string(layer) + " outside [1, " +
                                    std::to_string(taps) + "]");
        }
        return layer;
    }
    const auto l = static_cast<std::size_t>(u * static_cast<double>(taps));
    return std::min(l, taps - 1) + 1;
}

namespace {

// Per-row CE and, when `dlogits` is given, weight[r] * (softmax - onehot).
std::vector<Scalar> ce_rows(const Tensor& logits, std::span<const std::size_t> labels, std::span<const Scalar> weight,
                            Tensor* dlogits) {
    const std::size_t c = logits.dim(1);
    std::vector<Scalar> out(logits.rows());
    if (dlogits) dlogits->reset(logits.shape());
    for (std::size_t r = 0; r < out.size(); ++r) {
        const Scalar* z = logits.raw() + r * c;
        const Scalar m = *std::max_element(z, z + c);
        Scalar s = 0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - m);
        out[r] = m + std::log(s) - z[labels[r]];
        if (dlogits) {
            Scalar* dz = dlogits->raw() + r * c;
            for (std::size_t j = 0; j < c; ++j) dz[j] = weight[r] * std::exp(z[j] - m) / s;
            dz[labels[r]] -= weight[r];
        }
    }
    return out;
}

LossAndGrads batches_ce(LayeredModel& model, std::span<const DistilledBatch> others, bool want_grads) {
    LossAndGrads out;
    if (others.empty()) {
        if (want_grads) {
            for (const auto& [name, t] : model.parameters()) out.grads.emplace(name, Tensor(t.shape()));
        }
        return out;
    }
    std::vector<Tensor> parts;
    std::vector<std::size_t> labels;
    std::vector<Scalar> weight;
    std::vector<std::size_t> owner;
    for (std::size_t b = 0; b < others.size(); ++b) {
        const auto& batch = others[b];
        if (batch.distilled.rows() == 0) throw std::invalid_argument("diversity_loss: empty distilled batch");
        if (batch.source_labels.size() != batch.distilled.rows()) {
            throw std::invalid_argument("diversity_loss: source label count does not match batch");
        }
        parts.push_back(batch.distilled);
        labels.insert(labels.end(), batch.source_labels.begin(), batch.source_labels.end());
        const Scalar w = Scalar(1) / static_cast<Scalar>(batch.distilled.rows());
        weight.insert(weight.end(), batch.distilled.rows(), w);
        owner.insert(owner.end(), batch.distilled.rows(), b);
    }
    const Tensor x = concat_rows(parts);
    for (auto l : labels) {
        if (l >= model.classes()) throw std::invalid_argument("diversity_loss: label out of range");
    }
    const Tensor& logits = model.forward(x);
    Tensor dlogits;
    const auto ce = ce_rows(logits, labels, weight, want_grads ? &dlogits : nullptr);
    std::vector<double> per_batch(others.size(), 0.0);
    for (std::size_t r = 0; r < ce.size(); ++r) per_batch[owner[r]] += ce[r];
    for (std::size_t b = 0; b < others.size(); ++b) {
        out.loss += per_batch[b] / static_cast<double>(others[b].distilled.rows());
    }
    if (want_grads) out.grads = model.backward(dlogits, GradTarget::Parameters).params;
    return out;
}

}  // namespace

double diversity_loss(LayeredModel& model, std::span<const DistilledBatch> others) {
    return batches_ce(model, others, false).loss;
}

LossAndGrads diversity_loss_grad(LayeredModel& model, std::span<const DistilledBatch> others) {
    return batches_ce(model, others, true);
}

LossAndGrads cross_entropy_grad(LayeredModel& model, const Tensor& x, std::span<const std::size_t> labels) {
    if (x.rows() == 0) throw std::invalid_argument("cross_entropy_grad: empty batch");
    for (auto l : labels) {
        if (l >= model.classes()) throw std::invalid_argument("cross_entropy_grad: label out of range");
    }
    if (labels.size() != x.rows()) throw std::invalid_argument("cross_entropy_grad: label count mismatch");
    const Tensor& logits = model.forward(x);
    const std::vector<Scalar> weight(x.rows(), Scalar(1) / static_cast<Scalar>(x.rows()));
    Tensor dlogits;
    const auto ce = ce_rows(logits, labels, weight, &dlogits);
    LossAndGrads out;
    double s = 0;
    for (Scalar v : ce) s += v;
    out.loss = s / static_cast<double>(ce.size());
    out.grads = model.backward(dlogits, GradTarget::Parameters).params;
    return out;
}

DiversityEstimate pairwise_diversity(LayeredModel& fi, LayeredModel& fj, LabeledSet eval, const DistillSpec& distill,
                                     LayerPolicy policy, std::size_t samples, std::uint64_t seed, std::size_t batch) {
    if (eval.size() == 0 || eval.images == nullptr) throw std::invalid_argument("pairwise_diversity: empty eval set");
    if (samples < 1) throw std::invalid_argument("pairwise_diversity: sample count must be >= 1");
    if (fi.input_shape() != fj.input_shape() || fi.classes() != fj.classes()) {
        throw std::invalid_argument("pairwise_diversity: models differ in input shape or class count");
    }
    batch = std::max<std::size_t>(batch, 1);

    Rng rng(seed);
    std::vector<std::size_t> tgt(samples), src(samples);
    std::vector<double> u(samples);
    for (std::size_t k = 0; k < samples; ++k) {
        tgt[k] = rng.below(eval.size());
        src[k] = rng.below(eval.size());
        u[k] = rng.uniform();
    }

    // x' for `model` on rows [begin, end), grouped by the tap each row draws.
    auto distill_block = [&](LayeredModel& model, std::size_t begin, std::size_t end) {
        std::map<std::size_t, std::vector<std::size_t>> groups;
        for (std::size_t k = begin; k < end; ++k) groups[policy.pick(model.tap_count(), u[k])].push_back(k - begin);
        Tensor out;
        for (const auto& [layer, rows] : groups) {
            std::vector<std::size_t> ti, si, ty, sy;
            for (auto r : rows) {
                ti.push_back(tgt[begin + r]);
                si.push_back(src[begin + r]);
                ty.push_back(eval.labels[tgt[begin + r]]);
                sy.push_back(eval.labels[src[begin + r]]);
            }
            DistillSpec ds = distill;
            ds.layer = layer;
            DistilledBatch d = distill_features(model, ds, eval.images->gather_rows(ti), ty,
                                                eval.images->gather_rows(si), sy);
            if (out.empty()) {
                Shape shape = d.distilled.shape();
                shape[0] = end - begin;
                out = Tensor(shape);
            }
            for (std::size_t g = 0; g < rows.size(); ++g) out.set_row(rows[g], d.distilled.row(g));
        }
        return out;
    };

    double total = 0;
    for (std::size_t begin = 0; begin < samples; begin += batch) {
        const std::size_t end = std::min(samples, begin + batch);
        std::vector<std::size_t> y;
        for (std::size_t k = begin; k < end; ++k) y.push_back(eval.labels[tgt[k]]);
        const Tensor xi = distill_block(fi, begin, end);
        const Tensor xj = distill_block(fj, begin, end);
        const auto a = attack_loss(fi.forward(xj), y, LossKind::CE);
        const auto b = attack_loss(fj.forward(xi), y, LossKind::CE);
        for (std::size_t r = 0; r < a.size(); ++r) total += static_cast<double>(a[r] + b[r]);
    }

    DiversityEstimate est;
    est.model_i = fi.id();
    est.model_j = fj.id();
    est.value = 0.5 * total / static_cast<double>(samples);
    est.sample_count = samples;
    est.epsilon = distill.epsilon;
    est.layer_policy = policy.describe();
    return est;
}

double TransferMatrix::mean_off_diagonal() const {
    if (n < 2) return 0.0;
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (i != j) s += at(i, j);
        }
    }
    return s / static_cast<double>(n * (n - 1));
}

std::vector<std::size_t> commonly_correct(Ensemble& ensemble, LabeledSet eval, std::size_t batch) {
    std::vector<std::size_t> keep;
    batch = std::max<std::size_t>(batch, 1);
    for (std::size_t begin = 0; begin < eval.size(); begin += batch) {
        const std::size_t end = std::min(eval.size(), begin + batch);
        const Tensor x = eval.images->slice_rows(begin, end);
        std::vector<char> ok(end - begin, 1);
        for (auto& m : ensemble.members()) {
            const auto pred = argmax_rows(m.forward(x));
            for (std::size_t r = 0; r < ok.size(); ++r) {
                if (pred[r] != eval.labels[begin + r]) ok[r] = 0;
            }
        }
        for (std::size_t r = 0; r < ok.size(); ++r) {
            if (ok[r]) keep.push_back(begin + r);
        }
    }
    return keep;
}

TransferMatrix transfer_matrix(Ensemble& ensemble, const AttackSpec& spec, LabeledSet eval, std::size_t max_samples,
                               std::uint64_t seed, std::size_t workers) {
    if (ensemble.empty()) throw std::invalid_argument("transfer_matrix: empty ensemble");
    std::vector<std::size_t> idx = commonly_correct(ensemble, eval);
    if (idx.empty()) {
        throw std::runtime_error("transfer_matrix: no sample of " + std::to_string(eval.size()) +
                                 " is classified correctly by every sub-model");
    }
    if (max_samples > 0 && idx.size() > max_samples) {
        Rng rng(derive_seed(seed, "transfer-subset"));
        const auto perm = rng.permutation(idx.size());
        std::vector<std::size_t> chosen;
        for (std::size_t k = 0; k < max_samples; ++k) chosen.push_back(idx[perm[k]]);
        std::sort(chosen.begin(), chosen.end());
        idx = std::move(chosen);
    }
    const Tensor x = eval.images->gather_rows(idx);
    std::vector<std::size_t> y;
    for (auto i : idx) y.push_back(eval.labels[i]);

    TransferMatrix tm;
    tm.n = ensemble.size();
    tm.values.assign(tm.n * tm.n, 0.0);
    tm.epsilon = spec.epsilon;
    tm.steps = spec.steps;
    tm.restarts = spec.restarts;
    tm.sample_count = idx.size();
    tm.sample_indices = idx;
    const std::uint64_t attack_seed = derive_seed(seed, "transfer-attack");
    for (std::size_t i = 0; i < tm.n; ++i) {
        const AdvBatch adv = pgd_attack(ensemble[i], x, y, spec, attack_seed, workers);
        for (std::size_t j = 0; j < tm.n; ++j) tm.values[i * tm.n + j] = success_rate(adv, ensemble[j]);
    }
    return tm;
}

DVERGE_NAMESPACE_END
