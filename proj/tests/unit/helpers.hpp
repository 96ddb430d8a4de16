#pragma once

#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "dverge/data_io.hpp"
#include "dverge/models.hpp"
#include "dverge/rng.hpp"
#include "dverge/training.hpp"

namespace testing_helpers {

using namespace dverge;

inline Tensor random_images(std::size_t n, std::uint64_t seed, Shape sample = {1, 16, 16}) {
    Shape s{n};
    s.insert(s.end(), sample.begin(), sample.end());
    Tensor x(s);
    Rng rng(seed);
    for (auto& v : x.values()) v = rng.uniform(0, 1);
    return x;
}

inline std::vector<std::size_t> random_labels(std::size_t n, std::size_t classes, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::size_t> y(n);
    for (auto& v : y) v = rng.below(classes);
    return y;
}

/// Single dense layer (one tap, which is the logits) with the given weights.
inline LayeredModel linear_model(Tensor weight, Tensor bias, std::string id = "lin") {
    LayerSpec d;
    d.kind = LayerKind::Dense;
    d.out = weight.dim(0);
    d.tap = true;
    LayeredModel m(std::move(id), {weight.dim(1)}, weight.dim(0), Activation::Relu, {d}, 0);
    m.parameters().at("layer0.weight") = std::move(weight);
    m.parameters().at("layer0.bias") = std::move(bias);
    return m;
}

inline SyntheticSpec small_synthetic(std::size_t per_class, std::uint64_t seed = 1) {
    SyntheticSpec s;
    s.per_class = per_class;
    s.noise = 0.2;
    s.jitter = 1;
    s.amplitude = 0.3;
    s.background = 0.35;
    s.seed = seed;
    return s;
}

/// A few epochs of clean training so attacks and distillation have signal.
inline Ensemble trained_ensemble(std::size_t n, const Dataset& train, std::size_t epochs, std::uint64_t seed = 7,
                                Scalar lr = Scalar(0.05)) {
    ModelSpec ms;
    ms.seed = seed;
    Ensemble e = Ensemble::build(ms, n);
    TrainPlan plan;
    plan.n = n;
    plan.seed = seed;
    plan.lr = lr;
    plan.batch_size = 16;
    pretrain_clean(e, plan, train, epochs);
    return e;
}

/// Members trained once per (n, seed) on a fixed 40-per-class set and reused
/// across tests (copies are returned).
inline Ensemble shared_trained(std::size_t n, std::uint64_t seed = 7) {
    static std::map<std::pair<std::size_t, std::uint64_t>, Ensemble> cache;
    auto it = cache.find({n, seed});
    if (it == cache.end()) {
        const Dataset train = gen_synthetic(small_synthetic(40), "train");
        it = cache.emplace(std::make_pair(n, seed), trained_ensemble(n, train, 12, seed)).first;
    }
    return it->second;
}

}  // namespace testing_helpers
