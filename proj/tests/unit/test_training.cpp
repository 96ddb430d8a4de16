#include <gtest/gtest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "dverge/eval_harness.hpp"
#include "dverge/training.hpp"
#include "helpers.hpp"

using namespace dverge;
using namespace testing_helpers;

namespace {

// Two linearly separable blobs in 2-D, as [N, 2] rows in [0, 1].
Dataset separable(std::size_t n, std::uint64_t seed) {
    Dataset d;
    d.images = Tensor({n, 1, 1, 2});
    d.classes = 2;
    d.split = "train";
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t y = i % 2;
        d.labels.push_back(y);
        d.images[2 * i] = y ? rng.uniform(0.6f, 0.9f) : rng.uniform(0.1f, 0.4f);
        d.images[2 * i + 1] = rng.uniform(0, 1);
    }
    return d;
}

TrainPlan small_plan(std::size_t n, std::uint64_t seed = 1) {
    TrainPlan p;
    p.n = n;
    p.seed = seed;
    p.epochs = 1;
    p.batch_size = 32;
    p.batches_per_epoch = 3;
    p.lr = 0.01f;
    return p;
}

void expect_close(const ParamMap& a, const ParamMap& b) {
    ASSERT_EQ(a.size(), b.size());
    for (const auto& [name, t] : a) {
        EXPECT_LE(max_abs_diff(t, b.at(name)), 1e-6) << name;
    }
}

}  // namespace

TEST(Plan, LearningRateSchedule) {
    TrainPlan p;
    p.lr = 0.1f;
    EXPECT_FLOAT_EQ(p.lr_at(0, 10), 0.1f);
    EXPECT_FLOAT_EQ(p.lr_at(5, 10), 0.1f);
    EXPECT_FLOAT_EQ(p.lr_at(6, 10), 0.01f);
    EXPECT_FLOAT_EQ(p.lr_at(9, 10), 0.001f);
    p.decay_epochs = {2};
    EXPECT_FLOAT_EQ(p.lr_at(2, 10), 0.01f);
}

TEST(Plan, ValidationAndModeNames) {
    TrainPlan p;
    p.lr = 0;
    EXPECT_THROW(p.validate(), std::invalid_argument);
    p = TrainPlan{};
    p.frozen = {true};
    EXPECT_THROW(p.validate(), std::invalid_argument);
    for (auto m : {TrainMode::Baseline, TrainMode::Dverge, TrainMode::AdvT, TrainMode::DvergeAdvT}) {
        EXPECT_EQ(parse_train_mode(to_string(m)), m);
    }
    EXPECT_THROW(parse_train_mode("gal"), std::invalid_argument);
    AttackSpec a = TrainPlan::default_advt();
    EXPECT_FLOAT_EQ(a.epsilon, 8.0f / 255);
    EXPECT_EQ(a.steps, 10u);
    EXPECT_FLOAT_EQ(a.step_size, 2.0f / 255);
}

TEST(RollingMean, TrailingWindow) {
    std::vector<double> v{1, 2, 3, 4, 5};
    EXPECT_EQ(rolling_mean(v, 2), (std::vector<double>{1, 1.5, 2.5, 3.5, 4.5}));
    EXPECT_EQ(rolling_mean(v, 1), v);
    EXPECT_THROW(rolling_mean(v, 0), std::invalid_argument);
}

TEST(Pretrain, SeparableSetLearnedInOneEpoch) {
    Dataset d = separable(512, 3);
    ModelSpec ms{Architecture::MlpSmall, {1, 1, 2}, 2, 1, Activation::Relu, 5};
    Ensemble e(std::vector<LayeredModel>{build_model(ms)});
    TrainPlan p = small_plan(1);
    p.batches_per_epoch = 0;
    p.lr = 0.05f;
    pretrain_clean(e, p, d, 1);
    EXPECT_GT(clean_accuracy(e, {&d.images, d.labels}), 0.9);
}

TEST(Pretrain, ZeroEpochsLeavesParameters) {
    Dataset d = gen_synthetic(small_synthetic(4), "train");
    Ensemble e = Ensemble::build(ModelSpec{}, 2);
    const Ensemble before = e;
    auto log = pretrain_clean(e, small_plan(2), d, 0);
    EXPECT_TRUE(log.records.empty());
    for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(e[i].parameters(), before[i].parameters());
}

TEST(Pretrain, DeterministicAcrossRunsAndWorkers) {
    Dataset d = gen_synthetic(small_synthetic(6), "train");
    Ensemble a = Ensemble::build(ModelSpec{}, 2), b = a, c = a;
    TrainPlan p = small_plan(2);
    pretrain_clean(a, p, d, 2);
    pretrain_clean(b, p, d, 2);
    p.workers = 2;
    pretrain_clean(c, p, d, 2);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(a[i].parameters(), b[i].parameters());
        EXPECT_EQ(a[i].parameters(), c[i].parameters());
    }
}

TEST(DvergeEpoch, SingleModelIsUnchanged) {
    Dataset d = gen_synthetic(small_synthetic(4), "train");
    Ensemble e = Ensemble::build(ModelSpec{}, 1);
    const Ensemble before = e;
    TrainState st;
    dverge_epoch(e, small_plan(1), d, 0, st);
    EXPECT_EQ(e[0].parameters(), before[0].parameters());
}

// With f_2 frozen, f_1 takes exactly one SGD step on CE(f_1(X'_2), Y_s).
TEST(DvergeEpoch, FrozenPartnerGivesSingleTermUpdate) {
    Dataset d = gen_synthetic(small_synthetic(4), "train");
    Ensemble e = Ensemble::build(ModelSpec{}, 2);
    TrainPlan p = small_plan(2, 9);
    p.batches_per_epoch = 1;
    p.frozen = {false, true};
    p.momentum = 0;
    p.weight_decay = 0;
    Ensemble ref = e;

    TrainState st;
    EpochRecord rec = dverge_epoch(e, p, d, 0, st);
    EXPECT_EQ(e[1].parameters(), ref[1].parameters());

    // Replay the epoch's draws to build the single term by hand.
    Rng rng(derive_seed(derive_seed(p.seed, "dverge"), 0));
    const double draw = rng.uniform();
    auto batches = shuffled_batches(d.size(), p.batch_size, rng.next_u64());
    const auto& idx = batches[0];
    std::vector<std::size_t> sidx(idx.size());
    for (auto& s : sidx) s = rng.below(d.size());
    Tensor x = d.images.gather_rows(idx), xs = d.images.gather_rows(sidx);
    std::vector<std::size_t> y, ys;
    for (auto i : idx) y.push_back(d.labels[i]);
    for (auto i : sidx) ys.push_back(d.labels[i]);
    DistillSpec ds = p.distill;
    ds.layer = p.layer_policy.pick(ref[1].tap_count(), draw);
    EXPECT_EQ(*rec.layer, ds.layer);
    std::vector<DistilledBatch> other{distill_features(ref[1], ds, x, y, xs, ys)};
    LossAndGrads lg = cross_entropy_grad(ref[0], other[0].distilled, other[0].source_labels);
    EXPECT_NEAR(rec.loss[0], lg.loss, 1e-6);
    for (const auto& [name, t] : ref[0].parameters()) {
        const Tensor& after = e[0].parameters().at(name);
        const Tensor& g = lg.grads.at(name);
        for (std::size_t k = 0; k < t.size(); ++k) EXPECT_NEAR(after[k], t[k] - p.lr * g[k], 1e-6) << name;
    }
}

TEST(DvergeEpoch, MemberOrderDoesNotMatter) {
    Dataset d = gen_synthetic(small_synthetic(4), "train");
    Ensemble e = Ensemble::build(ModelSpec{}, 3);
    Ensemble swapped(std::vector<LayeredModel>{e[2], e[0], e[1]});
    TrainPlan p = small_plan(3, 4);
    TrainState s1, s2;
    dverge_epoch(e, p, d, 0, s1);
    dverge_epoch(swapped, p, d, 0, s2);
    // the other members' terms are summed in a different order, so compare to rounding
    expect_close(swapped[0].parameters(), e[2].parameters());
    expect_close(swapped[1].parameters(), e[0].parameters());
    expect_close(swapped[2].parameters(), e[1].parameters());
}

TEST(DvergeEpoch, FixedShallowAndDeepLayersRun) {
    Dataset d = gen_synthetic(small_synthetic(4), "train");
    for (std::size_t layer : {std::size_t{1}, std::size_t{4}}) {
        Ensemble e = Ensemble::build(ModelSpec{}, 2);
        TrainPlan p = small_plan(2);
        p.layer_policy = LayerPolicy::fixed(layer);
        TrainState st;
        EpochRecord r = dverge_epoch(e, p, d, 0, st);
        EXPECT_EQ(*r.layer, layer);
        for (double l : r.loss) EXPECT_TRUE(std::isfinite(l));
    }
}

TEST(AdvtStep, ZeroEpsilonIsCleanStep) {
    Dataset d = gen_synthetic(small_synthetic(2), "train");
    Ensemble e = Ensemble::build(ModelSpec{}, 2);
    AttackSpec s = TrainPlan::default_advt();
    s.epsilon = 0;
    Tensor x = d.images.slice_rows(0, 10);
    std::vector<std::size_t> y(d.labels.begin(), d.labels.begin() + 10);
    StepResult r = advt_step(e.members(), x, y, s, 3);
    for (std::size_t i = 0; i < 2; ++i) {
        LossAndGrads clean = cross_entropy_grad(e[i], x, y);
        EXPECT_EQ(r.loss[i], clean.loss);
        EXPECT_EQ(r.grads[i], clean.grads);
    }
}

TEST(AdvtStep, DeterministicForFixedSeed) {
    Dataset d = gen_synthetic(small_synthetic(2), "train");
    Ensemble e = Ensemble::build(ModelSpec{}, 2);
    Tensor x = d.images.slice_rows(0, 10);
    std::vector<std::size_t> y(d.labels.begin(), d.labels.begin() + 10);
    auto a = advt_step(e.members(), x, y, TrainPlan::default_advt(), 11);
    auto b = advt_step(e.members(), x, y, TrainPlan::default_advt(), 11);
    EXPECT_EQ(a.loss, b.loss);
}

TEST(AdvtStep, LogisticAdversarialLossAtLeastClean) {
    LayeredModel m = linear_model(Tensor({2, 1}, {0, 3}), Tensor({2}, {0.5f, 0}));
    Tensor x({4, 1}, {0.1f, 0.4f, 0.6f, 0.9f});
    std::vector<std::size_t> y{0, 0, 1, 1};
    AttackSpec s = TrainPlan::default_advt();
    s.epsilon = 0.1f;
    s.step_size = 0.02f;
    auto r = advt_step(std::span<LayeredModel>(&m, 1), x, y, s, 1);
    EXPECT_GE(r.loss[0], cross_entropy_grad(m, x, y).loss);
}

TEST(CombinedStep, ZeroLambdaEqualsAdvt) {
    Dataset d = gen_synthetic(small_synthetic(3), "train");
    Ensemble e = Ensemble::build(ModelSpec{}, 3);
    TrainPlan p = small_plan(3);
    p.mode = TrainMode::DvergeAdvT;
    p.lambda = 0;
    Tensor x = d.images.slice_rows(0, 8), xs = d.images.slice_rows(8, 16);
    std::vector<std::size_t> y(d.labels.begin(), d.labels.begin() + 8), ys(d.labels.begin() + 8, d.labels.begin() + 16);
    TrainState st;
    StepResult c = combined_step(e, x, y, xs, ys, p, 0.3, 5, st, p.sgd(0, 1), false);
    for (std::size_t i = 0; i < 3; ++i) {
        auto a = advt_step(std::span<LayeredModel>(&e[i], 1), xs, ys, p.advt, sub_model_seed(5, i));
        EXPECT_EQ(c.loss[i], a.loss[0]);
        EXPECT_EQ(c.grads[i], a.grads[0]);
    }
}

TEST(CombinedStep, UnitLambdaZeroEpsilonIsDivergencePlusCleanCe) {
    Dataset d = gen_synthetic(small_synthetic(3), "train");
    Ensemble e = Ensemble::build(ModelSpec{}, 2);
    TrainPlan p = small_plan(2);
    p.mode = TrainMode::DvergeAdvT;
    p.lambda = 1;
    p.advt.epsilon = 0;
    p.layer_policy = LayerPolicy::fixed(2);
    Tensor x = d.images.slice_rows(0, 8), xs = d.images.slice_rows(8, 16);
    std::vector<std::size_t> y(d.labels.begin(), d.labels.begin() + 8), ys(d.labels.begin() + 8, d.labels.begin() + 16);
    TrainState st;
    StepResult c = combined_step(e, x, y, xs, ys, p, 0.0, 5, st, p.sgd(0, 1), false);
    for (std::size_t i = 0; i < 2; ++i) {
        DistillSpec ds = p.distill;
        ds.layer = 2;
        std::vector<DistilledBatch> other{distill_features(e[1 - i], ds, x, y, xs, ys)};
        const double expected = diversity_loss(e[i], other) + cross_entropy_grad(e[i], xs, ys).loss;
        EXPECT_NEAR(c.loss[i], expected, 1e-6);
    }
}

TEST(Train, FullRunIsDeterministic) {
    Dataset d = gen_synthetic(small_synthetic(4), "train");
    Dataset t = gen_synthetic(small_synthetic(2), "test");
    TrainPlan p = small_plan(2);
    p.epochs = 2;
    p.pretrain_epochs = 1;
    p.probe.enabled = true;
    p.probe.samples = 10;
    p.probe.diversity_samples = 10;
    p.probe.attack.steps = 3;
    Ensemble a = Ensemble::build(ModelSpec{}, 2), b = a;
    TrainLog la = train(a, p, d, &t), lb = train(b, p, d, &t);
    EXPECT_EQ(la.to_jsonl(), lb.to_jsonl());
    EXPECT_EQ(la.records.size(), 3u);
    EXPECT_EQ(la.records[0].phase, "pretrain");
    EXPECT_EQ(la.records[1].phase, "dverge");
    EXPECT_TRUE(la.records[1].diversity.has_value());
    for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(a[i].parameters(), b[i].parameters());
}

TEST(Train, PretrainLearningRateIsSeparate) {
    Dataset d = gen_synthetic(small_synthetic(4), "train");
    TrainPlan p = small_plan(1);
    p.mode = TrainMode::Baseline;
    p.pretrain_epochs = 1;
    p.epochs = 1;
    p.pretrain_lr = 0.02f;
    Ensemble e = Ensemble::build(ModelSpec{}, 1);
    TrainLog log = train(e, p, d);
    EXPECT_FLOAT_EQ(log.records[0].lr, 0.02f);
    EXPECT_FLOAT_EQ(log.records[1].lr, 0.01f);
}

TEST(Train, DvergeWithoutPretrainingRuns) {
    Dataset d = gen_synthetic(small_synthetic(4), "train");
    TrainPlan p = small_plan(2);
    p.epochs = 2;
    Ensemble e = Ensemble::build(ModelSpec{}, 2);
    TrainLog log = train(e, p, d);
    ASSERT_EQ(log.records.size(), 2u);
    for (const auto& r : log.records) EXPECT_EQ(r.phase, "dverge");
}

TEST(Train, MemberCountMustMatchPlan) {
    Dataset d = gen_synthetic(small_synthetic(2), "train");
    Ensemble e = Ensemble::build(ModelSpec{}, 2);
    EXPECT_THROW(train(e, small_plan(3), d), std::invalid_argument);
}
