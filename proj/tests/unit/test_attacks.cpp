#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "dverge/attacks.hpp"
#include "dverge/data_io.hpp"
#include "helpers.hpp"

using namespace dverge;
using namespace testing_helpers;

namespace {

// logits = [0, w x]: with label 0 the CE loss grows with x.
LayeredModel logistic(Scalar w) { return linear_model(Tensor({2, 1}, {0, w}), Tensor({2})); }

// logits = [0, relu(x - c) + relu(c - x)]: label-0 loss grows with |x - c|.
LayeredModel vee(Scalar c) {
    LayerSpec h;
    h.kind = LayerKind::Dense;
    h.out = 2;
    h.activation = true;
    h.tap = true;
    LayerSpec o = h;
    o.activation = false;
    LayeredModel m("vee", {1}, 2, Activation::Relu, {h, o}, 0);
    m.parameters().at("layer0.weight") = Tensor({2, 1}, {1, -1});
    m.parameters().at("layer0.bias") = Tensor({2}, {-c, c});
    m.parameters().at("layer1.weight") = Tensor({2, 2}, {0, 0, 1, 1});
    m.parameters().at("layer1.bias") = Tensor({2});
    return m;
}

AttackSpec spec_with(Scalar eps, std::size_t steps, Scalar step) {
    AttackSpec s;
    s.epsilon = eps;
    s.steps = steps;
    s.step_size = step;
    return s;
}

}  // namespace

TEST(AttackLoss, CrossEntropyClosedForm) {
    std::vector<std::size_t> y{0};
    auto l = attack_loss(Tensor({1, 3}, {10, 0, 0}), y, LossKind::CE);
    const double expected = -std::log(std::exp(10.0) / (std::exp(10.0) + 2.0));
    EXPECT_NEAR(l[0], expected, 1e-6);
    EXPECT_NEAR(l[0], 9.1e-5, 1e-6);
}

TEST(AttackLoss, CarliniWagnerMargin) {
    std::vector<std::size_t> y{0};
    EXPECT_EQ(attack_loss(Tensor({1, 2}, {1, 1}), y, LossKind::CW)[0], 0);
    EXPECT_EQ(attack_loss(Tensor({1, 2}, {0, 5}), y, LossKind::CW)[0], 5);
}

TEST(AttackLoss, LabelOutOfRangeRejected) {
    std::vector<std::size_t> y{3};
    EXPECT_THROW(attack_loss(Tensor({1, 3}), y, LossKind::CE), std::invalid_argument);
}

TEST(Pgd, ZeroEpsilonReturnsOriginals) {
    Ensemble e = Ensemble::build(ModelSpec{}, 2);
    Tensor x = random_images(8, 1);
    auto y = random_labels(8, 10, 2);
    AdvBatch adv = pgd_attack(e, x, y, spec_with(0, 5, 0.01f), 3);
    EXPECT_EQ(adv.adversarials, x);
    auto pred = ensemble_predict(e, x).labels;
    for (std::size_t r = 0; r < 8; ++r) EXPECT_EQ(adv.success[r], pred[r] != y[r]);
}

TEST(Pgd, OneSignStepOnLogisticModel) {
    LayeredModel m = logistic(2);
    Tensor x({1, 1}, {0.5f});
    std::vector<std::size_t> y{0};
    AttackSpec s = spec_with(0.1f, 1, 0.01f);
    s.momentum = 0;
    AdvBatch adv = pgd_attack(m, x, y, s, 0);
    EXPECT_FLOAT_EQ(adv.adversarials[0], x[0] + 0.01f);
}

TEST(Pgd, QuadraticLikeLossReachesBoundary) {
    // Brute force over the ball confirms the optimum sits on the boundary.
    const Scalar c = 0.5f, eps = 0.1f, step = 0.007f;
    LayeredModel m = vee(c);
    std::vector<std::size_t> y{0};
    double grid_best = -1;
    Scalar grid_arg = 0;
    for (int k = -100; k <= 100; ++k) {
        Scalar d = eps * Scalar(k) / 100;
        Tensor p({1, 1}, {c + Scalar(0.001) + d});
        double l = attack_loss(m.forward(p), y, LossKind::CE)[0];
        if (l > grid_best) grid_best = l, grid_arg = d;
    }
    EXPECT_NEAR(std::abs(grid_arg), eps, 1e-6);

    Tensor x({1, 1}, {c + Scalar(0.001)});
    AdvBatch adv = pgd_attack(m, x, y, spec_with(eps, 50, step), 0);
    EXPECT_NEAR(std::abs(adv.adversarials[0] - x[0]), eps, step);
    EXPECT_GE(adv.final_loss[0], grid_best - 1e-3);
}

TEST(Pgd, ZeroGradientFlagged) {
    LayeredModel m = logistic(0);
    Tensor x({2, 1}, {0.2f, 0.7f});
    std::vector<std::size_t> y{0, 1};
    AdvBatch adv = pgd_attack(m, x, y, spec_with(0.1f, 4, 0.02f), 0);
    EXPECT_TRUE(adv.zero_gradient);
    EXPECT_EQ(adv.adversarials, x);
}

TEST(Pgd, ConstraintsHoldForRandomModels) {
    for (std::uint64_t trial = 0; trial < 4; ++trial) {
        ModelSpec ms;
        ms.seed = trial;
        ms.arch = trial % 2 ? Architecture::MlpSmall : Architecture::CnnSmall;
        Ensemble e = Ensemble::build(ms, 2);
        Tensor x = random_images(16, 10 + trial);
        auto y = random_labels(16, 10, trial);
        AttackSpec s = spec_with(0.05f, 10, 0.02f);
        s.restarts = 2;
        s.loss = trial % 2 ? LossKind::CW : LossKind::CE;
        for (const AdvBatch& a : pgd_restarts(e.members(), x, y, s, trial)) {
            EXPECT_EQ(first_violation(x, a.adversarials, s.epsilon), -1);
        }
    }
}

TEST(Pgd, ReturnedLossDominatesStartingPoint) {
    Ensemble e = Ensemble::build(ModelSpec{}, 3);
    Tensor x = random_images(12, 4);
    auto y = random_labels(12, 10, 4);
    AttackSpec s = spec_with(0.03f, 8, 0.006f);
    s.restarts = 3;
    AdvBatch adv = pgd_attack(e, x, y, s, 5);
    auto clean = attack_objective(e.members(), x, y, LossKind::CE, false, false).loss;
    for (std::size_t r = 0; r < 12; ++r) EXPECT_GE(adv.final_loss[r], clean[r]);
}

TEST(Pgd, EnsembleObjectiveIsLogOfMeanProbability) {
    Ensemble e = Ensemble::build(ModelSpec{}, 3);
    Tensor x = random_images(5, 6);
    auto y = random_labels(5, 10, 6);
    auto loss = attack_objective(e.members(), x, y, LossKind::CE, false, false).loss;
    Prediction p = ensemble_predict(e, x);
    for (std::size_t r = 0; r < 5; ++r) EXPECT_NEAR(loss[r], -std::log(p.prob[r * 10 + y[r]]), 1e-5);
}

TEST(Pgd, SeedAndWorkerCountDoNotChangeResult) {
    Ensemble e = Ensemble::build(ModelSpec{}, 2);
    Tensor x = random_images(20, 7);
    auto y = random_labels(20, 10, 7);
    AttackSpec s = spec_with(0.03f, 5, 0.006f);
    s.restarts = 2;
    AdvBatch a = pgd_attack(e, x, y, s, 9, 1);
    AdvBatch b = pgd_attack(e, x, y, s, 9, 1);
    AdvBatch c = pgd_attack(e, x, y, s, 9, 3);
    EXPECT_EQ(a.adversarials, b.adversarials);
    EXPECT_EQ(a.adversarials, c.adversarials);
    EXPECT_EQ(a.final_loss, c.final_loss);
}

TEST(Pgd, TargetedAttackMovesTowardTarget) {
    LayeredModel m = logistic(4);
    Tensor x({1, 1}, {0.5f});
    std::vector<std::size_t> y{1};
    AttackSpec s = spec_with(0.2f, 10, 0.05f);
    s.targeted = true;
    s.target_labels = {0};
    AdvBatch adv = pgd_attack(m, x, y, s, 0);
    EXPECT_LT(adv.adversarials[0], x[0]);
}

TEST(SuccessRate, MatchesMaskWhenEvaluatorIsTarget) {
    Ensemble e = Ensemble::build(ModelSpec{}, 2);
    Tensor x = random_images(24, 8);
    auto y = random_labels(24, 10, 8);
    AdvBatch adv = pgd_attack(e, x, y, spec_with(0.1f, 5, 0.03f), 1);
    double mask = 0;
    for (bool s : adv.success) mask += s;
    EXPECT_DOUBLE_EQ(success_rate(adv, e), mask / 24);
}

TEST(SuccessRate, CleanCorrectInputsGiveZero) {
    Ensemble e = Ensemble::build(ModelSpec{}, 2);
    Tensor x = random_images(10, 9);
    AdvBatch adv;
    adv.originals = adv.adversarials = x;
    adv.labels = ensemble_predict(e, x).labels;
    EXPECT_EQ(success_rate(adv, e), 0.0);
}

TEST(SuccessRate, IdenticalTwinMatchesTarget) {
    ModelSpec ms;
    ms.seed = 12;
    LayeredModel m = build_model(ms);
    LayeredModel twin = m;
    Tensor x = random_images(16, 10);
    auto y = random_labels(16, 10, 10);
    AdvBatch adv = pgd_attack(m, x, y, spec_with(0.1f, 5, 0.03f), 2);
    EXPECT_EQ(success_rate(adv, twin), success_rate(adv, m));
}

// Adversarials found at a small epsilon stay feasible at a larger one, so
// pooling them into the larger attack cannot lower its success rate.
TEST(Pgd, FeasibilityTransfersToLargerEpsilon) {
    ModelSpec ms;
    ms.seed = 13;
    LayeredModel m = build_model(ms);
    Tensor x = random_images(16, 11);
    auto y = random_labels(16, 10, 11);
    AttackSpec small = spec_with(0.02f, 10, 0.004f);
    AttackSpec large = spec_with(0.05f, 10, 0.004f);
    AdvBatch a = pgd_attack(m, x, y, small, 3);
    EXPECT_EQ(first_violation(x, a.adversarials, large.epsilon), -1);
    AdvBatch b = pgd_attack(m, x, y, large, 3);
    double pooled = 0, small_rate = 0;
    for (std::size_t r = 0; r < 16; ++r) {
        pooled += (a.success[r] || b.success[r]) ? 1 : 0;
        small_rate += a.success[r] ? 1 : 0;
    }
    EXPECT_GE(pooled, small_rate);
    EXPECT_EQ(small_rate / 16, success_rate(a, m));
}

TEST(Constraint, FirstViolationFindsOffendingRow) {
    Tensor anchor({3, 2}, {0.5f, 0.5f, 0.5f, 0.5f, 0.5f, 0.5f});
    Tensor pts = anchor;
    EXPECT_EQ(first_violation(anchor, pts, 0.1f), -1);
    pts[3] = 0.65f;
    EXPECT_EQ(first_violation(anchor, pts, 0.1f), 1);
    pts[3] = 0.5f;
    pts[4] = 1.01f;
    EXPECT_EQ(first_violation(anchor, pts, 1.0f), 2);
}

TEST(Pgd, InputsOutsideUnitRangeRejected) {
    LayeredModel m = logistic(1);
    Tensor x({1, 1}, {1.5f});
    std::vector<std::size_t> y{0};
    EXPECT_THROW(pgd_attack(m, x, y, spec_with(0.1f, 1, 0.01f), 0), std::invalid_argument);
}
