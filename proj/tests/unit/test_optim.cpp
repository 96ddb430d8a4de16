#include <gtest/gtest.h>

#include <stdexcept>

#include "dverge/optim.hpp"

using namespace dverge;

namespace {
SgdConfig cfg(Scalar lr, Scalar momentum, Scalar wd) {
    SgdConfig c;
    c.lr = lr;
    c.momentum = momentum;
    c.weight_decay = wd;
    return c;
}
}  // namespace

TEST(Sgd, PlainStep) {
    ParamMap p{{"w", Tensor({1}, {1.0f})}}, g{{"w", Tensor({1}, {0.5f})}}, v;
    sgd_step(p, g, cfg(0.1f, 0, 0), v);
    EXPECT_FLOAT_EQ(p.at("w")[0], 0.95f);
}

TEST(Sgd, MomentumRecurrence) {
    ParamMap p{{"w", Tensor({1}, {0.0f})}}, g{{"w", Tensor({1}, {1.0f})}}, v;
    sgd_step(p, g, cfg(1, 0.9f, 0), v);
    EXPECT_FLOAT_EQ(p.at("w")[0], -1.0f);
    sgd_step(p, g, cfg(1, 0.9f, 0), v);
    EXPECT_FLOAT_EQ(p.at("w")[0], -2.9f);
}

TEST(Sgd, ZeroGradientIsFixedPoint) {
    ParamMap p{{"w", Tensor({2}, {0.3f, -4.0f})}}, g{{"w", Tensor({2})}}, v;
    const ParamMap before = p;
    sgd_step(p, g, cfg(0.5f, 0.9f, 0), v);
    EXPECT_EQ(p, before);
}

TEST(Sgd, WeightDecayShrinks) {
    ParamMap p{{"w", Tensor({1}, {2.0f})}}, g{{"w", Tensor({1})}}, v;
    sgd_step(p, g, cfg(0.1f, 0, 0.5f), v);
    EXPECT_FLOAT_EQ(p.at("w")[0], 1.9f);
}

TEST(Sgd, MissingGradientRejected) {
    ParamMap p{{"w", Tensor({1})}, {"b", Tensor({1})}}, g{{"w", Tensor({1})}}, v;
    EXPECT_THROW(sgd_step(p, g, cfg(0.1f, 0, 0), v), std::invalid_argument);
}
