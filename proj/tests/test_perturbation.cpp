#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "dladiff/perturbation.hpp"

using namespace dladiff;

TEST(Perturbation, ConstructorRejectsOverBudget) {
    Tensor d({2, 2, 3}, 0.0);
    d[5] = 0.05;
    EXPECT_THROW(Perturbation(d, 0.04, PerturbationLayer::ft), ParameterError);
    EXPECT_NO_THROW(Perturbation(d, 0.05, PerturbationLayer::ft));
}

TEST(Perturbation, ApplyClampsToUnitRange) {
    Tensor d({1, 2, 1}, 0.0);
    d[0] = 0.1;
    d[1] = -0.1;
    const Perturbation p(d, 0.1, PerturbationLayer::zs);
    Tensor x({1, 2, 1}, 0.0);
    x[0] = 0.95;
    x[1] = 0.05;
    const ImageTensor y = p.apply(ImageTensor(x));
    EXPECT_EQ(y.at(0, 0, 0), 1.0);
    EXPECT_EQ(y.at(0, 1, 0), 0.0);
}

TEST(Pgd, RandomizedStepsNeverLeaveTheBall) {
    std::mt19937_64 rng(42);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    int violations = 0;
    for (const auto& [eta, layer] : {std::pair{7.0 / 255.0, PerturbationLayer::ft},
                                     std::pair{11.0 / 255.0, PerturbationLayer::zs}}) {
        Perturbation d(Shape{4, 4, 3}, eta, layer);
        for (int i = 0; i < 1000; ++i) {
            const double sigma = std::pow(10.0, -4.0 + 4.0 * u(rng));
            const GradientMode mode = i % 2 ? GradientMode::sign : GradientMode::raw;
            const Tensor g = Tensor::randn({4, 4, 3}, rng, std::pow(10.0, -3.0 + 6.0 * u(rng)));
            d = pgd_step(d, g, sigma, mode).delta;
            if (d.linf() > eta) ++violations;
            if (i % 97 == 0) d = Perturbation(Shape{4, 4, 3}, eta, layer);
        }
    }
    EXPECT_EQ(violations, 0);
}

TEST(Pgd, SignStepMovesBySigma) {
    Tensor g({1, 1, 3}, 0.0);
    g[0] = 3.0;
    g[1] = -1e-9;
    const Perturbation d(Shape{1, 1, 3}, 0.1, PerturbationLayer::ft);
    const PgdStep s = pgd_step(d, g, 0.01, GradientMode::sign);
    EXPECT_TRUE(s.accepted);
    EXPECT_DOUBLE_EQ(s.delta.delta()[0], 0.01);
    EXPECT_DOUBLE_EQ(s.delta.delta()[1], -0.01);
    EXPECT_DOUBLE_EQ(s.delta.delta()[2], 0.0);
}

TEST(Pgd, NonFiniteGradientIsRejected) {
    Tensor g({1, 1, 2}, 1.0);
    g[1] = std::numeric_limits<double>::quiet_NaN();
    const Perturbation d(Tensor({1, 1, 2}, std::vector<double>{0.01, -0.01}), 0.1, PerturbationLayer::ft);
    const PgdStep s = pgd_step(d, g, 0.05, GradientMode::raw);
    EXPECT_FALSE(s.accepted);
    EXPECT_EQ(s.delta.delta(), d.delta());
}

TEST(Pgd, RejectsShapeMismatchAndBadSigma) {
    const Perturbation d(Shape{1, 1, 2}, 0.1, PerturbationLayer::ft);
    EXPECT_ANY_THROW(pgd_step(d, Tensor({1, 1, 3}, 1.0), 0.1, GradientMode::raw));
    EXPECT_ANY_THROW(pgd_step(d, Tensor({1, 1, 2}, 1.0), -0.1, GradientMode::raw));
}
