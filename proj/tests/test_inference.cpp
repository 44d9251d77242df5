// SPDX-License-Identifier: Apache-2.0

#include "oracles.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace fxq;

namespace {

// Direct transcription of the toy network: 3x3 same conv, relu, flatten,
// dense, softmax, one example at a time.
Tensor naive_toy_forward(const ModelGraph& g, const Tensor& images)
{
    const auto w = g.tensor("conv/w").data(), b = g.tensor("conv/b").data();
    const auto dw = g.tensor("dense/w").data(), db = g.tensor("dense/b").data();
    const std::size_t n = images.dim(0);
    Tensor out({n, 3});
    for (std::size_t e = 0; e < n; ++e) {
        std::vector<double> act(6 * 6 * 2);
        for (int y = 0; y < 6; ++y)
            for (int x = 0; x < 6; ++x)
                for (int o = 0; o < 2; ++o) {
                    double s = 0;
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int iy = y + ky - 1, ix = x + kx - 1;
                            if (iy < 0 || iy >= 6 || ix < 0 || ix >= 6)
                                continue;
                            s += images.data()[e * 36 + iy * 6 + ix] * w[(ky * 3 + kx) * 2 + o];
                        }
                    act[(y * 6 + x) * 2 + o] = std::max(0.0, s + b[o]);
                }
        double z[3], mx = -1e300, sum = 0;
        for (int u = 0; u < 3; ++u) {
            z[u] = db[u];
            for (int i = 0; i < 72; ++i)
                z[u] += act[i] * dw[i * 3 + u];
            mx = std::max(mx, z[u]);
        }
        for (int u = 0; u < 3; ++u)
            sum += std::exp(z[u] - mx);
        for (int u = 0; u < 3; ++u)
            out.data()[e * 3 + u] = std::exp(z[u] - mx) / sum;
    }
    return out;
}

double max_diff(const Tensor& a, const Tensor& b)
{
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

ModelGraph with_zero(const ModelGraph& g, const std::string& name)
{
    Tensor t = g.tensor(name);
    for (double& v : t.data())
        v = 0.0;
    std::map<std::string, Tensor> m;
    m.emplace(name, std::move(t));
    return g.with_tensors(std::move(m));
}

} // namespace

TEST(Forward, MatchesExporterReference)
{
    for (const auto& [model, ref] : {std::pair{&test::seq15(), "seq15_ref.fxqr"}, {&test::branch(), "branch_ref.fxqr"}}) {
        const Tensor scores = forward(*model, test::digits().images);
        const Tensor expected = load_reference_scores(test::fixture(ref));
        ASSERT_EQ(scores.shape(), expected.shape());
        EXPECT_LE(max_diff(scores, expected), 1e-4) << ref;
        EXPECT_EQ(detail::argmax_rows(scores), detail::argmax_rows(expected)) << ref;
    }
}

TEST(Forward, MatchesNaiveToyNetwork)
{
    const auto g = test::toy_model(3);
    std::mt19937 rng(4);
    const Tensor images = test::random_tensor({17, 6, 6, 1}, rng, 1.0);
    EXPECT_LE(max_diff(forward(g, images), naive_toy_forward(g, images)), 1e-12);
}

TEST(Forward, FixtureAccuracyMatchesMetadata)
{
    EXPECT_DOUBLE_EQ(accuracy(test::seq15(), test::digits()), 0.986);
    EXPECT_DOUBLE_EQ(accuracy(test::branch(), test::digits()), 0.995);
}

TEST(Forward, SoftmaxRowsAreDistributions)
{
    const Tensor s = forward(test::branch(), test::digits().images);
    for (std::size_t r = 0; r < s.dim(0); ++r) {
        double sum = 0;
        for (std::size_t c = 0; c < s.dim(1); ++c) {
            EXPECT_GE(s.data()[r * 10 + c], 0.0);
            sum += s.data()[r * 10 + c];
        }
        EXPECT_NEAR(sum, 1.0, 1e-6);
    }
}

TEST(Forward, DeterministicAcrossRunsPartitionsAndThreads)
{
    const auto& g = test::seq15();
    const auto& ds = test::digits();
    const Tensor a = forward(g, ds.images, nullptr, {1});
    const Tensor b = forward(g, ds.images, nullptr, {3});
    EXPECT_EQ(a, b);

    const auto head = ds.head(333);
    const Tensor part = forward(g, head.images, nullptr, {1});
    for (std::size_t i = 0; i < part.size(); ++i)
        ASSERT_EQ(part.data()[i], a.data()[i]);
}

TEST(Forward, EmptyPlanEqualsNoPlan)
{
    const QuantizationPlan empty;
    EXPECT_EQ(forward(test::branch(), test::digits().images),
              forward(test::branch(), test::digits().images, &empty));
}

TEST(Forward, IdentityPlanIsNearLossless)
{
    const auto& g = test::seq15();
    const auto& ds = test::digits();
    const auto plan = baseline_fixed_bitwidth(g, calibrate_activations(g, ds), 31);
    EXPECT_LE(max_diff(forward(g, ds.images, &plan), forward(g, ds.images)), 1e-6);
    EXPECT_EQ(accuracy(g, ds, &plan), accuracy(g, ds));
}

TEST(Forward, PrunedWeightsLeaveBiasOnlyMaps)
{
    const auto g = test::toy_model(5);
    std::mt19937 rng(6);
    const Tensor images = test::random_tensor({9, 6, 6, 1}, rng, 1.0);
    QuantizationPlan plan;
    plan.set("conv", ParamKind::Weights, {1, 4});
    const auto expected = naive_toy_forward(with_zero(g, "conv/w"), images);
    EXPECT_LE(max_diff(forward(g, images, &plan), expected), 1e-12);
}

TEST(Forward, ActivationsLieOnTheirGrid)
{
    const auto& g = test::seq15();
    const auto& ds = test::digits().head(50);
    QuantizationPlan plan;
    plan.set("conv2", ParamKind::Activations, {5, 2});
    plan.set("dense", ParamKind::Activations, {6, 1});
    detail::Executor ex(g, &plan, 1);
    auto env = ex.start(ds.images);
    std::size_t checked = 0;
    ex.run(env, 1, g.size(), [&](std::size_t i, const Tensor& out) {
        for (const char* q : {"conv2", "dense"}) {
            if (g.activation_site(g.index_of(q)) != i)
                continue;
            const auto r = *plan.get(q, ParamKind::Activations);
            for (double v : out.data()) {
                const double code = std::ldexp(v, r.f);
                ASSERT_EQ(code, std::trunc(code));
                ASSERT_LE(std::abs(code), r.threshold());
            }
            ++checked;
        }
    });
    EXPECT_EQ(checked, 2u);
}

TEST(Forward, BatchShapeMismatch)
{
    EXPECT_THROW(forward(test::seq15(), Tensor({2, 27, 28, 1})), ShapeError);
}

TEST(Accuracy, ConstantScoresPickLowestClass)
{
    auto g = with_zero(with_zero(test::toy_model(7), "dense/w"), "dense/b");
    const auto ds = test::toy_dataset(test::toy_model(7), 40);
    std::size_t zeros = 0;
    for (auto l : ds.labels)
        zeros += l == 0;
    EXPECT_DOUBLE_EQ(accuracy(g, ds), static_cast<double>(zeros) / 40.0);
}

TEST(Calibrate, FixtureProfilePositiveAndDeterministic)
{
    const auto& g = test::seq15();
    const auto p1 = calibrate_activations(g, test::digits());
    const auto p2 = calibrate_activations(g, test::digits());
    EXPECT_EQ(p1.max_abs.size(), 15u);
    for (const auto& [layer, v] : p1.max_abs)
        EXPECT_GT(v, 0.0) << layer;
    EXPECT_EQ(p1.max_abs, p2.max_abs);
}

TEST(Calibrate, ZeroWeightsGiveBiasDrivenMaxima)
{
    const auto g = with_zero(with_zero(test::toy_model(8, 0.5), "conv/w"), "dense/w");
    const auto ds = test::toy_dataset(test::toy_model(8), 20);
    const auto p = calibrate_activations(g, ds);
    const auto cb = g.tensor("conv/b").data(), db = g.tensor("dense/b").data();
    EXPECT_EQ(p.at("conv"), std::max({0.0, cb[0], cb[1]}));
    EXPECT_EQ(p.at("dense"), std::max({std::abs(db[0]), std::abs(db[1]), std::abs(db[2])}));
}

TEST(Calibrate, SubsetUsesLeadingExamples)
{
    const auto& g = test::seq15();
    const auto& ds = test::digits();
    EXPECT_EQ(calibrate_activations(g, ds, 100).max_abs, calibrate_activations(g, ds.head(100)).max_abs);
}

TEST(Calibrate, IgnoresArmedHooks)
{
    const auto& g = test::seq15();
    QuantizationPlan plan;
    plan.set("conv4", ParamKind::Activations, {2, 0});
    const auto armed = apply_plan(g, plan);
    EXPECT_EQ(calibrate_activations(armed, test::digits().head(64)).max_abs,
              calibrate_activations(g, test::digits().head(64)).max_abs);
}
