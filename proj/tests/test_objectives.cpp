#include <gtest/gtest.h>

#include "fd_check.hpp"
#include "smunet/objectives.hpp"

using namespace smunet;

namespace {

Var<double> random_logits(Dims3 sp, std::uint64_t seed, bool grad = true) {
    Rng rng(seed);
    Tensor<double> t = Tensor<double>::feature_map(4, sp);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
    return make_leaf(std::move(t), grad);
}

Tensor<std::uint8_t> random_labels(Dims3 sp, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<std::uint8_t> t({sp.d, sp.h, sp.w});
    for (std::int64_t i = 0; i < t.size(); ++i)
        t[i] = static_cast<std::uint8_t>(kLabelValues[rng.below(4)]);
    return t;
}

StyleRepresentation<double> style_of(std::vector<Var<double>> layers) {
    StyleRepresentation<double> s;
    for (auto& l : layers) {
        s.layers.push_back(l);
        s.channels.push_back(l->value.channels());
        s.positions.push_back(l->value.spatial().voxels());
    }
    return s;
}

} // namespace

TEST(DiceLoss, PerfectPredictionNearZero) {
    const Dims3 sp{4, 4, 4};
    auto labels = random_labels(sp, 1);
    Tensor<double> logits = Tensor<double>::feature_map(4, sp);
    const std::int64_t nvox = sp.voxels();
    for (std::int64_t i = 0; i < nvox; ++i)
        for (std::int64_t c = 0; c < 4; ++c)
            logits[c * nvox + i] = (label_to_class(labels[i]) == c) ? 20.0 : -20.0;
    const double loss = dice_loss(make_const(std::move(logits)), labels)->value.item();
    EXPECT_LT(loss, 1e-3);
    EXPECT_GE(loss, 0.0);
}

TEST(DiceLoss, UniformLogitsSingleClassClosedForm) {
    // 2^3 grid, all voxels labeled class 1, uniform softmax p = 1/4:
    // dice = (2*0.25*8 + eps) / (0.25*8 + 8 + eps), loss = 1 - dice.
    const Dims3 sp{2, 2, 2};
    Tensor<std::uint8_t> labels({2, 2, 2});
    labels.fill(1);
    auto logits = make_const(Tensor<double>::feature_map(4, sp)); // all zero -> uniform
    const double expected = 1.0 - (2 * 0.25 * 8 + kDiceEps) / (0.25 * 8 + 8 + kDiceEps);
    EXPECT_NEAR(dice_loss(logits, labels)->value.item(), expected, 1e-12);
}

TEST(DiceLoss, RangeAndValidation) {
    for (std::uint64_t s = 0; s < 10; ++s) {
        auto v = dice_loss(random_logits({4, 4, 4}, 10 + s, false), random_labels({4, 4, 4}, 20 + s))
                     ->value.item();
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    // shape mismatch
    EXPECT_THROW(dice_loss(random_logits({4, 4, 4}, 1, false), random_labels({2, 2, 2}, 2)),
                 std::invalid_argument);
    // invalid label named in the error
    Tensor<std::uint8_t> bad({4, 4, 4});
    bad[7] = 3;
    try {
        dice_loss(random_logits({4, 4, 4}, 3, false), bad);
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("3"), std::string::npos);
    }
}

TEST(ContentLoss, HandValuesAndAnalyticGradient) {
    auto as_map = [](std::vector<double> v) {
        Tensor<double> t = Tensor<double>::feature_map(1, {1, 1, static_cast<std::int64_t>(v.size())});
        for (std::size_t i = 0; i < v.size(); ++i) t[static_cast<std::int64_t>(i)] = v[i];
        return t;
    };
    ContentRepresentation<double> f{make_leaf(as_map({1, 2}), true)};
    ContentRepresentation<double> m{make_leaf(as_map({0, 0}), true)};
    auto loss = content_loss(f, m);
    EXPECT_DOUBLE_EQ(loss->value.item(), 2.5); // 0.5 * (1 + 4)
    backward(loss);
    // grad wrt fc_m is (fc_m - fc_f)
    EXPECT_DOUBLE_EQ(m.map->grad()[0], -1.0);
    EXPECT_DOUBLE_EQ(m.map->grad()[1], -2.0);
    // teacher side constant
    EXPECT_FALSE(f.map->has_grad());

    ContentRepresentation<double> same_a{make_leaf(as_map({3, -1}), true)};
    ContentRepresentation<double> same_b{make_leaf(as_map({3, -1}), true)};
    EXPECT_DOUBLE_EQ(content_loss(same_a, same_b)->value.item(), 0.0);

    ContentRepresentation<double> bad{make_leaf(as_map({1, 2, 3}), true)};
    EXPECT_THROW(content_loss(f, bad), std::invalid_argument);
}

TEST(L1Global, HandValuesAndInvariance) {
    auto f = random_logits({2, 2, 2}, 31, false);
    EXPECT_DOUBLE_EQ(l1_global_loss(f, f)->value.item(), 0.0);

    // Constant offset delta on exactly one class channel -> loss = |delta|.
    const double delta = -0.37;
    Tensor<double> shifted = f->value;
    const std::int64_t nvox = f->value.spatial().voxels();
    for (std::int64_t i = 0; i < nvox; ++i) shifted[2 * nvox + i] += delta;
    EXPECT_NEAR(l1_global_loss(f, make_const(std::move(shifted)))->value.item(), std::abs(delta),
                1e-12);

    // Invariant to an identical spatial permutation of both inputs.
    auto m = random_logits({2, 2, 2}, 32, false);
    std::vector<std::int64_t> perm = {4, 2, 6, 0, 5, 1, 7, 3};
    const double base = l1_global_loss(f, m)->value.item();
    const double permuted =
        l1_global_loss(gather_positions(f, perm), gather_positions(m, perm))->value.item();
    EXPECT_NEAR(base, permuted, 1e-12);
}

TEST(MiJs, ZeroCriticGivesMinusTwoLogTwo) {
    ParamStore<double> ps;
    Rng rng(4);
    auto critic = Critic<double>::make(ps, "ct", 4, rng);
    for (const auto& e : ps.entries()) e.var->value.fill(0.0);
    auto f = random_logits({2, 2, 2}, 41, false);
    auto m = random_logits({2, 2, 2}, 42, false);
    EXPECT_NEAR(mi_js_loss(f, m, critic, 7)->value.item(), -2.0 * std::log(2.0), 1e-9);
}

TEST(MiJs, ConstantCriticClosedForm) {
    ParamStore<double> ps;
    Rng rng(5);
    auto critic = Critic<double>::make(ps, "ct", 4, rng);
    for (const auto& e : ps.entries()) e.var->value.fill(0.0);
    const double c = 0.7;
    ps.find("ct.l2.b")->value.fill(c); // critic == c everywhere
    auto f = random_logits({2, 2, 2}, 51, false);
    auto m = random_logits({2, 2, 2}, 52, false);
    const double sp_c = std::log1p(std::exp(c));
    EXPECT_NEAR(mi_js_loss(f, m, critic, 9)->value.item(), -2.0 * sp_c, 1e-9);
    // larger constant -> smaller loss (decreasing in c)
    ps.find("ct.l2.b")->value.fill(c + 1.0);
    EXPECT_LT(mi_js_loss(f, m, critic, 9)->value.item(), -2.0 * sp_c);
}

TEST(MiJs, SeededShuffleReproducibleAndValidated) {
    ParamStore<double> ps;
    Rng rng(6);
    auto critic = Critic<double>::make(ps, "ct", 4, rng);
    auto f = random_logits({2, 2, 2}, 61, false);
    auto m = random_logits({2, 2, 2}, 62, false);
    const double a = mi_js_loss(f, m, critic, 1234)->value.item();
    const double b = mi_js_loss(f, m, critic, 1234)->value.item();
    EXPECT_EQ(a, b);
    EXPECT_NE(a, mi_js_loss(f, m, critic, 1235)->value.item());

    // fewer than 2 spatial positions: no derangement exists
    auto tiny_f = random_logits({1, 1, 1}, 63, false);
    auto tiny_m = random_logits({1, 1, 1}, 64, false);
    EXPECT_THROW(mi_js_loss(tiny_f, tiny_m, critic, 1), std::invalid_argument);
}

TEST(MiJs, DerangementHasNoFixedPointsAndIsBijective) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        for (std::int64_t n : {2, 3, 8, 100}) {
            auto p = seeded_derangement(n, seed);
            std::vector<bool> seen(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) {
                EXPECT_NE(p[i], i);
                seen[static_cast<std::size_t>(p[i])] = true;
            }
            for (bool s : seen) EXPECT_TRUE(s);
        }
    }
}

TEST(MiJs, BoundedBelowByCriticClamp) {
    ParamStore<double> ps;
    Rng rng(7);
    auto critic = Critic<double>::make(ps, "ct", 4, rng);
    ps.find("ct.l2.b")->value.fill(1e9); // clamps to +20
    auto f = random_logits({2, 2, 2}, 71, false);
    auto m = random_logits({2, 2, 2}, 72, false);
    const double sp20 = std::log1p(std::exp(kCriticClamp));
    EXPECT_GE(mi_js_loss(f, m, critic, 3)->value.item(), -2.0 * sp20 - 1e-9);
}

TEST(JointLoss, WeightedSumAndValidation) {
    LossWeights w;
    w.lambda_seg = w.lambda_consistency = w.lambda_style = w.lambda_content = 1;
    EXPECT_DOUBLE_EQ(joint_loss(0.8, 0.0, 0.3, 0.0, 0.2, 0.1, w), 1.4);

    LossWeights zero;
    zero.lambda_seg = zero.lambda_consistency = zero.lambda_style = zero.lambda_content = 0;
    EXPECT_DOUBLE_EQ(joint_loss(0.9, 0.7, -1.2, 0.4, 0.2, 0.5, zero), 0.0);

    // scaling every lambda by k scales the joint by k
    LossWeights k3;
    k3.lambda_seg = k3.lambda_consistency = k3.lambda_style = k3.lambda_content = 3;
    EXPECT_NEAR(joint_loss(0.8, 0.0, 0.3, 0.0, 0.2, 0.1, k3), 3 * 1.4, 1e-12);

    try {
        joint_loss(0.1, std::numeric_limits<double>::quiet_NaN(), 0, 0, 0, 0, w);
        FAIL();
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("seg_missing"), std::string::npos);
    }

    LossWeights bad;
    bad.lambda_style = -1;
    EXPECT_THROW(joint_loss(0, 0, 0, 0, 0, 0, bad), std::invalid_argument);
}

// Mirrors the acceptance gradient oracle: 20 random coordinates, 3 seeds,
// central differences within 1e-3 relative error on 4^3 probes.
TEST(GradientOracle, AllDistillationLossesMatchFiniteDifferences) {
    for (std::uint64_t seed : {101u, 202u, 303u}) {
        Rng rng(seed);
        const Dims3 sp{4, 4, 4};

        { // dice_loss wrt logits
            auto logits = random_logits(sp, seed * 7 + 1);
            auto labels = random_labels(sp, seed * 7 + 2);
            auto build = [&] { return dice_loss(logits, labels); };
            auto coords = test::sample_coords(logits->value.size(), 20, rng);
            EXPECT_LT(test::max_fd_rel_err(logits, build, coords), 1e-3) << "dice seed " << seed;
        }
        { // content_loss wrt student map
            auto f = ContentRepresentation<double>{random_logits(sp, seed * 7 + 3)};
            auto m = ContentRepresentation<double>{random_logits(sp, seed * 7 + 4)};
            auto build = [&] { return content_loss(f, m); };
            auto coords = test::sample_coords(m.map->value.size(), 20, rng);
            EXPECT_LT(test::max_fd_rel_err(m.map, build, coords), 1e-3) << "content seed " << seed;
        }
        { // l1_global_loss wrt student logits
            auto f = random_logits(sp, seed * 7 + 5);
            auto m = random_logits(sp, seed * 7 + 6);
            auto build = [&] { return l1_global_loss(f, m); };
            auto coords = test::sample_coords(m->value.size(), 20, rng);
            EXPECT_LT(test::max_fd_rel_err(m, build, coords), 1e-3) << "l1 seed " << seed;
        }
        { // texture_loss wrt student style
            auto f = random_logits(sp, seed * 7 + 7);
            auto m = random_logits(sp, seed * 7 + 8);
            auto build = [&] { return texture_loss(style_of({f}), style_of({m})); };
            auto coords = test::sample_coords(m->value.size(), 20, rng);
            EXPECT_LT(test::max_fd_rel_err(m, build, coords), 1e-3) << "texture seed " << seed;
        }
    }
}
