// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "cfphys/error.hpp"
#include "cfphys/nn.hpp"
#include "gradcheck.hpp"

using namespace cfphys;
using namespace cfphys::nn;
using testkit::random_tensor;

namespace {

void fill_all(ParamStore& ps, double v) {
    for (const auto& [name, p] : ps.params()) {
        Tensor t = p.value;
        std::fill(t.data().begin(), t.data().end(), v);
    }
}

std::vector<double> row(const Tensor& t, int r) {
    const auto w = static_cast<std::size_t>(t.dim(1));
    return {t.data().begin() + static_cast<std::ptrdiff_t>(r * w), t.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * w)};
}

Tensor row_tensor(const std::vector<double>& v) { return Tensor::from({1, static_cast<int>(v.size())}, v); }

} // namespace

TEST(ParamStore, GlorotBoundsAndDeterminism) {
    ParamStore a(3), b(3);
    const Tensor w = a.create("w", {20, 30}, Init::glorot);
    (void)b.create("w", {20, 30}, Init::glorot);
    const double bound = std::sqrt(6.0 / 50.0);
    for (double v : w.data()) EXPECT_LE(std::abs(v), bound);
    EXPECT_TRUE(a.same_as(b));
    EXPECT_THROW(a.create("w", {1}, Init::zeros), UsageError);
    EXPECT_THROW(a.get("missing"), UsageError);

    const Tensor cw = a.create("c", {4, 3, 5, 5}, Init::glorot);
    const double cbound = std::sqrt(6.0 / (3 * 25 + 4 * 25));
    for (double v : cw.data()) EXPECT_LE(std::abs(v), cbound);
    EXPECT_EQ(a.trainable_size(), 600u + 300u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    ParamStore ps;
    Tensor w = ps.create("w", {3}, Init::zeros);
    Tensor frozen = ps.create("f", {1}, Init::ones, false);
    w.data() = {1.0, -2.0, 0.5};
    const Tensor target = Tensor::from({3}, {0.0, 0.0, 10.0});
    mse(w, target).backward();
    const std::vector<double> g = w.grad();
    const std::vector<double> before = w.data();
    const double lr = 1e-3;
    ps.adam_step(lr);
    for (std::size_t i = 0; i < 3; ++i) {
        // m_hat / sqrt(v_hat) = g / |g| on the first step.
        const double expected = before[i] - lr * g[i] / (std::abs(g[i]) + 1e-8);
        EXPECT_NEAR(w.data()[i], expected, 1e-15);
    }
    EXPECT_EQ(frozen[0], 1.0);
    EXPECT_EQ(ps.step(), 1u);
}

TEST(Adam, FitsLinearRegression) {
    ParamStore ps(5);
    Linear lin(ps, "lin", 2, 1);
    std::mt19937_64 rng(9);
    const Tensor x = random_tensor(rng, {64, 2}, -1, 1, false);
    std::vector<double> y(64);
    for (int i = 0; i < 64; ++i) y[static_cast<std::size_t>(i)] = 2.0 * x[2 * static_cast<std::size_t>(i)] - x[2 * static_cast<std::size_t>(i) + 1] + 0.5;
    const Tensor yt = Tensor::from({64, 1}, y);
    double loss = 0.0;
    for (int it = 0; it < 2000; ++it) {
        ps.zero_grad();
        Tensor l = mse(lin(x), yt);
        loss = l.item();
        l.backward();
        ps.adam_step(1e-2);
    }
    EXPECT_LT(loss, 1e-6);
}

TEST(Checkpoint, BitExactRoundTrip) {
    ParamStore ps(17);
    Mlp mlp(ps, "mlp", 3, {8}, 2);
    FrozenNorm norm(ps, "norm", 2);
    std::mt19937_64 rng(2);
    const Tensor x = random_tensor(rng, {5, 3}, -1, 1, false);
    for (int i = 0; i < 3; ++i) {
        ps.zero_grad();
        sum(square(mlp(x))).backward();
        ps.adam_step(1e-2);
    }
    (void)norm(random_tensor(rng, {2, 2, 3, 3}, -1, 1, false));

    std::stringstream buf;
    ps.save(buf);
    const std::string bytes = buf.str();
    ParamStore back = ParamStore::load(buf);
    EXPECT_TRUE(back.same_as(ps));
    std::stringstream again;
    back.save(again);
    EXPECT_EQ(again.str(), bytes);

    // Loading into a freshly built model keeps its module handles live.
    ParamStore fresh(99);
    Mlp mlp2(fresh, "mlp", 3, {8}, 2);
    FrozenNorm norm2(fresh, "norm", 2);
    EXPECT_FALSE(fresh.same_as(ps));
    fresh.assign(back);
    EXPECT_TRUE(fresh.same_as(ps));
    EXPECT_EQ(mlp2(x).data(), mlp(x).data());
    EXPECT_TRUE(norm2.initialized());

    ParamStore other;
    (void)other.create("w", {2}, Init::zeros);
    EXPECT_THROW(other.assign(ps), UsageError);

    std::stringstream bad("not a checkpoint");
    EXPECT_THROW(ParamStore::load(bad), IoError);
    std::stringstream cut(bytes.substr(0, bytes.size() / 2));
    EXPECT_THROW(ParamStore::load(cut), IoError);
    EXPECT_THROW(ParamStore::load(std::filesystem::path("/nonexistent/ck.bin")), PrereqError);
}

TEST(FrozenNorm, StatisticsFromFirstBatchOnly) {
    ParamStore ps;
    FrozenNorm norm(ps, "n", 2);
    EXPECT_FALSE(norm.initialized());
    std::mt19937_64 rng(4);
    Tensor x = random_tensor(rng, {3, 2, 4, 4}, 2, 6, false);
    const Tensor y = norm(x);
    EXPECT_TRUE(norm.initialized());
    for (int c = 0; c < 2; ++c) {
        double s = 0.0, s2 = 0.0;
        for (int b = 0; b < 3; ++b)
            for (int i = 0; i < 16; ++i) {
                const double v = y[static_cast<std::size_t>((b * 2 + c) * 16 + i)];
                s += v;
                s2 += v * v;
            }
        EXPECT_NEAR(s / 48, 0.0, 1e-12);
        EXPECT_NEAR(s2 / 48, 1.0, 1e-4);
    }
    const auto mean_before = ps.get("n.mean").data();
    (void)norm(random_tensor(rng, {3, 2, 4, 4}, -10, -5, false));
    EXPECT_EQ(ps.get("n.mean").data(), mean_before);
    EXPECT_EQ(ps.trainable_size(), 4u);
}

TEST(Gru, ZeroParametersHalveTheState) {
    ParamStore ps;
    Gru gru(ps, "gru", 3, 4, 2);
    fill_all(ps, 0.0);
    std::mt19937_64 rng(1);
    const Tensor x = random_tensor(rng, {2, 3}, -1, 1, false);
    std::vector<Tensor> state{random_tensor(rng, {2, 4}, -1, 1, false), random_tensor(rng, {2, 4}, -1, 1, false)};
    const auto h0 = state[0].data(), h1 = state[1].data();
    const Tensor out = gru.step(x, state);
    // r = u = 1/2 and c = tanh(0) = 0, so h' = h / 2 in every layer.
    for (std::size_t i = 0; i < h0.size(); ++i) EXPECT_DOUBLE_EQ(state[0][i], 0.5 * h0[i]);
    for (std::size_t i = 0; i < h1.size(); ++i) EXPECT_DOUBLE_EQ(state[1][i], 0.5 * h1[i]);
    EXPECT_EQ(out.data(), state[1].data());
    EXPECT_THROW(gru.step(x, state = {state[0]}), UsageError);
}

TEST(Gru, GradientsAndClosedFormOneStep) {
    ParamStore ps(21);
    GruCell cell(ps, "c", 2, 3);
    std::mt19937_64 rng(8);
    const Tensor x = random_tensor(rng, {1, 2}, -1, 1, false);
    const Tensor h = random_tensor(rng, {1, 3}, -1, 1, false);
    const Tensor out = cell(x, h);

    // Scalar recomputation of the gate equations.
    const auto& wx = ps.get("c.wx").data();
    const auto& whru = ps.get("c.wh_ru").data();
    const auto& whc = ps.get("c.wh_c").data();
    const auto& b = ps.get("c.b").data();
    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    std::vector<double> r(3), u(3);
    for (int j = 0; j < 3; ++j) {
        double ar = b[static_cast<std::size_t>(j)], au = b[static_cast<std::size_t>(3 + j)];
        for (int i = 0; i < 2; ++i) {
            ar += x[static_cast<std::size_t>(i)] * wx[static_cast<std::size_t>(i * 9 + j)];
            au += x[static_cast<std::size_t>(i)] * wx[static_cast<std::size_t>(i * 9 + 3 + j)];
        }
        for (int i = 0; i < 3; ++i) {
            ar += h[static_cast<std::size_t>(i)] * whru[static_cast<std::size_t>(i * 6 + j)];
            au += h[static_cast<std::size_t>(i)] * whru[static_cast<std::size_t>(i * 6 + 3 + j)];
        }
        r[static_cast<std::size_t>(j)] = sig(ar);
        u[static_cast<std::size_t>(j)] = sig(au);
    }
    for (int j = 0; j < 3; ++j) {
        double ac = b[static_cast<std::size_t>(6 + j)];
        for (int i = 0; i < 2; ++i) ac += x[static_cast<std::size_t>(i)] * wx[static_cast<std::size_t>(i * 9 + 6 + j)];
        for (int i = 0; i < 3; ++i)
            ac += r[static_cast<std::size_t>(i)] * h[static_cast<std::size_t>(i)] * whc[static_cast<std::size_t>(i * 3 + j)];
        const double uj = u[static_cast<std::size_t>(j)];
        EXPECT_NEAR(out[static_cast<std::size_t>(j)], (1 - uj) * h[static_cast<std::size_t>(j)] + uj * std::tanh(ac), 1e-12);
    }

    const auto rep = testkit::gradcheck([&](const auto& in) { return cell(in[0], in[1]); },
                                        {random_tensor(rng, {2, 2}), random_tensor(rng, {2, 3})}, rng);
    EXPECT_LT(rep.worst, 1e-4) << rep.where;
}

TEST(GraphNet, MatchesDoubleLoopOracle) {
    ParamStore ps(31);
    GraphNet gn(ps, "gn", 3, 2, {5}, 4);
    // The oracle evaluates the two MLPs row by row through the same parameters.
    ParamStore shadow(31);
    Mlp f_only(shadow, "gn.f", 6, {5}, 4);
    Mlp g_only(shadow, "gn.g", 7, {5}, 2);
    shadow.assign(ps);

    std::mt19937_64 rng(6);
    for (int k : {1, 2, 3, 5}) {
        const int groups = 2;
        const Tensor x = random_tensor(rng, {groups * k, 3}, -1, 1, false);
        const Tensor y = gn(x, k);
        ASSERT_EQ(y.shape(), (Shape{groups * k, 2}));
        for (int gi = 0; gi < groups; ++gi)
            for (int t = 0; t < k; ++t) {
                std::vector<double> agg(4, 0.0);
                for (int s = 0; s < k; ++s) {
                    if (s == t) continue;
                    std::vector<double> in = row(x, gi * k + s);
                    const auto dst = row(x, gi * k + t);
                    in.insert(in.end(), dst.begin(), dst.end());
                    const Tensor m = f_only(row_tensor(in));
                    for (std::size_t j = 0; j < 4; ++j) agg[j] += m[j];
                }
                std::vector<double> in = row(x, gi * k + t);
                in.insert(in.end(), agg.begin(), agg.end());
                const Tensor ref = g_only(row_tensor(in));
                for (std::size_t j = 0; j < 2; ++j)
                    EXPECT_NEAR(y[static_cast<std::size_t>((gi * k + t) * 2) + j], ref[j], 1e-12);
            }
    }
}

TEST(GraphNet, PermutationEquivariant) {
    ParamStore ps(41);
    GraphNet gn(ps, "gn", 4, 3, {8, 8});
    std::mt19937_64 rng(12);
    for (int k = 1; k <= 8; ++k) {
        const Tensor x = random_tensor(rng, {k, 4}, -1, 1, false);
        std::vector<int> perm(static_cast<std::size_t>(k));
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        const Tensor y = gn(x, k);
        const Tensor yp = gn(gather_rows(x, perm), k);
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < 3; ++j)
                EXPECT_NEAR(yp[static_cast<std::size_t>(i * 3 + j)], y[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)] * 3 + j)], 1e-12);
    }
    EXPECT_THROW(gn(Tensor::zeros({5, 4}), 2), UsageError);
}

TEST(GraphNet, Gradients) {
    ParamStore ps(51);
    GraphNet gn(ps, "gn", 2, 2, {4});
    std::mt19937_64 rng(3);
    for (int i = 0; i < 20; ++i) {
        const int k = 1 + i % 4;
        const auto rep = testkit::gradcheck([&](const auto& in) { return nn::tanh(gn(in[0], k)); },
                                            {random_tensor(rng, {2 * k, 2})}, rng);
        ASSERT_LT(rep.worst, 1e-4) << rep.where;
    }
}

TEST(DivergenceGuard, TripsAfterPatience) {
    DivergenceGuard g(10.0, 3);
    g.observe(1.0, "t");
    g.observe(11.0, "t");
    g.observe(11.0, "t");
    g.observe(5.0, "t");  // resets the streak
    g.observe(11.0, "t");
    g.observe(11.0, "t");
    EXPECT_THROW(g.observe(11.0, "t"), NumericError);
    DivergenceGuard nan_guard;
    EXPECT_THROW(nan_guard.observe(std::nan(""), "t"), NumericError);
}
