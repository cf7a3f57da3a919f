// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "cfphys/error.hpp"
#include "cfphys/render.hpp"

using namespace cfphys;
using namespace cfphys::render;

namespace {

sim::Scene one_disc(double x, double y, double r, int id = 0) {
    sim::Scene s;
    s.bodies = {sim::Body{{x, y}, {0.1, 0.0}, r, 1.0, id}};
    return s;
}

} // namespace

TEST(Rasterize, EmptySceneIsBackground) {
    EXPECT_EQ(rasterize(sim::Scene{}), background());
}

TEST(Rasterize, DeterministicAndMassBlind) {
    sim::Scene s = one_disc(0.4, 0.6, 0.07, 2);
    s.bodies.push_back(sim::Body{{0.7, 0.2}, {}, 0.05, 1.0, 1});
    const Frame a = rasterize(s);
    EXPECT_EQ(a, rasterize(s));
    sim::Scene heavy = s;
    for (auto& b : heavy.bodies) b.mass = 10.0;
    EXPECT_EQ(a, rasterize(heavy));
    for (double v : a.pixels) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(GaussianMap, PeakDecayAndTranslation) {
    const Map m = gaussian_map({(7 + 0.5) / 16, (9 + 0.5) / 16}, 0.1, 16, 16);
    EXPECT_DOUBLE_EQ(m.at(9, 7), 1.0);

    const double sigma = 4.0 / 16;
    const Map far = gaussian_map({(3 + 0.5) / 16, (3 + 0.5) / 16}, sigma, 16, 16);
    EXPECT_NEAR(far.at(3, 7), std::exp(-1.0), 1e-12);

    const Map a = gaussian_map({0.3, 0.4}, 0.1, 16, 16);
    const Map b = gaussian_map({0.3 + 2.0 / 16, 0.4 + 1.0 / 16}, 0.1, 16, 16);
    for (int y = 0; y + 1 < 16; ++y)
        for (int x = 0; x + 2 < 16; ++x) EXPECT_NEAR(b.at(y + 1, x + 2), a.at(y, x), 1e-12);
    EXPECT_THROW(gaussian_map({0.5, 0.5}, 0.0, 4, 4), UsageError);
}

TEST(FilterBank, NormalizedAndOrdered) {
    const FilterBank bank = make_filter_bank(5);
    ASSERT_EQ(bank.count(), 5);
    for (int i = 0; i < 5; ++i) {
        EXPECT_NEAR(bank.angles[static_cast<std::size_t>(i)] * 180.0 / std::numbers::pi, 36.0 * i, 1e-9);
        double sum = 0.0;
        for (double w : bank.kernels[static_cast<std::size_t>(i)]) {
            EXPECT_GE(w, 0.0);
            sum += w;
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
    for (int i = 0; i < 5; ++i)
        for (int j = i + 1; j < 5; ++j) EXPECT_NE(bank.kernels[static_cast<std::size_t>(i)], bank.kernels[static_cast<std::size_t>(j)]);
    // Angle 0 is the horizontal center row.
    for (int c = 0; c < 5; ++c) EXPECT_DOUBLE_EQ(bank.kernels[0][static_cast<std::size_t>(10 + c)], 0.2);
}

TEST(Deform, GateScalingAndOrientation) {
    const FilterBank bank = make_filter_bank(5);
    const std::vector<Map> maps{gaussian_map({0.5, 0.5}, 0.1, 16, 16), gaussian_map({0.2, 0.7}, 0.1, 16, 16)};
    KeypointState st;
    st.keypoints = {Keypoint{{0.5, 0.5}, {1, 0, 0, 0, 0, 1}}, Keypoint{{0.2, 0.7}, {0.3, 0.4, 0.5, 0.6, 0.7, 0.0}}};
    const auto g = deform(maps, st, bank);
    ASSERT_EQ(g.size(), 10u);
    for (int i = 5; i < 10; ++i)
        for (double v : g[static_cast<std::size_t>(i)].values) EXPECT_EQ(v, 0.0);

    // Horizontal kernel elongates the blob along x: the center row carries more
    // mass than the center column.
    const Map& h = g[0];
    double row = 0.0, column = 0.0;
    for (int k = 0; k < 16; ++k) {
        row += h.at(8, k);
        column += h.at(k, 8);
    }
    EXPECT_GT(row, column);

    KeypointState scaled = st;
    for (auto& kp : scaled.keypoints)
        for (std::size_t i = 0; i < 5; ++i) kp.coefficients[i] *= 2.5;
    const auto g2 = deform(maps, scaled, bank);
    for (std::size_t m = 0; m < g.size(); ++m)
        for (std::size_t p = 0; p < g[m].values.size(); ++p) EXPECT_NEAR(g2[m].values[p], 2.5 * g[m].values[p], 1e-12);
}

TEST(BackgroundMask, Semantics) {
    const Frame bg = background();
    EXPECT_EQ(background_mask(bg, bg, 0.05).count(), 0u);

    const double r = 0.1;
    const Frame f = rasterize(one_disc(0.5, 0.5, r));
    const Mask m = background_mask(f, bg, 0.05);
    const double disc_px = std::numbers::pi * (r * 64) * (r * 64);
    // Anti-aliased rim adds half a pixel, the square dilation at most sqrt(2).
    const double reach = r * 64 + 0.5 + std::numbers::sqrt2;
    const double dilated_px = std::numbers::pi * reach * reach;
    EXPECT_GE(static_cast<double>(m.count()), disc_px * 0.95);
    EXPECT_LE(static_cast<double>(m.count()), dilated_px);

    // thresh = 0 picks every pixel that differs at all (before dilation).
    const Mask any = background_mask(f, bg, 0.0);
    EXPECT_GE(any.count(), m.count());
}

TEST(OracleState, SlotsAndRemovedBodies) {
    sim::Scene s;
    s.bodies = {sim::Body{{0.2, 0.3}, {}, 0.05, 1, 0}, sim::Body{{0.6, 0.7}, {}, 0.08, 10, 2}};
    std::vector<sim::BodyState> states{{{0.2, 0.3}, {}}, {{0.6, 0.7}, {}}};
    const auto st = oracle_state(s, states, 3, 5);
    ASSERT_EQ(st.keypoints.size(), 3u);
    EXPECT_EQ(st.keypoints[2].position, (sim::Vec2{0.6, 0.7}));
    EXPECT_EQ(st.keypoints[2].coefficients[5], 1.0);
    EXPECT_DOUBLE_EQ(st.keypoints[2].coefficients[0], 1.0);
    for (double c : st.keypoints[1].coefficients) EXPECT_EQ(c, 0.0);

    sim::Scene light = s;
    for (auto& b : light.bodies) b.mass = 1.0;
    EXPECT_EQ(oracle_state(light, states, 3, 5), st);
}

TEST(LatentSweep, RequiresDecoderAndHandlesEmptyGrid) {
    KeypointState st;
    st.keypoints = {Keypoint{{0.5, 0.5}, {0.5, 0.5, 1.0}}};
    const std::vector<double> grid{0.2, 0.4};
    EXPECT_THROW(latent_sweep(st, 0, 0, grid, Decoder{}), PrereqError);

    // Oracle "decoder": a disc at the keypoint, drawn only when gated in.
    const Decoder draw = [](const KeypointState& s) {
        const auto& k = s.keypoints[0];
        sim::Scene scene;
        if (k.coefficients.back() > 0.5) scene = one_disc(k.position.x, k.position.y, 0.06);
        return rasterize(scene);
    };
    EXPECT_TRUE(latent_sweep(st, 0, 0, std::span<const double>{}, draw).empty());
    const auto frames = latent_sweep(st, 0, 0, std::vector<double>{0.2, 0.4, 0.6, 0.8}, draw);
    double last = -1.0;
    for (const auto& f : frames) {
        const double cx = mask_centroid(background_mask(f, background(), 0.05)).x;
        EXPECT_GT(cx, last);
        last = cx;
    }
    const auto gate = latent_sweep(st, 0, 4, std::vector<double>{1.0, 0.0}, draw);
    EXPECT_GT(background_mask(gate[0], background(), 0.05).count(), 0u);
    EXPECT_EQ(background_mask(gate[1], background(), 0.05).count(), 0u);

    const Frame sheet = contact_sheet(frames, 2);
    EXPECT_EQ(sheet.height, 2 * 65 + 1);
    EXPECT_EQ(sheet.width, 2 * 65 + 1);
}

TEST(Png, RoundTripsToEightBits) {
    const Frame f = rasterize(one_disc(0.3, 0.6, 0.07, 3));
    const auto path = std::filesystem::temp_directory_path() / "cfphys_render_test.png";
    write_png(path, f);
    const Frame back = read_png(path);
    ASSERT_EQ(back.height, f.height);
    for (std::size_t i = 0; i < f.pixels.size(); ++i) EXPECT_NEAR(back.pixels[i], f.pixels[i], 0.5 / 255.0 + 1e-12);
    std::filesystem::remove(path);
    EXPECT_THROW(read_png(path), IoError);
}
