// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "cfphys/error.hpp"
#include "cfphys/io.hpp"
#include "cfphys/render.hpp"

using namespace cfphys;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("cfphys_io_" + name);
    fs::remove_all(p);
    return p;
}

} // namespace

TEST(Sha256, KnownVectors) {
    EXPECT_EQ(io::sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    EXPECT_EQ(io::sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Split, StableAndRoughlyEightyTenTen) {
    std::size_t counts[3] = {};
    for (int i = 0; i < 20000; ++i) {
        const std::string id = "balls-" + std::to_string(i);
        const auto s = io::split_of(id);
        EXPECT_EQ(s, io::split_of(id));
        ++counts[static_cast<int>(s)];
    }
    EXPECT_NEAR(counts[0] / 20000.0, 0.8, 0.02);
    EXPECT_NEAR(counts[1] / 20000.0, 0.1, 0.02);
    EXPECT_NEAR(counts[2] / 20000.0, 0.1, 0.02);
}

TEST(Dataset, RoundTripAndStableHash) {
    bench::ScenarioConfig cfg;
    const auto ds = bench::generate_dataset(cfg, 30.0, 6, 3);
    const auto dir = scratch("rt");
    const std::string h1 = io::export_dataset(ds, dir);
    EXPECT_EQ(io::manifest_hash(dir), h1);
    EXPECT_TRUE(fs::exists(dir / "balls" / ds.experiments[0].id / "ab.csv"));
    EXPECT_TRUE(fs::exists(dir / "balls" / ds.experiments[0].id / "meta.json"));

    const auto back = io::load_dataset(dir);
    ASSERT_EQ(back.experiments.size(), ds.experiments.size());
    for (std::size_t i = 0; i < ds.experiments.size(); ++i) EXPECT_EQ(back.experiments[i], ds.experiments[i]);
    EXPECT_EQ(back.cell_counts, ds.cell_counts);
    EXPECT_EQ(back.stats.rejections, ds.stats.rejections);

    const auto dir2 = scratch("rt2");
    EXPECT_EQ(io::export_dataset(back, dir2), h1);
    fs::remove_all(dir);
    fs::remove_all(dir2);
}

TEST(Dataset, FrameFolders) {
    bench::ScenarioConfig cfg;
    const auto ds = bench::generate_dataset(cfg, 30.0, 1, 9);
    const auto dir = scratch("frames");
    io::export_dataset(ds, dir, {16});
    const auto ab = dir / io::experiment_dir(ds.experiments[0]) / "ab";
    EXPECT_TRUE(fs::exists(ab / "0000.png"));
    EXPECT_EQ(render::read_png(ab / "0000.png").width, 16);
    fs::remove_all(dir);
}

TEST(Dataset, MissingAndCorrupt) {
    EXPECT_THROW(io::load_dataset(scratch("missing")), PrereqError);
    const auto dir = scratch("corrupt");
    io::write_text(dir / "manifest.json", "{ not json");
    EXPECT_THROW(io::load_dataset(dir), IoError);
    fs::remove_all(dir);
}
