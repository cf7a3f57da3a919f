// SPDX-License-Identifier: Apache-2.0
//
// Frame synthesis, keypoint Gaussian maps, the oriented filter bank and
// background subtraction.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "cfphys/sim2d.hpp"

namespace cfphys::render {

inline constexpr int kFrameSize = 64;

/// H x W x 3, row-major with interleaved channels, values in [0, 1].
/// Row 0 is y = 0 of the world; columns follow x.
struct Frame {
    int height = 0;
    int width = 0;
    std::vector<double> pixels;

    Frame() = default;
    Frame(int h, int w, double fill = 0.0) : height(h), width(w), pixels(static_cast<std::size_t>(h * w * 3), fill) {}
    double& at(int y, int x, int c) { return pixels[static_cast<std::size_t>((y * width + x) * 3 + c)]; }
    double at(int y, int x, int c) const { return pixels[static_cast<std::size_t>((y * width + x) * 3 + c)]; }
    bool operator==(const Frame&) const = default;
};

/// Single-channel H x W map.
struct Map {
    int height = 0;
    int width = 0;
    std::vector<double> values;

    Map() = default;
    Map(int h, int w, double fill = 0.0) : height(h), width(w), values(static_cast<std::size_t>(h * w), fill) {}
    double& at(int y, int x) { return values[static_cast<std::size_t>(y * width + x)]; }
    double at(int y, int x) const { return values[static_cast<std::size_t>(y * width + x)]; }
    bool operator==(const Map&) const = default;
};

struct Mask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> values;

    std::size_t count() const;
    std::uint8_t at(int y, int x) const { return values[static_cast<std::size_t>(y * width + x)]; }
};

/// Fixed background: a soft vertical/horizontal gray gradient.
Frame background(int height = kFrameSize, int width = kFrameSize);

/// RGB color of a visual id (cycles through a fixed palette).
std::array<double, 3> palette(int visual_id);

/// Anti-aliased discs over the background, colored by visual_id only.
Frame rasterize(const sim::Scene& scene, int height = kFrameSize, int width = kFrameSize);

/// Scene with its bodies moved to the positions of one trajectory frame.
sim::Scene pose(const sim::Scene& scene, std::span<const sim::BodyState> states);

/// Renders every frame of a trajectory of `scene`.
std::vector<Frame> rasterize_trajectory(const sim::Scene& scene, const sim::Trajectory& traj,
                                        int height = kFrameSize, int width = kFrameSize);

/// exp(-|p - k|^2 / sigma^2) sampled at pixel centers ((j + 0.5) / W, (i + 0.5) / H).
Map gaussian_map(sim::Vec2 k, double sigma, int height, int width);

struct FilterBank {
    int size = 5;
    /// kernels[i] is size*size, row-major.
    std::vector<std::vector<double>> kernels;
    std::vector<double> angles;

    int count() const { return static_cast<int>(kernels.size()); }
};

/// C line kernels through the center at angles (i - 1) * pi / C, i = 1..C.
/// Each kernel is nonnegative and sums to one.
FilterBank make_filter_bank(int c, int size = 5);

/// Same-size zero-padded cross-correlation of a map with a kernel.
Map filter(const Map& map, std::span<const double> kernel, int size);

struct Keypoint {
    sim::Vec2 position;
    /// C appearance coefficients followed by the gate.
    std::vector<double> coefficients;
    bool operator==(const Keypoint&) const = default;
};

struct KeypointState {
    std::vector<Keypoint> keypoints;
    bool operator==(const KeypointState&) const = default;
};

/// G[k * C + i] = gate_k * c_k^i * (map_k filtered by kernel i).
std::vector<Map> deform(std::span<const Map> maps, const KeypointState& state, const FilterBank& bank);

/// 1 where the max-channel absolute difference exceeds thresh, then a 3x3
/// dilation.
Mask background_mask(const Frame& frame, const Frame& bg, double thresh);

/// Ground-truth keypoint state: one slot per visual id in [0, slots).
/// Positions are body centers; coefficients encode the radius and color of
/// the body and the gate is 1. Absent bodies keep `fallback` positions (or
/// the center) with all coefficients and the gate at zero.
KeypointState oracle_state(const sim::Scene& scene, std::span<const sim::BodyState> states, std::size_t slots,
                           int c, const KeypointState* fallback = nullptr);

using Decoder = std::function<Frame(const KeypointState&)>;

/// Renders the state while varying one component of keypoint `kp`.
/// component 0/1 are x/y, 2 + i is coefficient i (the last one is the gate).
std::vector<Frame> latent_sweep(const KeypointState& state, std::size_t kp, std::size_t component,
                                std::span<const double> grid, const Decoder& decoder);

/// Tiles frames left to right, top to bottom, with a 1-pixel white gutter.
Frame contact_sheet(std::span<const Frame> frames, int columns);

/// Bilinear resampling to a new size (used for tiny-frame variants).
Frame resize(const Frame& frame, int height, int width);

void write_png(const std::filesystem::path& path, const Frame& frame);
Frame read_png(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Mask& mask);

/// 10 log10(1 / mse) with values in [0, 1]; 99 dB for identical frames.
double psnr(const Frame& pred, const Frame& gt);
inline constexpr double kPsnrCap = 99.0;

/// Foreground centroid (x, y) in normalized coordinates; NaNs for an empty mask.
sim::Vec2 mask_centroid(const Mask& mask);

} // namespace cfphys::render
