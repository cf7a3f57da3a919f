// SPDX-License-Identifier: Apache-2.0
//
// Keypoint autoencoder: a conv backbone splits a frame into dense features
// plus keypoints and per-keypoint coefficients; the decoder redraws a target
// frame from the source features and the target's keypoint state.
#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include "cfphys/benchgen.hpp"
#include "cfphys/nn.hpp"
#include "cfphys/render.hpp"

namespace cfphys::derender {

struct DerenderConfig {
    int keypoints = 3;
    /// Appearance coefficients per keypoint; a gate is appended.
    int coefficients = 5;
    /// false: plain Gaussian maps, no coefficients and no gate.
    bool use_coefficients = true;
    double gamma1 = 1e4;
    double gamma2 = 1e-1;
    double lr = 1e-3;
    int frame_size = 64;
    /// Must be frame_size / 2 or frame_size / 4.
    int feature_size = 16;
    int width1 = 16;
    int width2 = 32;
    int refine_width = 32;
    /// Gaussian std in normalized image units.
    double sigma = 0.1;
    int batch = 8;
    int steps = 2000;
    std::uint64_t seed = 1;

    /// Throws UsageError naming the offending field.
    void validate() const;
    /// Coefficients plus gate per keypoint (0 without coefficients).
    int coefficient_width() const { return use_coefficients ? coefficients + 1 : 0; }
};

struct EncodedImage {
    /// [1, width2, feature_size, feature_size]
    nn::Tensor features;
    render::KeypointState state;
};

/// Batched encoder output.
struct Encoding {
    nn::Tensor features;      // [N, width2, h, w]
    nn::Tensor keypoints;     // [N * K, 2]
    nn::Tensor coefficients;  // [N * K, C + 1], undefined without coefficients
};

class Derenderer {
public:
    explicit Derenderer(const DerenderConfig& cfg);

    const DerenderConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }

    Encoding encode_batch(const nn::Tensor& images) const;
    /// Output [N, 3, H, W] in [0, 1].
    nn::Tensor decode_batch(const nn::Tensor& features, const nn::Tensor& keypoints,
                            const nn::Tensor& coefficients) const;

    EncodedImage encode(const render::Frame& frame) const;
    /// Reads only the source features and the target state.
    render::Frame decode(const nn::Tensor& source_features, const render::KeypointState& state) const;

private:
    DerenderConfig cfg_;
    nn::ParamStore ps_;
    std::vector<nn::ConvBlock> backbone_;
    nn::Conv2d kp_head_, coef_hidden_, coef_out_;
    std::vector<nn::Conv2d> refine_;
    nn::Tensor bank_;   // [C, 1, 5, 5], fixed
    nn::Tensor coords_; // [h * w, 2] pixel centers
};

/// Frames to a planar [N, 3, H, W] tensor and back.
nn::Tensor to_tensor(std::span<const render::Frame> frames);
render::Frame to_frame(const nn::Tensor& images, int index);

/// gamma1 * mse + gamma2 * (mse of horizontal + vertical forward differences).
nn::Tensor reconstruction_loss(const nn::Tensor& pred, const nn::Tensor& target, double gamma1, double gamma2);

struct FramePair {
    std::size_t source = 0;
    std::size_t target = 0;
    bool operator==(const FramePair&) const = default;
};

/// Length of the target tail: one sixth of the sequence.
std::size_t tail_length(std::size_t frames);
/// Source uniform over the head, target uniform over the tail.
FramePair sample_pair(std::size_t frames, std::mt19937_64& rng);
/// Fixed evaluation pair (frames / 6, frames / 3).
FramePair eval_pair(std::size_t frames);

/// Frame `index` of the experiment's CD sequence at the given size.
render::Frame cd_frame(const bench::Experiment& e, std::size_t index, int size);

struct TrainReport {
    std::vector<double> losses;
    double heldout_psnr = 0.0;
    double copy_source_psnr = 0.0;
};

/// Trains on (source, target) pairs drawn from the CD sequences of `train`,
/// then scores the fixed evaluation pair of every held-out experiment.
TrainReport train_derender(Derenderer& model, std::span<const bench::Experiment> train,
                           std::span<const bench::Experiment> heldout);

/// Held-out reconstruction PSNR and the copy-source baseline on eval pairs.
std::pair<double, double> evaluate_reconstruction(const Derenderer& model, std::span<const bench::Experiment> heldout);

/// Keypoint states of every frame plus implicit-Euler derivatives
/// ds(t) = s(t) - s(t - 1), ds(0) = 0.
struct StateSequence {
    std::vector<render::KeypointState> states;
    std::vector<render::KeypointState> derivatives;

    std::size_t size() const { return states.size(); }
    bool operator==(const StateSequence&) const = default;
};

StateSequence with_derivatives(std::vector<render::KeypointState> states);
StateSequence encode_trajectory(const Derenderer& model, std::span<const render::Frame> frames);

/// Columns t,kp,x,y,c1..c{C+1},dx,dy,dc1..dc{C+1}.
void write_state_csv(const std::filesystem::path& path, const StateSequence& seq);
StateSequence read_state_csv(const std::filesystem::path& path);

} // namespace cfphys::derender
