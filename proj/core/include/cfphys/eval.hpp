// SPDX-License-Identifier: Apache-2.0
//
// Metrics, baselines and the study harnesses.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cfphys/benchgen.hpp"
#include "cfphys/cody.hpp"
#include "cfphys/render.hpp"

namespace cfphys::eval {

/// Mean per-frame PSNR; identical frames count as the 99 dB cap.
double psnr(std::span<const render::Frame> pred, std::span<const render::Frame> gt);

/// PSNR over the dilated foreground mask of each gt frame. Frames with an
/// empty mask are skipped; UsageError("no foreground") if all are empty.
double l_psnr(std::span<const render::Frame> pred, std::span<const render::Frame> gt, const render::Frame& background,
              double thresh = 0.05);

/// Minimum-cost assignment of rows to columns for a square matrix.
/// Returns assignment[row] = column.
std::vector<int> hungarian(const std::vector<std::vector<double>>& cost);

struct Tracked {
    int id = 0;
    sim::Vec2 position;
};

struct MotResult {
    double mota = 0.0;
    /// Mean matched distance; 0 when nothing matched.
    double motp = 0.0;
    std::size_t misses = 0;
    std::size_t false_positives = 0;
    std::size_t swaps = 0;
    std::size_t matches = 0;
    std::size_t ground_truth = 0;
    double matched_distance = 0.0;
};

/// Per frame, the largest set of (prediction, object) pairs within
/// match_radius with the least total distance among such sets.
std::vector<std::pair<int, int>> match_frame(std::span<const Tracked> pred, std::span<const Tracked> gt,
                                             double match_radius);

MotResult mot_metrics(const std::vector<std::vector<Tracked>>& pred, const std::vector<std::vector<Tracked>>& gt,
                      double match_radius = 0.05);

struct CopyScores {
    double copy_b = 0.0;
    double copy_c = 0.0;
};

/// Keypoint MSE over D of emitting B's states (Copy B) or C's state held
/// fixed (Copy C).
CopyScores copy_keypoint_mse(const cody::Episode& e);
/// PSNR over D of emitting B's frames or the C frame held fixed.
CopyScores copy_pixel_psnr(const cody::ExperimentFrames& frames);

struct ProbeConfig {
    int hidden = 32;
    int steps = 600;
    int batch = 16;
    double lr = 1e-3;
    /// Use every n-th AB frame.
    int frame_stride = 3;
    std::uint64_t seed = 1;
    /// Shuffle labels across bodies (chance-level control).
    bool randomize_labels = false;
};

struct ProbeResult {
    double accuracy = 0.0;
    /// Accuracy over bodies whose mass flip is consequential.
    double corrected_accuracy = 0.0;
    std::size_t test_bodies = 0;
    std::size_t corrected_bodies = 0;
    double final_loss = 0.0;
};

/// Trains a graph-net + GRU heavy/light classifier on ground-truth AB states
/// of the training split and scores the remaining experiments.
ProbeResult probe_accuracy(std::span<const bench::Experiment> data, const ProbeConfig& cfg);

struct ProbeComparison {
    ProbeResult filtered;
    ProbeResult unfiltered;
};

ProbeComparison confounder_probe(std::span<const bench::Experiment> filtered,
                                 std::span<const bench::Experiment> unfiltered, const ProbeConfig& cfg);

struct FpsStudyConfig {
    bench::ScenarioConfig scenario;
    std::vector<int> fps_grid{25, 5};
    int base_fps = 25;
    double history = 1.0;
    double horizon = 1.0;
    int train_scenes = 1000;
    int test_scenes = 200;
    int hidden = 32;
    int steps = 2500;
    int batch = 8;
    double lr = 1e-3;
    std::uint64_t seed = 1;
};

struct FpsRow {
    int fps = 0;
    /// Final-frame position MSE of the trained predictor.
    double mse = 0.0;
    /// Same for holding the last observed position.
    double constant_mse = 0.0;
};

/// Trains one recurrent graph-net predictor per frame rate on windows of
/// equal wall-clock length and reports held-out final-frame error.
std::vector<FpsRow> fps_study(const FpsStudyConfig& cfg);

struct DoopSample {
    std::string id;
    bench::DoKind kind = bench::DoKind::shift;
    double magnitude = 0.0;
    double psnr = 0.0;
};

struct DoopRow {
    std::string kind;
    double lo = 0.0;
    double hi = 0.0;
    std::size_t count = 0;
    double mean_psnr = 0.0;
};

struct DoopReport {
    std::vector<DoopRow> rows;
    double shift_mean = 0.0;
    double remove_mean = 0.0;
    /// shift_mean - remove_mean
    double gap = 0.0;
};

/// Removes form one bin; shifts are split into `bins` equal bins over
/// [0, max_shift], larger shifts landing in the last one.
DoopReport doop_impact(std::span<const DoopSample> samples, int bins = 4, double max_shift = 0.25);

} // namespace cfphys::eval
