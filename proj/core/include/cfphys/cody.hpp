// SPDX-License-Identifier: Apache-2.0
//
// Counterfactual dynamics over keypoint states: confounders are estimated
// from the observed sequence, the counterfactual initial state is lifted to
// a latent space, rolled forward by displacements and decoded back.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cfphys/benchgen.hpp"
#include "cfphys/derender.hpp"
#include "cfphys/nn.hpp"

namespace cfphys::cody {

struct CodyConfig {
    int d_u = 32;
    int d_sigma = 64;
    std::vector<int> gn_hidden{64, 64, 64};
    int gru_hidden = 64;
    int gru_layers = 2;
    double gamma3 = 1.0;
    double lr = 1e-4;
    int batch = 8;
    int steps = 2000;
    /// false: identity state encoder and decoder (sigma = s).
    bool use_encoder = true;
    /// > 0: training rollouts start at this length and grow linearly to the
    /// full sequence over the run. 0 trains on full rollouts throughout.
    int curriculum_start = 0;
    std::uint64_t seed = 1;

    void validate() const;
};

/// Observed inputs of one experiment in keypoint space. Every row holds the K
/// keypoints side by side.
struct Observation {
    int keypoints = 0;
    /// Per-keypoint state width (2 + coefficients).
    int width = 0;
    /// AB frames, K * 2 * width values: state then derivative per keypoint.
    std::vector<std::vector<double>> ab;
    /// C state, K * width values.
    std::vector<double> c;
};

/// Observation plus the CD states to predict (K * width per frame).
struct Episode {
    std::string id;
    Observation obs;
    std::vector<std::vector<double>> cd;
};

Observation observe(const derender::StateSequence& ab, const render::KeypointState& c);
Episode make_episode(const std::string& id, const derender::StateSequence& ab, const derender::StateSequence& cd);

/// Ground-truth keypoint states from the simulator: one slot per object,
/// removed objects keep their scene-A position with a zero gate.
derender::StateSequence oracle_states(const sim::Scene& scene, const sim::Trajectory& traj, int keypoints, int c,
                                      const render::KeypointState* fallback = nullptr);
Episode oracle_episode(const bench::Experiment& e, int keypoints, int c);

/// Batched tensors for a set of episodes.
struct Batch {
    std::vector<nn::Tensor> ab;  // per frame [N * K, 2 * width]
    nn::Tensor c;                // [N * K, width]
    std::vector<nn::Tensor> cd;  // per frame [N * K, width]; empty for observations only
};
Batch make_batch(std::span<const Episode* const> episodes);
Batch make_batch(std::span<const Observation* const> observations);

class Cody {
public:
    Cody(const CodyConfig& cfg, int keypoints, int width);

    const CodyConfig& config() const { return cfg_; }
    int keypoints() const { return k_; }
    int width() const { return width_; }
    int latent_width() const { return cfg_.use_encoder ? cfg_.d_sigma : width_; }
    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }

    /// ab[t]: [N * K, 2 * width]. Returns u: [N * K, d_u].
    nn::Tensor estimate_confounders(std::span<const nn::Tensor> ab) const;
    /// [N * K, width] -> [N * K, latent]
    nn::Tensor encode_state(const nn::Tensor& s) const;
    /// Latent sequence to state sequence, same length.
    std::vector<nn::Tensor> decode_states(std::span<const nn::Tensor> sigma) const;
    /// Returns steps + 1 latents starting with sigma0.
    std::vector<nn::Tensor> rollout(const nn::Tensor& sigma0, const nn::Tensor& u, int steps) const;

    /// Predicted states for frames 0..frames-1 of CD, [N * K, width] each.
    std::vector<nn::Tensor> predict(const Batch& batch, int frames) const;
    /// Single-observation convenience, rows of K * width.
    std::vector<std::vector<double>> predict(const Observation& obs, int frames) const;

private:
    CodyConfig cfg_;
    int k_, width_;
    nn::ParamStore ps_;
    nn::GraphNet cf_gn_;
    nn::Gru cf_gru_;
    nn::GraphNet enc_;
    nn::GraphNet dyn_gn_;
    nn::Gru dyn_gru_;
    nn::Linear head_;
    nn::Gru dec_gru_;
    nn::GraphNet dec_gn_;
};

/// Prediction MSE over all CD frames plus gamma3 times the autoencoding
/// error of the true CD states.
nn::Tensor cody_loss(const Cody& model, const Batch& batch, int frames);

struct TrainReport {
    std::vector<double> losses;
    double initial_loss = 0.0;
};

TrainReport train_cody(Cody& model, std::span<const Episode> train);

/// Mean squared error between predicted and true D (frames 1..T-1),
/// averaged over episodes.
double keypoint_mse(const Cody& model, std::span<const Episode> episodes);

/// Mean keypoint MSE of a prediction against the episode's D frames.
double sequence_mse(const std::vector<std::vector<double>>& pred, const std::vector<std::vector<double>>& truth);

struct Prediction {
    std::vector<render::KeypointState> states;
    std::vector<render::Frame> frames;
    /// Which inputs the pipeline read, e.g. "ab:0".."ab:74", "cd:0".
    std::vector<std::string> trace;
};

/// Frames of one experiment as the model may see them.
struct ExperimentFrames {
    std::vector<render::Frame> ab;
    std::vector<render::Frame> cd;
};

ExperimentFrames render_frames(const bench::Experiment& e, int size);

/// Full pipeline: encode AB frames and the C frame, estimate confounders,
/// roll out, decode states and redraw frames from the features of C.
Prediction predict_cd(const ExperimentFrames& frames, const derender::Derenderer& encoder, const Cody& model);

struct Variant {
    std::string name;
    CodyConfig config;
};

struct AblationRow {
    std::string variant;
    double kp_mse = 0.0;
    double final_loss = 0.0;
};

/// Trains every variant on `train` and scores it on `test`; one row each.
std::vector<AblationRow> ablate(std::span<const Variant> variants, std::span<const Episode> train,
                                std::span<const Episode> test);

std::vector<std::vector<double>> flatten_states(const std::vector<render::KeypointState>& states);
std::vector<render::KeypointState> unflatten_states(const std::vector<std::vector<double>>& rows, int keypoints,
                                                    int width);

} // namespace cfphys::cody
