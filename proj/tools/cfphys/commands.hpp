// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "run_config.hpp"

namespace cfphys::app {

void cmd_gen(const RunConfig& cfg);
/// which: eps-sweep, fps, doop or probe.
void cmd_study(const std::string& which, const RunConfig& cfg, const std::string& unfiltered);
/// stage: derender or cody. `resume` is a checkpoint of the same stage.
void cmd_train(const std::string& stage, const RunConfig& cfg, const std::string& resume);
void cmd_eval(const RunConfig& cfg);

struct SweepArgs {
    std::size_t index = 0;
    std::size_t keypoint = 0;
    std::size_t component = 0;
    double lo = 0.0;
    double hi = 1.0;
    int steps = 8;
};
void cmd_render_sweep(const RunConfig& cfg, const SweepArgs& args);
void cmd_report(const RunConfig& cfg, const std::vector<std::string>& inputs);

/// Checkpoint plus its "<path>.json" sidecar.
std::unique_ptr<derender::Derenderer> load_derenderer(const std::filesystem::path& ckpt);

} // namespace cfphys::app
