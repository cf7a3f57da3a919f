// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfphys/benchgen.hpp"
#include "cfphys/cody.hpp"
#include "cfphys/derender.hpp"
#include "cfphys/eval.hpp"

namespace cfphys::app {

struct Paths {
    std::string data;
    std::string out = "out";
    std::string derender;
    std::string cody;
    std::string report;
};

/// Effective configuration of one invocation. Every stage seed is derived
/// from `seed`.
struct RunConfig {
    std::uint64_t seed = 1;
    /// 0: CFPHYS_WORKERS, else hardware concurrency.
    unsigned workers = 0;

    bench::ScenarioConfig scenario;
    double eps = 30.0;
    std::size_t count = 500;
    bool filter_identifiability = true;
    bool filter_counterfactuality = true;
    /// > 0: also export PNG frames of this size next to the CSVs.
    int export_frames = 0;

    derender::DerenderConfig derender;
    cody::CodyConfig cody;
    bool oracle_keypoints = false;

    std::vector<double> eps_grid{0.01, 0.1, 1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1000.0};
    std::size_t sweep_samples = 500;
    eval::FpsStudyConfig fps;
    eval::ProbeConfig probe;
    int doop_bins = 4;
    double doop_max_shift = 0.25;

    double match_radius = 0.05;
    double bg_thresh = 0.05;
    /// Experiments of the test split that get PNG rollouts.
    int png = 0;

    Paths paths;

    /// Copies the run seed into the stage configs and checks every field.
    void resolve();
    unsigned effective_workers() const;
};

nlohmann::ordered_json to_json(const RunConfig& cfg);
/// Overlays `patch` on the defaults. Unknown keys are a UsageError naming
/// the key path.
RunConfig from_json(const nlohmann::json& patch);
RunConfig load_config(const std::filesystem::path& path);

/// SHA-256 of the config with paths and workers left out.
std::string config_hash(const RunConfig& cfg);

nlohmann::ordered_json derender_json(const derender::DerenderConfig& c);
derender::DerenderConfig derender_from_json(const nlohmann::json& j);
nlohmann::ordered_json cody_json(const cody::CodyConfig& c);
cody::CodyConfig cody_from_json(const nlohmann::json& j);

} // namespace cfphys::app
