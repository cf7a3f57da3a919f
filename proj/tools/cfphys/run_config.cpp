// SPDX-License-Identifier: Apache-2.0
#include "run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <thread>

#include "cfphys/error.hpp"
#include "cfphys/io.hpp"

namespace cfphys::app {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

void strict_merge(ordered_json& base, const json& patch, const std::string& path) {
    if (!patch.is_object()) throw UsageError("config: '" + (path.empty() ? "<root>" : path) + "' must be an object");
    for (const auto& [key, value] : patch.items()) {
        const std::string where = path.empty() ? key : path + "." + key;
        if (!base.contains(key)) throw UsageError("config: unknown key '" + where + "'");
        ordered_json& slot = base[key];
        if (slot.is_object())
            strict_merge(slot, value, where);
        else
            slot = value;
    }
}

template <class T>
T field(const ordered_json& j, const std::string& section, const std::string& key) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw UsageError("config: bad value for '" + section + "." + key + "'");
    }
}

} // namespace

ordered_json derender_json(const derender::DerenderConfig& c) {
    return {{"K", c.keypoints},          {"C", c.coefficients},           {"use_coefficients", c.use_coefficients},
            {"gamma1", c.gamma1},        {"gamma2", c.gamma2},             {"lr", c.lr},
            {"frame_size", c.frame_size}, {"feature_size", c.feature_size}, {"width1", c.width1},
            {"width2", c.width2},        {"refine_width", c.refine_width}, {"sigma", c.sigma},
            {"batch", c.batch},          {"steps", c.steps}};
}

derender::DerenderConfig derender_from_json(const json& jin) {
    const ordered_json j = jin;
    derender::DerenderConfig c;
    const std::string s = "derender";
    c.keypoints = field<int>(j, s, "K");
    c.coefficients = field<int>(j, s, "C");
    c.use_coefficients = field<bool>(j, s, "use_coefficients");
    c.gamma1 = field<double>(j, s, "gamma1");
    c.gamma2 = field<double>(j, s, "gamma2");
    c.lr = field<double>(j, s, "lr");
    c.frame_size = field<int>(j, s, "frame_size");
    c.feature_size = field<int>(j, s, "feature_size");
    c.width1 = field<int>(j, s, "width1");
    c.width2 = field<int>(j, s, "width2");
    c.refine_width = field<int>(j, s, "refine_width");
    c.sigma = field<double>(j, s, "sigma");
    c.batch = field<int>(j, s, "batch");
    c.steps = field<int>(j, s, "steps");
    if (j.contains("seed")) c.seed = field<std::uint64_t>(j, s, "seed");
    return c;
}

ordered_json cody_json(const cody::CodyConfig& c) {
    return {{"d_u", c.d_u},
            {"d_sigma", c.d_sigma},
            {"gn_hidden", c.gn_hidden},
            {"gru_hidden", c.gru_hidden},
            {"gru_layers", c.gru_layers},
            {"gamma3", c.gamma3},
            {"lr", c.lr},
            {"batch", c.batch},
            {"steps", c.steps},
            {"use_encoder", c.use_encoder},
            {"curriculum_start", c.curriculum_start}};
}

cody::CodyConfig cody_from_json(const json& jin) {
    const ordered_json j = jin;
    cody::CodyConfig c;
    const std::string s = "cody";
    c.d_u = field<int>(j, s, "d_u");
    c.d_sigma = field<int>(j, s, "d_sigma");
    c.gn_hidden = field<std::vector<int>>(j, s, "gn_hidden");
    c.gru_hidden = field<int>(j, s, "gru_hidden");
    c.gru_layers = field<int>(j, s, "gru_layers");
    c.gamma3 = field<double>(j, s, "gamma3");
    c.lr = field<double>(j, s, "lr");
    c.batch = field<int>(j, s, "batch");
    c.steps = field<int>(j, s, "steps");
    c.use_encoder = field<bool>(j, s, "use_encoder");
    c.curriculum_start = field<int>(j, s, "curriculum_start");
    if (j.contains("seed")) c.seed = field<std::uint64_t>(j, s, "seed");
    return c;
}

ordered_json to_json(const RunConfig& cfg) {
    const auto& sc = cfg.scenario;
    ordered_json data = {{"scenario", bench::to_string(sc.scenario)},
                         {"n_objects", sc.n_objects},
                         {"duration_s", sc.duration},
                         {"fps", sc.fps},
                         {"eps", cfg.eps},
                         {"count", cfg.count},
                         {"radius_min", sc.radius_min},
                         {"radius_max", sc.radius_max},
                         {"speed_min", sc.speed_min},
                         {"speed_max", sc.speed_max},
                         {"shift_min", sc.shift_min},
                         {"shift_max", sc.shift_max},
                         {"max_do_trials", sc.max_do_trials},
                         {"require_contacts", sc.require_contacts},
                         {"mass_alphabet", sc.mass_alphabet},
                         {"filter_identifiability", cfg.filter_identifiability},
                         {"filter_counterfactuality", cfg.filter_counterfactuality},
                         {"export_frames", cfg.export_frames}};
    ordered_json cody = cody_json(cfg.cody);
    cody["oracle_keypoints"] = cfg.oracle_keypoints;
    const auto& f = cfg.fps;
    ordered_json fps = {{"fps_grid", f.fps_grid}, {"base_fps", f.base_fps},   {"history_s", f.history},
                        {"horizon_s", f.horizon}, {"train_scenes", f.train_scenes}, {"test_scenes", f.test_scenes},
                        {"hidden", f.hidden},     {"steps", f.steps},          {"batch", f.batch},
                        {"lr", f.lr}};
    const auto& p = cfg.probe;
    ordered_json probe = {{"hidden", p.hidden}, {"steps", p.steps},           {"batch", p.batch},
                          {"lr", p.lr},         {"frame_stride", p.frame_stride}, {"randomize_labels", p.randomize_labels}};
    ordered_json study = {{"eps_grid", cfg.eps_grid},   {"sweep_samples", cfg.sweep_samples},
                          {"fps", fps},                 {"probe", probe},
                          {"doop_bins", cfg.doop_bins}, {"doop_max_shift", cfg.doop_max_shift}};
    ordered_json ev = {{"match_radius", cfg.match_radius}, {"bg_thresh", cfg.bg_thresh}, {"png", cfg.png}};
    ordered_json paths = {{"data", cfg.paths.data},
                          {"out", cfg.paths.out},
                          {"derender", cfg.paths.derender},
                          {"cody", cfg.paths.cody},
                          {"report", cfg.paths.report}};
    return {{"seed", cfg.seed}, {"workers", cfg.workers},   {"data", data}, {"derender", derender_json(cfg.derender)},
            {"cody", cody},     {"study", study},           {"eval", ev},   {"paths", paths}};
}

RunConfig from_json(const json& patch) {
    ordered_json j = to_json(RunConfig{});
    strict_merge(j, patch, "");
    RunConfig cfg;
    cfg.seed = field<std::uint64_t>(j, "", "seed");
    cfg.workers = field<unsigned>(j, "", "workers");

    const auto& d = j["data"];
    auto& sc = cfg.scenario;
    try {
        sc.scenario = bench::scenario_from_string(field<std::string>(d, "data", "scenario"));
    } catch (const UsageError&) {
        throw UsageError("config: bad value for 'data.scenario'");
    }
    sc.n_objects = field<int>(d, "data", "n_objects");
    sc.duration = field<double>(d, "data", "duration_s");
    sc.fps = field<double>(d, "data", "fps");
    cfg.eps = field<double>(d, "data", "eps");
    cfg.count = field<std::size_t>(d, "data", "count");
    sc.radius_min = field<double>(d, "data", "radius_min");
    sc.radius_max = field<double>(d, "data", "radius_max");
    sc.speed_min = field<double>(d, "data", "speed_min");
    sc.speed_max = field<double>(d, "data", "speed_max");
    sc.shift_min = field<double>(d, "data", "shift_min");
    sc.shift_max = field<double>(d, "data", "shift_max");
    sc.max_do_trials = field<int>(d, "data", "max_do_trials");
    sc.require_contacts = field<bool>(d, "data", "require_contacts");
    sc.mass_alphabet = field<std::vector<double>>(d, "data", "mass_alphabet");
    cfg.filter_identifiability = field<bool>(d, "data", "filter_identifiability");
    cfg.filter_counterfactuality = field<bool>(d, "data", "filter_counterfactuality");
    cfg.export_frames = field<int>(d, "data", "export_frames");

    cfg.derender = derender_from_json(j["derender"]);
    cfg.cody = cody_from_json(j["cody"]);
    cfg.oracle_keypoints = field<bool>(j["cody"], "cody", "oracle_keypoints");

    const auto& s = j["study"];
    cfg.eps_grid = field<std::vector<double>>(s, "study", "eps_grid");
    cfg.sweep_samples = field<std::size_t>(s, "study", "sweep_samples");
    cfg.doop_bins = field<int>(s, "study", "doop_bins");
    cfg.doop_max_shift = field<double>(s, "study", "doop_max_shift");
    const auto& f = s["fps"];
    cfg.fps.fps_grid = field<std::vector<int>>(f, "study.fps", "fps_grid");
    cfg.fps.base_fps = field<int>(f, "study.fps", "base_fps");
    cfg.fps.history = field<double>(f, "study.fps", "history_s");
    cfg.fps.horizon = field<double>(f, "study.fps", "horizon_s");
    cfg.fps.train_scenes = field<int>(f, "study.fps", "train_scenes");
    cfg.fps.test_scenes = field<int>(f, "study.fps", "test_scenes");
    cfg.fps.hidden = field<int>(f, "study.fps", "hidden");
    cfg.fps.steps = field<int>(f, "study.fps", "steps");
    cfg.fps.batch = field<int>(f, "study.fps", "batch");
    cfg.fps.lr = field<double>(f, "study.fps", "lr");
    const auto& p = s["probe"];
    cfg.probe.hidden = field<int>(p, "study.probe", "hidden");
    cfg.probe.steps = field<int>(p, "study.probe", "steps");
    cfg.probe.batch = field<int>(p, "study.probe", "batch");
    cfg.probe.lr = field<double>(p, "study.probe", "lr");
    cfg.probe.frame_stride = field<int>(p, "study.probe", "frame_stride");
    cfg.probe.randomize_labels = field<bool>(p, "study.probe", "randomize_labels");

    const auto& e = j["eval"];
    cfg.match_radius = field<double>(e, "eval", "match_radius");
    cfg.bg_thresh = field<double>(e, "eval", "bg_thresh");
    cfg.png = field<int>(e, "eval", "png");

    const auto& pa = j["paths"];
    cfg.paths.data = field<std::string>(pa, "paths", "data");
    cfg.paths.out = field<std::string>(pa, "paths", "out");
    cfg.paths.derender = field<std::string>(pa, "paths", "derender");
    cfg.paths.cody = field<std::string>(pa, "paths", "cody");
    cfg.paths.report = field<std::string>(pa, "paths", "report");
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw PrereqError("config: cannot read " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw UsageError("config: " + path.string() + ": " + e.what());
    }
    return from_json(j);
}

void RunConfig::resolve() {
    bench::validate(scenario);
    if (!(eps > 0.0)) throw UsageError("config: data.eps must be > 0");
    if (count == 0) throw UsageError("config: data.count must be > 0");
    if (export_frames < 0) throw UsageError("config: data.export_frames must be >= 0");
    derender.seed = seed;
    derender.validate();
    cody.seed = seed;
    cody.validate();
    if (oracle_keypoints && derender.keypoints < scenario.n_objects)
        throw UsageError("config: derender.K must be >= data.n_objects for oracle keypoints");
    if (eps_grid.empty()) throw UsageError("config: study.eps_grid is empty");
    if (sweep_samples == 0) throw UsageError("config: study.sweep_samples must be > 0");
    fps.scenario = scenario;
    fps.seed = seed;
    probe.seed = seed;
    if (doop_bins < 1) throw UsageError("config: study.doop_bins must be >= 1");
    if (!(doop_max_shift > 0.0)) throw UsageError("config: study.doop_max_shift must be > 0");
    if (!(match_radius > 0.0)) throw UsageError("config: eval.match_radius must be > 0");
    if (png < 0) throw UsageError("config: eval.png must be >= 0");
}

unsigned RunConfig::effective_workers() const {
    if (workers > 0) return workers;
    if (const char* env = std::getenv("CFPHYS_WORKERS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || v < 1) throw UsageError("CFPHYS_WORKERS must be a positive integer");
        return static_cast<unsigned>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

std::string config_hash(const RunConfig& cfg) {
    ordered_json j = to_json(cfg);
    j.erase("paths");
    j.erase("workers");
    return io::sha256_hex(j.dump());
}

} // namespace cfphys::app
