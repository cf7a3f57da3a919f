// SPDX-License-Identifier: Apache-2.0
#include "app.hpp"

#include <algorithm>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "cfphys/error.hpp"
#include "commands.hpp"
#include "run_config.hpp"

#ifndef CFPHYS_VERSION
#define CFPHYS_VERSION "0.0.0"
#endif

namespace cfphys::app {

const char* version() { return CFPHYS_VERSION; }

namespace {

template <class T>
void set_if(const std::optional<T>& v, T& slot) {
    if (v) slot = *v;
}

struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> workers;
    std::optional<std::string> out, data, derender, cody, report;

    // gen
    std::optional<std::string> scenario;
    std::optional<std::size_t> count;
    std::optional<int> n_objects, export_frames;
    std::optional<double> duration, fps, eps;
    bool no_identifiability = false, no_counterfactuality = false, no_contacts = false;

    // train
    std::optional<int> steps, keypoints, coefficients, frame_size, batch;
    std::optional<double> lr;
    bool oracle = false, no_coefficients = false, no_encoder = false;

    // eval
    std::optional<int> png;
    std::optional<double> match_radius;

    // study
    std::optional<std::size_t> samples;
    std::optional<int> fps_steps;
};

void add_common(CLI::App* sub, Overrides& o) {
    sub->add_option("-c,--config", o.config, "JSON config file; flags override its values");
    sub->add_option("--seed", o.seed, "Run seed");
    sub->add_option("--workers", o.workers, "Worker threads (default: CFPHYS_WORKERS or all cores)");
    sub->add_option("-o,--out", o.out, "Output directory");
}

RunConfig effective(const Overrides& o, const std::string& command, const std::string& stage) {
    RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
    set_if(o.seed, cfg.seed);
    set_if(o.workers, cfg.workers);
    set_if(o.out, cfg.paths.out);
    set_if(o.data, cfg.paths.data);
    set_if(o.derender, cfg.paths.derender);
    set_if(o.cody, cfg.paths.cody);
    set_if(o.report, cfg.paths.report);

    if (o.scenario) cfg.scenario.scenario = bench::scenario_from_string(*o.scenario);
    set_if(o.count, cfg.count);
    set_if(o.n_objects, cfg.scenario.n_objects);
    set_if(o.export_frames, cfg.export_frames);
    set_if(o.duration, cfg.scenario.duration);
    set_if(o.fps, cfg.scenario.fps);
    set_if(o.eps, cfg.eps);
    if (o.no_identifiability) cfg.filter_identifiability = false;
    if (o.no_counterfactuality) cfg.filter_counterfactuality = false;
    if (o.no_contacts) cfg.scenario.require_contacts = false;

    if (command == "train") {
        if (stage == "derender") {
            set_if(o.steps, cfg.derender.steps);
            set_if(o.lr, cfg.derender.lr);
            set_if(o.batch, cfg.derender.batch);
        } else {
            set_if(o.steps, cfg.cody.steps);
            set_if(o.lr, cfg.cody.lr);
            set_if(o.batch, cfg.cody.batch);
        }
    }
    set_if(o.keypoints, cfg.derender.keypoints);
    set_if(o.coefficients, cfg.derender.coefficients);
    set_if(o.frame_size, cfg.derender.frame_size);
    if (o.frame_size) cfg.derender.feature_size = *o.frame_size / 4;
    if (o.oracle) cfg.oracle_keypoints = true;
    if (o.no_coefficients) cfg.derender.use_coefficients = false;
    if (o.no_encoder) cfg.cody.use_encoder = false;

    set_if(o.png, cfg.png);
    set_if(o.match_radius, cfg.match_radius);
    set_if(o.samples, cfg.sweep_samples);
    set_if(o.fps_steps, cfg.fps.steps);
    cfg.resolve();
    return cfg;
}

int report_error(const char* kind, const std::exception& e, int code) {
    std::cerr << "cfphys: " << kind << ": " << e.what() << "\n";
    return code;
}

} // namespace

int run(const std::vector<std::string>& args) {
    CLI::App app{"Counterfactual physics benchmark: generation, training and evaluation", "cfphys"};
    app.set_version_flag("--version", version());
    app.require_subcommand(1);

    Overrides o;
    std::string study_name, stage, resume, unfiltered;
    std::vector<std::string> report_inputs;
    SweepArgs sweep;

    auto* gen = app.add_subcommand("gen", "Generate a filtered counterfactual dataset");
    add_common(gen, o);
    gen->add_option("--scenario", o.scenario, "balls or collision");
    gen->add_option("-n,--n", o.count, "Number of accepted experiments");
    gen->add_option("--n-objects", o.n_objects, "Objects per scene");
    gen->add_option("--duration", o.duration, "Seconds per sequence");
    gen->add_option("--fps", o.fps, "Frame rate");
    gen->add_option("--eps", o.eps, "Filter threshold");
    gen->add_option("--frames", o.export_frames, "Also export PNG frames of this size");
    gen->add_flag("--no-identifiability", o.no_identifiability, "Disable the identifiability filter");
    gen->add_flag("--no-counterfactuality", o.no_counterfactuality, "Disable the counterfactuality filter");
    gen->add_flag("--no-contacts", o.no_contacts, "Do not require every body to collide during AB");

    auto* study = app.add_subcommand("study", "Run a study: eps-sweep, fps, probe or doop");
    add_common(study, o);
    study->add_option("which", study_name, "Study name")->required();
    study->add_option("--scenario", o.scenario, "balls or collision");
    study->add_option("--data", o.data, "Filtered dataset (probe)");
    study->add_option("--unfiltered", unfiltered, "Unfiltered dataset (probe)");
    study->add_option("--report", o.report, "Eval report.csv (doop)");
    study->add_option("--samples", o.samples, "Candidates per eps-sweep grid value");
    study->add_option("--steps", o.fps_steps, "Training steps per frame rate (fps)");

    auto* train = app.add_subcommand("train", "Train a stage: derender or cody");
    add_common(train, o);
    train->add_option("stage", stage, "derender or cody")->required();
    train->add_option("--data", o.data, "Dataset directory");
    train->add_option("--derender", o.derender, "Derender checkpoint (cody keypoint source)");
    train->add_flag("--oracle-keypoints", o.oracle, "Train cody on simulator ground-truth states");
    train->add_option("--resume", resume, "Checkpoint of the same stage to continue from");
    train->add_option("--steps", o.steps, "Optimizer steps");
    train->add_option("--lr", o.lr, "Learning rate");
    train->add_option("--batch", o.batch, "Batch size");
    train->add_option("-K,--keypoints", o.keypoints, "Keypoints");
    train->add_option("-C,--coefficients", o.coefficients, "Coefficients per keypoint");
    train->add_option("--frame-size", o.frame_size, "Frame size in pixels (feature map is a quarter)");
    train->add_flag("--no-coefficients", o.no_coefficients, "Plain Gaussian keypoints");
    train->add_flag("--no-encoder", o.no_encoder, "Identity state encoder");

    auto* ev = app.add_subcommand("eval", "Evaluate cody on the test split");
    add_common(ev, o);
    ev->add_option("--data", o.data, "Dataset directory");
    ev->add_option("--cody", o.cody, "Cody checkpoint");
    ev->add_option("--derender", o.derender, "Derender checkpoint (required for derender-trained cody)");
    ev->add_option("--png", o.png, "Write PNG rollouts for the first N test experiments");
    ev->add_option("--match-radius", o.match_radius, "MOT match radius");

    auto* rs = app.add_subcommand("render-sweep", "Decode a frame while sweeping one keypoint component");
    add_common(rs, o);
    rs->add_option("--data", o.data, "Dataset directory");
    rs->add_option("--derender", o.derender, "Derender checkpoint");
    rs->add_option("--index", sweep.index, "Test-split experiment index");
    rs->add_option("--kp", sweep.keypoint, "Keypoint index");
    rs->add_option("--component", sweep.component, "0/1: x/y, 2+i: coefficient i (last is the gate)");
    rs->add_option("--lo", sweep.lo, "Sweep start");
    rs->add_option("--hi", sweep.hi, "Sweep end");
    rs->add_option("--steps", sweep.steps, "Sweep samples");

    auto* rep = app.add_subcommand("report", "Collect summaries of output directories into report.md");
    add_common(rep, o);
    rep->add_option("inputs", report_inputs, "Output directories")->required();

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (gen->parsed()) {
            cmd_gen(effective(o, "gen", ""));
        } else if (study->parsed()) {
            cmd_study(study_name, effective(o, "study", ""), unfiltered);
        } else if (train->parsed()) {
            cmd_train(stage, effective(o, "train", stage), resume);
        } else if (ev->parsed()) {
            cmd_eval(effective(o, "eval", ""));
        } else if (rs->parsed()) {
            cmd_render_sweep(effective(o, "render-sweep", ""), sweep);
        } else if (rep->parsed()) {
            cmd_report(effective(o, "report", ""), report_inputs);
        }
    } catch (const UsageError& e) {
        return report_error("usage error", e, kExitUsage);
    } catch (const PrereqError& e) {
        return report_error("missing prerequisite", e, kExitPrereq);
    } catch (const NumericError& e) {
        return report_error("numeric failure", e, kExitNumeric);
    } catch (const std::exception& e) {
        return report_error("error", e, kExitError);
    }
    return kExitOk;
}

} // namespace cfphys::app
