// SPDX-License-Identifier: Apache-2.0
#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "app.hpp"
#include "cfphys/error.hpp"
#include "cfphys/io.hpp"
#include "pool.hpp"

namespace cfphys::app {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

ordered_json stamp(const RunConfig& cfg) {
    return {{"version", version()}, {"seed", cfg.seed}, {"config_hash", config_hash(cfg)}};
}

std::string csv_banner(const RunConfig& cfg) {
    return "# cfphys " + std::string(version()) + " seed=" + std::to_string(cfg.seed) + " config=" + config_hash(cfg) +
           "\n";
}

void write_config(const fs::path& dir, const RunConfig& cfg) {
    ordered_json j = stamp(cfg);
    j["config"] = to_json(cfg);
    io::write_text(dir / "config.json", j.dump(2) + "\n");
}

void write_json(const fs::path& path, const ordered_json& j) { io::write_text(path, j.dump(2) + "\n"); }

fs::path out_dir(const RunConfig& cfg) {
    if (cfg.paths.out.empty()) throw UsageError("paths.out is empty");
    fs::create_directories(cfg.paths.out);
    return cfg.paths.out;
}

bench::Dataset need_dataset(const RunConfig& cfg, const std::string& who) {
    if (cfg.paths.data.empty()) throw PrereqError(who + ": needs a dataset (--data)");
    return io::load_dataset(cfg.paths.data);
}

std::vector<bench::Experiment> split(const bench::Dataset& ds, io::Split which) {
    std::vector<bench::Experiment> out;
    for (const auto& e : ds.experiments)
        if (io::split_of(e.id) == which) out.push_back(e);
    return out;
}

void write_losses(const fs::path& path, const RunConfig& cfg, const std::vector<std::pair<std::uint64_t, double>>& rows) {
    std::string text = csv_banner(cfg) + "step,loss\n";
    for (const auto& [s, l] : rows) text += std::to_string(s) + "," + num(l) + "\n";
    io::write_text(path, text);
}

/// Rows of a loss CSV written by write_losses.
std::vector<std::pair<std::uint64_t, double>> read_losses(const fs::path& path) {
    std::vector<std::pair<std::uint64_t, double>> rows;
    std::istringstream in(io::read_text(path));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#' || line.rfind("step", 0) == 0) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw IoError("losses: malformed line in " + path.string());
        rows.emplace_back(std::stoull(line.substr(0, comma)), std::stod(line.substr(comma + 1)));
    }
    return rows;
}

/// Header-keyed rows of a CSV, skipping '#' lines.
std::vector<std::map<std::string, std::string>> read_csv(const fs::path& path) {
    std::istringstream in(io::read_text(path));
    std::string line;
    std::vector<std::string> header;
    std::vector<std::map<std::string, std::string>> rows;
    auto cells = [](const std::string& l) {
        std::vector<std::string> out;
        std::stringstream ss(l);
        std::string c;
        while (std::getline(ss, c, ',')) out.push_back(c);
        return out;
    };
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (header.empty()) {
            header = cells(line);
            continue;
        }
        const auto c = cells(line);
        if (c.size() != header.size()) throw IoError("csv: ragged row in " + path.string());
        std::map<std::string, std::string> row;
        for (std::size_t i = 0; i < c.size(); ++i) row[header[i]] = c[i];
        rows.push_back(std::move(row));
    }
    return rows;
}

json read_json(const fs::path& path) {
    try {
        return json::parse(io::read_text(path));
    } catch (const json::exception& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

// Loss history to keep from the run being resumed: rows before its step.
std::vector<std::pair<std::uint64_t, double>> prior_losses(const fs::path& resume, const std::string& stage,
                                                           std::uint64_t step) {
    const fs::path csv = resume.parent_path() / (stage + "_losses.csv");
    std::vector<std::pair<std::uint64_t, double>> rows;
    if (!fs::exists(csv)) return rows;
    for (const auto& r : read_losses(csv))
        if (r.first < step) rows.push_back(r);
    return rows;
}

struct CodySidecar {
    int keypoints = 0;
    int width = 0;
    std::string source;
    cody::CodyConfig config;
};

CodySidecar read_cody_sidecar(const fs::path& ckpt) {
    const fs::path side = ckpt.string() + ".json";
    if (!fs::exists(ckpt) || !fs::exists(side)) throw PrereqError("missing cody checkpoint: " + ckpt.string());
    const json j = read_json(side);
    if (j.value("stage", "") != "cody") throw UsageError(ckpt.string() + " is not a cody checkpoint");
    CodySidecar s;
    s.keypoints = j.at("keypoints").get<int>();
    s.width = j.at("width").get<int>();
    s.source = j.at("keypoint_source").get<std::string>();
    s.config = cody_from_json(j.at("config"));
    return s;
}

std::unique_ptr<cody::Cody> load_cody(const fs::path& ckpt, const CodySidecar& side) {
    auto m = std::make_unique<cody::Cody>(side.config, side.keypoints, side.width);
    m->params().assign(nn::ParamStore::load(ckpt));
    return m;
}

std::vector<cody::Episode> oracle_episodes(std::span<const bench::Experiment> exps, int k, int c, unsigned workers) {
    std::vector<cody::Episode> out(exps.size());
    parallel_for(exps.size(), workers, [&](std::size_t i) { out[i] = cody::oracle_episode(exps[i], k, c); });
    return out;
}

std::vector<cody::Episode> encoded_episodes(std::span<const bench::Experiment> exps, const derender::Derenderer& enc,
                                            unsigned workers) {
    std::vector<cody::Episode> out(exps.size());
    parallel_for(exps.size(), workers, [&](std::size_t i) {
        nn::NoGradGuard ng;
        const auto frames = cody::render_frames(exps[i], enc.config().frame_size);
        out[i] = cody::make_episode(exps[i].id, derender::encode_trajectory(enc, frames.ab),
                                    derender::encode_trajectory(enc, frames.cd));
    });
    return out;
}

// printf-style line to std::cout, so callers can redirect it.
template <class... A>
void say(const char* f, A... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    std::cout << buf;
}

void print_kv(const std::string& k, const std::string& v) { std::cout << "  " << k << ": " << v << "\n"; }

} // namespace

std::unique_ptr<derender::Derenderer> load_derenderer(const fs::path& ckpt) {
    const fs::path side = ckpt.string() + ".json";
    if (ckpt.empty() || !fs::exists(ckpt) || !fs::exists(side))
        throw PrereqError("missing derender checkpoint: " + (ckpt.empty() ? std::string("(none given)") : ckpt.string()));
    const json j = read_json(side);
    if (j.value("stage", "") != "derender") throw UsageError(ckpt.string() + " is not a derender checkpoint");
    auto m = std::make_unique<derender::Derenderer>(derender_from_json(j.at("config")));
    m->params().assign(nn::ParamStore::load(ckpt));
    return m;
}

// ---------------------------------------------------------------- gen

void cmd_gen(const RunConfig& cfg) {
    const fs::path out = out_dir(cfg);
    const auto ds = bench::generate_dataset(cfg.scenario, cfg.eps, cfg.count, cfg.seed,
                                            {cfg.filter_identifiability, cfg.filter_counterfactuality},
                                            cfg.effective_workers());
    const std::string hash = io::export_dataset(ds, out, {cfg.export_frames});
    write_config(out, cfg);

    const auto [lo, hi] = std::minmax_element(ds.cell_counts.begin(), ds.cell_counts.end());
    const double imbalance = *lo == 0 ? INFINITY : static_cast<double>(*hi) / static_cast<double>(*lo);
    std::size_t counts[3] = {};
    for (const auto& e : ds.experiments) ++counts[static_cast<int>(io::split_of(e.id))];

    ordered_json summary = stamp(cfg);
    summary["manifest_hash"] = hash;
    summary["experiments"] = ds.experiments.size();
    summary["attempts"] = ds.stats.attempts;
    summary["rejections"] = ds.stats.rejections;
    summary["cell_counts"] = ds.cell_counts;
    summary["cell_imbalance"] = std::isfinite(imbalance) ? json(imbalance) : json(nullptr);
    summary["split"] = {{"train", counts[0]}, {"val", counts[1]}, {"test", counts[2]}};
    write_json(out / "summary.json", summary);

    std::cout << "generated " << ds.experiments.size() << " experiments in " << out.string() << "\n";
    print_kv("attempts", std::to_string(ds.stats.attempts));
    std::cout << "  rejections:\n";
    for (const auto& [reason, n] : ds.stats.rejections) std::cout << "    " << reason << ": " << n << "\n";
    std::string cells;
    for (auto c : ds.cell_counts) cells += (cells.empty() ? "" : " ") + std::to_string(c);
    print_kv("cell counts", cells);
    print_kv("split", std::to_string(counts[0]) + "/" + std::to_string(counts[1]) + "/" + std::to_string(counts[2]));
    print_kv("manifest hash", hash);
}

// ---------------------------------------------------------------- study

void cmd_study(const std::string& which, const RunConfig& cfg, const std::string& unfiltered) {
    const fs::path out = out_dir(cfg);
    ordered_json summary = stamp(cfg);
    summary["study"] = which;

    if (which == "eps-sweep") {
        const auto rows = bench::threshold_sweep(cfg.scenario, cfg.eps_grid, cfg.sweep_samples, cfg.seed);
        std::string csv = csv_banner(cfg) + "eps,rejection_pct\n";
        for (const auto& r : rows) csv += num(r.eps) + "," + num(r.rejection_pct) + "\n";
        io::write_text(out / "eps_sweep.csv", csv);
        summary["best_eps"] = bench::best_threshold(rows);
        summary["rows"] = rows.size();
        std::cout << "eps sweep over " << cfg.sweep_samples << " candidates\n";
        for (const auto& r : rows) say("  eps %-10g rejected %6.2f%%\n", r.eps, r.rejection_pct);
        say("  best eps: %g\n", bench::best_threshold(rows));
    } else if (which == "fps") {
        eval::FpsStudyConfig f = cfg.fps;
        if (std::find(f.fps_grid.begin(), f.fps_grid.end(), f.base_fps) == f.fps_grid.end())
            f.fps_grid.insert(f.fps_grid.begin(), f.base_fps);
        const auto rows = eval::fps_study(f);
        std::string csv = csv_banner(cfg) + "fps,mse,constant_mse\n";
        for (const auto& r : rows) csv += std::to_string(r.fps) + "," + num(r.mse) + "," + num(r.constant_mse) + "\n";
        io::write_text(out / "fps.csv", csv);
        summary["rows"] = rows.size();
        for (const auto& r : rows) {
            summary["mse"][std::to_string(r.fps)] = r.mse;
            say("  %3d fps  mse %.6f  constant %.6f\n", r.fps, r.mse, r.constant_mse);
        }
    } else if (which == "probe") {
        const auto filtered = need_dataset(cfg, "study probe");
        if (unfiltered.empty()) throw PrereqError("study probe: needs an unfiltered dataset (--unfiltered)");
        const auto raw = io::load_dataset(unfiltered);
        const auto cmp = eval::confounder_probe(filtered.experiments, raw.experiments, cfg.probe);
        std::string csv = csv_banner(cfg) + "dataset,accuracy,corrected_accuracy,test_bodies,corrected_bodies\n";
        for (const auto& [name, r] : {std::pair{"filtered", cmp.filtered}, std::pair{"unfiltered", cmp.unfiltered}}) {
            csv += std::string(name) + "," + num(r.accuracy) + "," + num(r.corrected_accuracy) + "," +
                   std::to_string(r.test_bodies) + "," + std::to_string(r.corrected_bodies) + "\n";
            say("  %-10s accuracy %.3f  corrected %.3f  (%zu bodies)\n", name, r.accuracy, r.corrected_accuracy,
                        r.test_bodies);
        }
        io::write_text(out / "probe.csv", csv);
        summary["accuracy_gap"] = cmp.filtered.accuracy - cmp.unfiltered.accuracy;
    } else if (which == "doop") {
        if (cfg.paths.report.empty()) throw PrereqError("study doop: needs an eval report (--report)");
        std::vector<eval::DoopSample> samples;
        for (const auto& row : read_csv(cfg.paths.report)) {
            if (!row.contains("psnr"))
                throw PrereqError("study doop: report has no psnr column; run eval with a derender checkpoint");
            samples.push_back({row.at("id"), bench::do_kind_from_string(row.at("do_kind")),
                               std::stod(row.at("magnitude")), std::stod(row.at("psnr"))});
        }
        const auto rep = eval::doop_impact(samples, cfg.doop_bins, cfg.doop_max_shift);
        std::string csv = csv_banner(cfg) + "kind,lo,hi,count,mean_psnr\n";
        for (const auto& r : rep.rows) {
            csv += r.kind + "," + num(r.lo) + "," + num(r.hi) + "," + std::to_string(r.count) + "," + num(r.mean_psnr) +
                   "\n";
            say("  %-6s [%.3f, %.3f]  n=%-4zu psnr %.2f\n", r.kind.c_str(), r.lo, r.hi, r.count, r.mean_psnr);
        }
        io::write_text(out / "doop.csv", csv);
        std::size_t removes = 0, shifts = 0;
        for (const auto& r : rep.rows) (r.kind == "remove" ? removes : shifts) += r.count;
        summary["shift_mean"] = shifts ? json(rep.shift_mean) : json(nullptr);
        summary["remove_mean"] = removes ? json(rep.remove_mean) : json(nullptr);
        summary["gap"] = shifts && removes ? json(rep.gap) : json(nullptr);
    } else {
        throw UsageError("study: unknown study '" + which + "' (expected eps-sweep, fps, probe or doop)");
    }
    write_config(out, cfg);
    write_json(out / (which + "_summary.json"), summary);
}

// ---------------------------------------------------------------- train

void cmd_train(const std::string& stage, const RunConfig& cfg, const std::string& resume) {
    if (stage != "derender" && stage != "cody")
        throw UsageError("train: unknown stage '" + stage + "' (expected derender or cody)");

    // Stage gate before touching any data.
    std::unique_ptr<derender::Derenderer> encoder;
    if (stage == "cody" && !cfg.oracle_keypoints) {
        if (cfg.paths.derender.empty())
            throw PrereqError("train cody: needs a derender checkpoint (--derender) or --oracle-keypoints");
        encoder = load_derenderer(cfg.paths.derender);
    }
    std::unique_ptr<nn::ParamStore> resumed;
    std::uint64_t start = 0;
    if (!resume.empty()) {
        if (!fs::exists(resume)) throw PrereqError("train: missing checkpoint to resume: " + resume);
        resumed = std::make_unique<nn::ParamStore>(nn::ParamStore::load(fs::path(resume)));
        start = resumed->step();
    }
    // A resumed run draws a fresh batch stream keyed on the step it resumes at.
    const std::uint64_t run_seed = start == 0 ? cfg.seed : bench::derive_seed(cfg.seed, start);

    const auto ds = need_dataset(cfg, "train " + stage);
    const auto train = split(ds, io::Split::train);
    const auto val = split(ds, io::Split::val);
    if (train.empty()) throw PrereqError("train: dataset has no training experiments");
    const fs::path out = out_dir(cfg);
    const unsigned workers = cfg.effective_workers();

    std::vector<double> losses;
    ordered_json side = stamp(cfg);
    side["stage"] = stage;
    ordered_json summary = stamp(cfg);
    summary["stage"] = stage;
    summary["train_experiments"] = train.size();
    summary["val_experiments"] = val.size();

    const fs::path ckpt = out / (stage + ".ckpt");
    if (stage == "derender") {
        derender::DerenderConfig dc = cfg.derender;
        dc.seed = run_seed;
        derender::Derenderer model(dc);
        if (resumed) model.params().assign(*resumed);
        const auto rep = derender::train_derender(model, train, val);
        losses = rep.losses;
        model.params().save(ckpt);
        ordered_json c = derender_json(cfg.derender);
        c["seed"] = cfg.seed;
        side["config"] = c;
        summary["heldout_psnr"] = rep.heldout_psnr;
        summary["copy_source_psnr"] = rep.copy_source_psnr;
        say("derender: %zu steps, held-out PSNR %.2f dB (copy source %.2f dB)\n", losses.size(),
                    rep.heldout_psnr, rep.copy_source_psnr);
    } else {
        int k = 0, width = 0;
        std::vector<cody::Episode> tr, va;
        if (cfg.oracle_keypoints) {
            k = cfg.derender.keypoints;
            width = 2 + cfg.derender.coefficients + 1;
            tr = oracle_episodes(train, k, cfg.derender.coefficients, workers);
            va = oracle_episodes(val, k, cfg.derender.coefficients, workers);
            side["keypoint_source"] = "oracle";
        } else {
            k = encoder->config().keypoints;
            width = 2 + encoder->config().coefficient_width();
            tr = encoded_episodes(train, *encoder, workers);
            va = encoded_episodes(val, *encoder, workers);
            side["keypoint_source"] = "derender";
            side["derender"] = cfg.paths.derender;
        }
        cody::CodyConfig cc = cfg.cody;
        cc.seed = run_seed;
        cody::Cody model(cc, k, width);
        if (resumed) model.params().assign(*resumed);
        const auto rep = cody::train_cody(model, tr);
        losses = rep.losses;
        model.params().save(ckpt);
        side["keypoints"] = k;
        side["width"] = width;
        ordered_json c = cody_json(cfg.cody);
        c["seed"] = cfg.seed;
        side["config"] = c;
        if (!va.empty()) {
            nn::NoGradGuard ng;
            double cb = 0.0, cc2 = 0.0;
            for (const auto& e : va) {
                const auto s = eval::copy_keypoint_mse(e);
                cb += s.copy_b;
                cc2 += s.copy_c;
            }
            const double n = static_cast<double>(va.size());
            summary["val_kp_mse"] = cody::keypoint_mse(model, va);
            summary["val_copy_b_mse"] = cb / n;
            summary["val_copy_c_mse"] = cc2 / n;
            say("cody: %zu steps, val kp MSE %.6f (copy B %.6f, copy C %.6f)\n", losses.size(),
                        summary["val_kp_mse"].get<double>(), cb / n, cc2 / n);
        }
    }
    side["steps_total"] = start + losses.size();
    write_json(ckpt.string() + ".json", side);

    auto rows = resume.empty() ? std::vector<std::pair<std::uint64_t, double>>{}
                               : prior_losses(resume, stage, start);
    for (std::size_t i = 0; i < losses.size(); ++i) rows.emplace_back(start + i, losses[i]);
    write_losses(out / (stage + "_losses.csv"), cfg, rows);
    summary["resumed_from_step"] = start;
    summary["final_loss"] = losses.empty() ? 0.0 : losses.back();
    write_config(out, cfg);
    write_json(out / (stage + "_summary.json"), summary);
    std::cout << "wrote " << ckpt.string() << "\n";
}

// ---------------------------------------------------------------- eval

namespace {

struct EvalRow {
    std::string id;
    bench::DoKind kind = bench::DoKind::shift;
    double magnitude = 0.0;
    double kp_mse = 0.0;
    eval::CopyScores copy_kp;
    bool pixels = false;
    double psnr = 0.0;
    double l_psnr = NAN;
    eval::CopyScores copy_px;
    eval::MotResult mot;
    std::string audit;
};

double do_magnitude(const bench::DoOperation& op) {
    return op.kind == bench::DoKind::remove ? 0.0 : std::hypot(op.delta.x, op.delta.y);
}

std::string compress_trace(const std::vector<std::string>& trace) {
    std::size_t ab = 0;
    std::string other;
    for (const auto& t : trace) {
        if (t.rfind("ab:", 0) == 0)
            ++ab;
        else
            other += "," + t;
    }
    return "ab:0-" + std::to_string(ab == 0 ? 0 : ab - 1) + other;
}

std::vector<std::vector<eval::Tracked>> predicted_tracks(const std::vector<render::KeypointState>& states,
                                                         bool gated) {
    std::vector<std::vector<eval::Tracked>> out;
    for (std::size_t t = 1; t < states.size(); ++t) {
        std::vector<eval::Tracked> f;
        for (std::size_t k = 0; k < states[t].keypoints.size(); ++k) {
            const auto& kp = states[t].keypoints[k];
            if (gated && kp.coefficients.back() <= 0.5) continue;
            f.push_back({static_cast<int>(k), kp.position});
        }
        out.push_back(std::move(f));
    }
    return out;
}

std::vector<std::vector<eval::Tracked>> object_tracks(const bench::Experiment& e) {
    std::vector<std::vector<eval::Tracked>> out;
    for (std::size_t t = 1; t < e.traj_cd.frame_count(); ++t) {
        std::vector<eval::Tracked> f;
        for (std::size_t b = 0; b < e.scene_c.bodies.size(); ++b)
            f.push_back({e.scene_c.bodies[b].visual_id, e.traj_cd.frames[t][b].position});
        out.push_back(std::move(f));
    }
    return out;
}

void check_finite(const EvalRow& r) {
    if (!std::isfinite(r.kp_mse) || (r.pixels && !std::isfinite(r.psnr)))
        throw NumericError("eval: non-finite metric for " + r.id);
}

} // namespace

void cmd_eval(const RunConfig& cfg) {
    if (cfg.paths.cody.empty()) throw PrereqError("eval: needs a cody checkpoint (--cody)");
    const CodySidecar side = read_cody_sidecar(cfg.paths.cody);
    std::unique_ptr<derender::Derenderer> encoder;
    if (side.source == "derender") encoder = load_derenderer(cfg.paths.derender);
    const auto model = load_cody(cfg.paths.cody, side);
    const auto ds = need_dataset(cfg, "eval");
    const auto test = split(ds, io::Split::test);
    if (test.empty()) throw PrereqError("eval: dataset has no test experiments");
    const fs::path out = out_dir(cfg);
    const int oracle_c = side.width - 3;
    const bool gated = encoder ? encoder->config().use_coefficients : true;
    const int size = encoder ? encoder->config().frame_size : 0;
    const render::Frame bg = encoder ? render::background(size, size) : render::Frame{};

    std::vector<EvalRow> rows(test.size());
    parallel_for(test.size(), cfg.effective_workers(), [&](std::size_t i) {
        nn::NoGradGuard ng;
        const auto& e = test[i];
        EvalRow& r = rows[i];
        r.id = e.id;
        r.kind = e.do_op.kind;
        r.magnitude = do_magnitude(e.do_op);
        if (!encoder) {
            const auto ep = cody::oracle_episode(e, side.keypoints, oracle_c);
            r.kp_mse = cody::sequence_mse(model->predict(ep.obs, static_cast<int>(ep.cd.size())), ep.cd);
            r.copy_kp = eval::copy_keypoint_mse(ep);
            r.audit = "ab:0-" + std::to_string(ep.obs.ab.size() - 1) + ",cd:0 (oracle states)";
        } else {
            const auto frames = cody::render_frames(e, size);
            const auto pred = cody::predict_cd(frames, *encoder, *model);
            for (const auto& t : pred.trace)
                if (t.rfind("ab:", 0) != 0 && t != "cd:0")
                    throw Error("eval: prediction for " + e.id + " read " + t);
            r.audit = compress_trace(pred.trace);
            const auto ep = cody::make_episode(e.id, derender::encode_trajectory(*encoder, frames.ab),
                                               derender::encode_trajectory(*encoder, frames.cd));
            r.kp_mse = cody::sequence_mse(cody::flatten_states(pred.states), ep.cd);
            r.copy_kp = eval::copy_keypoint_mse(ep);
            r.pixels = true;
            const std::span<const render::Frame> pf(pred.frames), gf(frames.cd);
            r.psnr = eval::psnr(pf.subspan(1), gf.subspan(1));
            try {
                r.l_psnr = eval::l_psnr(pf.subspan(1), gf.subspan(1), bg, cfg.bg_thresh);
            } catch (const UsageError&) {
                r.l_psnr = NAN;
            }
            r.copy_px = eval::copy_pixel_psnr(frames);
            r.mot = eval::mot_metrics(predicted_tracks(pred.states, gated), object_tracks(e), cfg.match_radius);
            if (static_cast<int>(i) < cfg.png) {
                const fs::path dir = out / "frames" / e.id;
                std::vector<render::Frame> sheet;
                for (std::size_t t = 0; t < pred.frames.size(); t += 5) {
                    sheet.push_back(frames.cd[t]);
                    sheet.push_back(pred.frames[t]);
                }
                fs::create_directories(dir / "pred");
                render::write_png(dir / "gt_vs_pred.png", render::contact_sheet(sheet, 2));
                for (std::size_t t = 0; t < pred.frames.size(); ++t) {
                    char name[32];
                    std::snprintf(name, sizeof name, "%04zu.png", t);
                    render::write_png(dir / "pred" / name, pred.frames[t]);
                }
                derender::write_state_csv(dir / "pred_states.csv", derender::with_derivatives(pred.states));
            }
        }
        check_finite(r);
    });

    const bool px = encoder != nullptr;
    std::string csv = csv_banner(cfg) + "id,do_kind,magnitude,kp_mse,copy_b_mse,copy_c_mse";
    if (px) csv += ",psnr,l_psnr,copy_b_psnr,copy_c_psnr,mota,motp";
    csv += "\n";
    std::string audit = "# inputs read by the predictor per test experiment\n";
    double kp = 0, cb = 0, cc = 0, ps = 0, lp = 0, pb = 0, pc = 0;
    std::size_t lp_n = 0;
    eval::MotResult mot;
    for (const auto& r : rows) {
        csv += r.id + "," + bench::to_string(r.kind) + "," + num(r.magnitude) + "," + num(r.kp_mse) + "," +
               num(r.copy_kp.copy_b) + "," + num(r.copy_kp.copy_c);
        if (px)
            csv += "," + num(r.psnr) + "," + num(r.l_psnr) + "," + num(r.copy_px.copy_b) + "," +
                   num(r.copy_px.copy_c) + "," + num(r.mot.mota) + "," + num(r.mot.motp);
        csv += "\n";
        audit += r.id + " " + r.audit + "\n";
        kp += r.kp_mse;
        cb += r.copy_kp.copy_b;
        cc += r.copy_kp.copy_c;
        ps += r.psnr;
        pb += r.copy_px.copy_b;
        pc += r.copy_px.copy_c;
        if (std::isfinite(r.l_psnr)) {
            lp += r.l_psnr;
            ++lp_n;
        }
        mot.misses += r.mot.misses;
        mot.false_positives += r.mot.false_positives;
        mot.swaps += r.mot.swaps;
        mot.matches += r.mot.matches;
        mot.ground_truth += r.mot.ground_truth;
        mot.matched_distance += r.mot.matched_distance;
    }
    io::write_text(out / "report.csv", csv);
    io::write_text(out / "audit.log", audit);

    const double n = static_cast<double>(rows.size());
    ordered_json summary = stamp(cfg);
    summary["keypoint_source"] = side.source;
    summary["test_experiments"] = rows.size();
    summary["kp_mse"] = kp / n;
    summary["copy_b_mse"] = cb / n;
    summary["copy_c_mse"] = cc / n;
    say("eval over %zu test experiments\n", rows.size());
    say("  keypoint MSE  cody %.6f  copy B %.6f  copy C %.6f\n", kp / n, cb / n, cc / n);
    if (px) {
        summary["psnr"] = ps / n;
        summary["l_psnr"] = lp_n ? json(lp / static_cast<double>(lp_n)) : json(nullptr);
        summary["copy_b_psnr"] = pb / n;
        summary["copy_c_psnr"] = pc / n;
        const double g = static_cast<double>(mot.ground_truth);
        summary["mota"] =
            g > 0 ? 1.0 - static_cast<double>(mot.misses + mot.false_positives + mot.swaps) / g : 1.0;
        summary["motp"] = mot.matches ? mot.matched_distance / static_cast<double>(mot.matches) : 0.0;
        summary["match_radius"] = cfg.match_radius;
        say("  PSNR  cody %.2f  copy B %.2f  copy C %.2f dB\n", ps / n, pb / n, pc / n);
        say("  MOTA %.3f  MOTP %.4f\n", summary["mota"].get<double>(), summary["motp"].get<double>());
    }
    write_config(out, cfg);
    write_json(out / "summary.json", summary);
}

// ---------------------------------------------------------------- render-sweep

void cmd_render_sweep(const RunConfig& cfg, const SweepArgs& args) {
    const auto enc = load_derenderer(cfg.paths.derender);
    const auto ds = need_dataset(cfg, "render-sweep");
    const auto test = split(ds, io::Split::test);
    if (args.index >= test.size())
        throw UsageError("render-sweep: --index " + std::to_string(args.index) + " out of range (test split has " +
                         std::to_string(test.size()) + ")");
    const auto& dc = enc->config();
    if (args.keypoint >= static_cast<std::size_t>(dc.keypoints)) throw UsageError("render-sweep: --kp out of range");
    if (args.component >= static_cast<std::size_t>(2 + dc.coefficient_width()))
        throw UsageError("render-sweep: --component out of range");
    if (args.steps < 2) throw UsageError("render-sweep: --steps must be >= 2");

    nn::NoGradGuard ng;
    const auto frame = derender::cd_frame(test[args.index], 0, dc.frame_size);
    const auto src = enc->encode(frame);
    std::vector<double> grid;
    for (int i = 0; i < args.steps; ++i) grid.push_back(args.lo + (args.hi - args.lo) * i / (args.steps - 1));
    const auto frames = render::latent_sweep(src.state, args.keypoint, args.component, grid,
                                             [&](const render::KeypointState& s) { return enc->decode(src.features, s); });
    const fs::path out = out_dir(cfg);
    const std::string name =
        "sweep_kp" + std::to_string(args.keypoint) + "_c" + std::to_string(args.component) + ".png";
    render::write_png(out / name, render::contact_sheet(frames, args.steps));
    render::write_png(out / "sweep_source.png", frame);
    write_config(out, cfg);
    std::cout << "wrote " << (out / name).string() << "\n";
}

// ---------------------------------------------------------------- report

void cmd_report(const RunConfig& cfg, const std::vector<std::string>& inputs) {
    if (inputs.empty()) throw UsageError("report: give at least one output directory");
    std::string md = "# cfphys report\n\nversion " + std::string(version()) + "\n";
    for (const auto& dir : inputs) {
        if (!fs::is_directory(dir)) throw PrereqError("report: missing directory " + dir);
        std::vector<fs::path> files;
        for (const auto& f : fs::directory_iterator(dir))
            if (f.path().extension() == ".json" && f.path().stem().string().ends_with("summary"))
                files.push_back(f.path());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw PrereqError("report: no summary files in " + dir);
        for (const auto& f : files) {
            md += "\n## " + dir + "/" + f.filename().string() + "\n\n| key | value |\n|---|---|\n";
            const json j = read_json(f);
            for (const auto& [k, v] : j.items())
                if (!v.is_structured()) md += "| " + k + " | " + v.dump() + " |\n";
        }
    }
    const fs::path out = out_dir(cfg);
    io::write_text(out / "report.md", md);
    std::cout << md;
}

} // namespace cfphys::app
