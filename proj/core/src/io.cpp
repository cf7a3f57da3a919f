// SPDX-License-Identifier: Apache-2.0
#include "cfphys/io.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cfphys/error.hpp"
#include "cfphys/render.hpp"

namespace cfphys::io {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json body_json(const sim::Body& b) {
    return {{"x", b.position.x}, {"y", b.position.y}, {"vx", b.velocity.x}, {"vy", b.velocity.y},
            {"radius", b.radius}, {"mass", b.mass}, {"visual_id", b.visual_id}};
}

sim::Body body_from(const json& j) {
    sim::Body b;
    b.position = {j.at("x").get<double>(), j.at("y").get<double>()};
    b.velocity = {j.at("vx").get<double>(), j.at("vy").get<double>()};
    b.radius = j.at("radius").get<double>();
    b.mass = j.at("mass").get<double>();
    b.visual_id = j.at("visual_id").get<int>();
    return b;
}

json scene_json(const sim::Scene& s) {
    json bodies = json::array();
    for (const auto& b : s.bodies) bodies.push_back(body_json(b));
    return {{"bodies", bodies},
            {"bounds", {s.bounds.xmin, s.bounds.ymin, s.bounds.xmax, s.bounds.ymax}},
            {"gravity", {s.gravity.x, s.gravity.y}},
            {"walls", s.walls}};
}

sim::Scene scene_from(const json& j) {
    sim::Scene s;
    for (const auto& b : j.at("bodies")) s.bodies.push_back(body_from(b));
    const auto& bd = j.at("bounds");
    s.bounds = {bd.at(0).get<double>(), bd.at(1).get<double>(), bd.at(2).get<double>(), bd.at(3).get<double>()};
    s.gravity = {j.at("gravity").at(0).get<double>(), j.at("gravity").at(1).get<double>()};
    s.walls = j.at("walls").get<bool>();
    return s;
}

json config_json(const bench::ScenarioConfig& c) {
    return {{"scenario", bench::to_string(c.scenario)},
            {"n_objects", c.n_objects},
            {"duration", c.duration},
            {"fps", c.fps},
            {"radius_min", c.radius_min},
            {"radius_max", c.radius_max},
            {"speed_min", c.speed_min},
            {"speed_max", c.speed_max},
            {"shift_min", c.shift_min},
            {"shift_max", c.shift_max},
            {"max_do_trials", c.max_do_trials},
            {"max_placement_tries", c.max_placement_tries},
            {"max_scene_tries", c.max_scene_tries},
            {"require_contacts", c.require_contacts},
            {"mass_alphabet", c.mass_alphabet}};
}

bench::ScenarioConfig config_from(const json& j) {
    bench::ScenarioConfig c;
    c.scenario = bench::scenario_from_string(j.at("scenario").get<std::string>());
    c.n_objects = j.at("n_objects").get<int>();
    c.duration = j.at("duration").get<double>();
    c.fps = j.at("fps").get<double>();
    c.radius_min = j.at("radius_min").get<double>();
    c.radius_max = j.at("radius_max").get<double>();
    c.speed_min = j.at("speed_min").get<double>();
    c.speed_max = j.at("speed_max").get<double>();
    c.shift_min = j.at("shift_min").get<double>();
    c.shift_max = j.at("shift_max").get<double>();
    c.max_do_trials = j.at("max_do_trials").get<int>();
    c.max_placement_tries = j.at("max_placement_tries").get<int>();
    c.max_scene_tries = j.at("max_scene_tries").get<int>();
    c.require_contacts = j.at("require_contacts").get<bool>();
    c.mass_alphabet = j.at("mass_alphabet").get<std::vector<double>>();
    return c;
}

void write_trajectory(const fs::path& path, const sim::Trajectory& traj) {
    std::ostringstream os;
    sim::write_trajectory_csv(os, traj);
    write_text(path, os.str());
}

} // namespace

std::string to_string(Split s) {
    switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
    }
}

std::uint64_t fnv1a(std::string_view data) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

Split split_of(std::string_view id) {
    const auto bucket = fnv1a(id) % 10;
    return bucket < 8 ? Split::train : bucket == 8 ? Split::val : Split::test;
}

std::string sha256_hex(std::string_view data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw IoError("sha256: digest failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 15]);
    }
    return out;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PrereqError("cannot read " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_text(const fs::path& path, std::string_view text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw IoError("cannot write " + path.string());
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_text(path)); }

namespace {

json experiment_json(const bench::Experiment& e) {
    json vel = json::array();
    for (const auto& v : e.confounders.initial_velocities) vel.push_back({v.x, v.y});
    return {{"id", e.id},
            {"scenario", bench::to_string(e.scenario)},
            {"seed", e.seed},
            {"duration", e.duration},
            {"fps", e.fps},
            {"eps", e.eps},
            {"scene_a", scene_json(e.scene_a)},
            {"scene_c", scene_json(e.scene_c)},
            {"do_op",
             {{"kind", bench::to_string(e.do_op.kind)},
              {"target", e.do_op.target},
              {"delta", {e.do_op.delta.x, e.do_op.delta.y}}}},
            {"masses", e.confounders.masses},
            {"initial_velocities", vel},
            {"consequential", e.consequential},
            {"split", to_string(split_of(e.id))}};
}

bench::Experiment experiment_from(const json& j) {
    bench::Experiment e;
    e.id = j.at("id").get<std::string>();
    e.scenario = bench::scenario_from_string(j.at("scenario").get<std::string>());
    e.seed = j.at("seed").get<std::uint64_t>();
    e.duration = j.at("duration").get<double>();
    e.fps = j.at("fps").get<double>();
    e.eps = j.at("eps").get<double>();
    e.scene_a = scene_from(j.at("scene_a"));
    e.scene_c = scene_from(j.at("scene_c"));
    const auto& op = j.at("do_op");
    e.do_op.kind = bench::do_kind_from_string(op.at("kind").get<std::string>());
    e.do_op.target = op.at("target").get<std::size_t>();
    e.do_op.delta = {op.at("delta").at(0).get<double>(), op.at("delta").at(1).get<double>()};
    e.confounders.masses = j.at("masses").get<std::vector<double>>();
    for (const auto& v : j.at("initial_velocities"))
        e.confounders.initial_velocities.push_back({v.at(0).get<double>(), v.at(1).get<double>()});
    e.consequential = j.at("consequential").get<std::vector<std::size_t>>();
    return e;
}

void write_frames(const fs::path& dir, const sim::Scene& scene, const sim::Trajectory& traj, int size) {
    fs::create_directories(dir);
    const auto frames = render::rasterize_trajectory(scene, traj, size, size);
    char name[32];
    for (std::size_t t = 0; t < frames.size(); ++t) {
        std::snprintf(name, sizeof name, "%04zu.png", t);
        render::write_png(dir / name, frames[t]);
    }
}

} // namespace

std::string experiment_dir(const bench::Experiment& e) { return bench::to_string(e.scenario) + "/" + e.id; }

std::string export_dataset(const bench::Dataset& ds, const fs::path& root, const ExportOptions& opt) {
    std::vector<std::string> files;
    json ids = json::array();
    for (const auto& e : ds.experiments) {
        const std::string rel = experiment_dir(e);
        const fs::path dir = root / rel;
        fs::create_directories(dir);
        write_text(dir / "meta.json", experiment_json(e).dump(1) + "\n");
        write_trajectory(dir / "ab.csv", e.traj_ab);
        write_trajectory(dir / "cd.csv", e.traj_cd);
        files.insert(files.end(), {rel + "/meta.json", rel + "/ab.csv", rel + "/cd.csv"});
        if (opt.frame_size > 0) {
            write_frames(dir / "ab", e.scene_a, e.traj_ab, opt.frame_size);
            write_frames(dir / "cd", e.scene_c, e.traj_cd, opt.frame_size);
        }
        ids.push_back(rel);
    }
    std::sort(files.begin(), files.end());
    json entries = json::object();
    std::string lines;
    for (const auto& f : files) {
        const std::string h = sha256_file(root / f);
        entries[f] = h;
        lines += f + " " + h + "\n";
    }
    const std::string hash = sha256_hex(lines);
    const json manifest = {{"hash", hash},
                           {"config", config_json(ds.config)},
                           {"eps", ds.eps},
                           {"seed", ds.seed},
                           {"count", ds.experiments.size()},
                           {"attempts", ds.stats.attempts},
                           {"rejections", ds.stats.rejections},
                           {"cell_counts", ds.cell_counts},
                           {"experiments", ids},
                           {"files", entries}};
    write_text(root / "manifest.json", manifest.dump(1) + "\n");
    return hash;
}

std::string manifest_hash(const fs::path& root) {
    return json::parse(read_text(root / "manifest.json")).at("hash").get<std::string>();
}

bench::Dataset load_dataset(const fs::path& root) {
    if (!fs::exists(root / "manifest.json"))
        throw PrereqError("dataset not found: " + (root / "manifest.json").string());
    bench::Dataset ds;
    try {
        const json m = json::parse(read_text(root / "manifest.json"));
        ds.config = config_from(m.at("config"));
        ds.eps = m.at("eps").get<double>();
        ds.seed = m.at("seed").get<std::uint64_t>();
        ds.stats.attempts = m.at("attempts").get<std::size_t>();
        ds.stats.rejections = m.at("rejections").get<std::map<std::string, std::size_t>>();
        ds.cell_counts = m.at("cell_counts").get<std::vector<std::size_t>>();
        for (const auto& rel : m.at("experiments")) {
            const fs::path dir = root / rel.get<std::string>();
            auto e = experiment_from(json::parse(read_text(dir / "meta.json")));
            std::istringstream ab(read_text(dir / "ab.csv"));
            std::istringstream cd(read_text(dir / "cd.csv"));
            e.traj_ab = sim::read_trajectory_csv(ab, e.fps);
            e.traj_cd = sim::read_trajectory_csv(cd, e.fps);
            ds.experiments.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw IoError("dataset " + root.string() + ": " + e.what());
    }
    return ds;
}

} // namespace cfphys::io
