// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "app.hpp"
#include "cfphys/io.hpp"

using namespace cfphys;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path& root() {
    static const fs::path r = [] {
        const fs::path p = fs::temp_directory_path() / "cfphys_cli_test";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return r;
}

std::string at(const std::string& name) { return (root() / name).string(); }

int cli(std::vector<std::string> args) { return app::run(args); }

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

std::vector<std::pair<long, double>> losses(const fs::path& p) {
    std::vector<std::pair<long, double>> out;
    std::istringstream in(slurp(p));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#' || line[0] == 's') continue;
        const auto c = line.find(',');
        out.emplace_back(std::stol(line.substr(0, c)), std::stod(line.substr(c + 1)));
    }
    return out;
}

// Small models so every stage runs in well under a second.
const std::string& tiny_config() {
    static const std::string path = [] {
        const std::string p = at("tiny.json");
        std::ofstream(p) << R"({
  "derender": {"frame_size": 16, "feature_size": 8, "width1": 4, "width2": 6, "refine_width": 6,
               "steps": 12, "batch": 2},
  "cody": {"d_u": 4, "d_sigma": 8, "gn_hidden": [8], "gru_hidden": 8, "steps": 6, "batch": 2, "lr": 0.001},
  "study": {"eps_grid": [0.001, 30, 100000], "sweep_samples": 6,
            "fps": {"fps_grid": [5], "train_scenes": 4, "test_scenes": 2, "steps": 3, "hidden": 4}}
})";
        return p;
    }();
    return path;
}

// Shared dataset: generated once.
const std::string& dataset() {
    static const std::string d = [] {
        const std::string p = at("data");
        EXPECT_EQ(cli({"gen", "--scenario", "balls", "--n", "24", "--seed", "7", "-o", p}), 0);
        return p;
    }();
    return d;
}

} // namespace

TEST(CliGen, SameSeedSameManifestHash) {
    const std::string d2 = at("data_again");
    ASSERT_EQ(cli({"gen", "--scenario", "balls", "--n", "24", "--seed", "7", "--workers", "1", "-o", d2}), 0);
    EXPECT_EQ(io::manifest_hash(dataset()), io::manifest_hash(d2));
    EXPECT_EQ(slurp(fs::path(dataset()) / "manifest.json"), slurp(fs::path(d2) / "manifest.json"));
}

TEST(CliGen, SummaryHistogramAndBalance) {
    const json s = read_json(fs::path(dataset()) / "summary.json");
    const std::set<std::string> allowed{"identifiability", "counterfactuality", "no-valid-do-op"};
    for (const auto& [k, v] : s.at("rejections").items()) EXPECT_TRUE(allowed.contains(k)) << k;
    const auto cells = s.at("cell_counts").get<std::vector<std::size_t>>();
    const auto [lo, hi] = std::minmax_element(cells.begin(), cells.end());
    EXPECT_LE(*hi - *lo, 1u);
    EXPECT_EQ(s.at("experiments").get<int>(), 24);
    EXPECT_EQ(s.at("config_hash"), read_json(fs::path(dataset()) / "config.json").at("config_hash"));
}

TEST(CliErrors, ExitCodes) {
    EXPECT_EQ(cli({"study", "nonsense", "-o", at("x")}), app::kExitUsage);
    EXPECT_EQ(cli({"gen", "--no-such-flag"}), app::kExitUsage);
    EXPECT_EQ(cli({}), app::kExitUsage);
    EXPECT_EQ(cli({"gen", "--n-objects", "9", "-o", at("x")}), app::kExitUsage);
    EXPECT_EQ(cli({"eval", "--data", dataset(), "-o", at("x")}), app::kExitPrereq);
    EXPECT_EQ(cli({"train", "derender", "--data", at("missing"), "-o", at("x")}), app::kExitPrereq);
    EXPECT_EQ(cli({"--version"}), app::kExitOk);
}

TEST(CliConfig, UnknownKeyIsUsageError) {
    const std::string p = at("bad.json");
    std::ofstream(p) << R"({"cody": {"d_sigmaa": 3}})";
    EXPECT_EQ(cli({"gen", "-c", p, "-o", at("x")}), app::kExitUsage);
}

TEST(CliTrain, CodyRefusedWithoutKeypointSource) {
    const std::string out = at("gate");
    EXPECT_EQ(cli({"train", "cody", "-c", tiny_config(), "--data", dataset(), "-o", out}), app::kExitPrereq);
    EXPECT_FALSE(fs::exists(fs::path(out) / "cody.ckpt"));
}

TEST(CliTrain, ResumeContinuesLossCurve) {
    const std::string out = at("resume");
    ASSERT_EQ(cli({"train", "derender", "-c", tiny_config(), "--data", dataset(), "-o", out}), 0);
    ASSERT_EQ(cli({"train", "derender", "-c", tiny_config(), "--data", dataset(), "-o", out, "--resume",
                   out + "/derender.ckpt"}),
              0);
    const auto l = losses(fs::path(out) / "derender_losses.csv");
    ASSERT_EQ(l.size(), 24u);
    for (std::size_t i = 0; i < l.size(); ++i) EXPECT_EQ(l[i].first, static_cast<long>(i));
    EXPECT_LT(l[12].second, 10.0 * l[11].second);
    EXPECT_EQ(read_json(fs::path(out) / "derender.ckpt.json").at("steps_total").get<int>(), 24);
}

TEST(CliTrain, DeterministicArtifacts) {
    for (const std::string stage : {"derender", "cody"}) {
        std::vector<std::string> extra;
        if (stage == "cody") extra.push_back("--oracle-keypoints");
        std::string outs[2] = {at("det_a_" + stage), at("det_b_" + stage)};
        for (const auto& o : outs) {
            std::vector<std::string> args{"train", stage, "-c", tiny_config(), "--data", dataset(), "-o", o};
            args.insert(args.end(), extra.begin(), extra.end());
            ASSERT_EQ(cli(args), 0);
        }
        for (const std::string f : {".ckpt", ".ckpt.json", "_losses.csv", "_summary.json"})
            EXPECT_EQ(slurp(fs::path(outs[0]) / (stage + f)), slurp(fs::path(outs[1]) / (stage + f))) << stage << f;
    }
}

TEST(CliEval, OracleReportAndAudit) {
    const std::string m = at("oracle_model"), out = at("oracle_eval");
    ASSERT_EQ(cli({"train", "cody", "-c", tiny_config(), "--data", dataset(), "--oracle-keypoints", "-o", m}), 0);
    ASSERT_EQ(cli({"eval", "-c", tiny_config(), "--data", dataset(), "--cody", m + "/cody.ckpt", "-o", out}), 0);
    const auto ds = io::load_dataset(dataset());
    std::size_t n_test = 0;
    for (const auto& e : ds.experiments) n_test += io::split_of(e.id) == io::Split::test;
    const json s = read_json(fs::path(out) / "summary.json");
    EXPECT_EQ(s.at("test_experiments").get<std::size_t>(), n_test);
    EXPECT_TRUE(s.contains("copy_b_mse"));
    EXPECT_TRUE(s.contains("copy_c_mse"));
    std::istringstream rep(slurp(fs::path(out) / "report.csv"));
    std::string line;
    std::size_t rows = 0;
    while (std::getline(rep, line))
        if (!line.empty() && line[0] != '#') ++rows;
    EXPECT_EQ(rows, n_test + 1);
}

TEST(CliEval, PixelPipelineAuditAndDoop) {
    const std::string m = at("pix_model"), out = at("pix_eval");
    ASSERT_EQ(cli({"train", "derender", "-c", tiny_config(), "--data", dataset(), "-o", m}), 0);
    ASSERT_EQ(cli({"train", "cody", "-c", tiny_config(), "--data", dataset(), "--derender", m + "/derender.ckpt",
                   "-o", m}),
              0);
    // A derender-trained model needs its encoder at eval time.
    EXPECT_EQ(cli({"eval", "-c", tiny_config(), "--data", dataset(), "--cody", m + "/cody.ckpt", "-o", out}),
              app::kExitPrereq);
    ASSERT_EQ(cli({"eval", "-c", tiny_config(), "--data", dataset(), "--cody", m + "/cody.ckpt", "--derender",
                   m + "/derender.ckpt", "--png", "1", "-o", out}),
              0);
    std::istringstream audit(slurp(fs::path(out) / "audit.log"));
    std::string line;
    std::size_t entries = 0;
    while (std::getline(audit, line)) {
        if (line.empty() || line[0] == '#') continue;
        ++entries;
        EXPECT_NE(line.find(",cd:0"), std::string::npos);
        EXPECT_EQ(line.find("cd:1"), std::string::npos) << line;
    }
    EXPECT_GT(entries, 0u);
    const json s = read_json(fs::path(out) / "summary.json");
    for (const char* k : {"psnr", "copy_b_psnr", "copy_c_psnr", "mota", "motp"}) EXPECT_TRUE(s.contains(k)) << k;
    ASSERT_EQ(cli({"study", "doop", "-c", tiny_config(), "--report", out + "/report.csv", "-o", out}), 0);
    EXPECT_TRUE(fs::exists(fs::path(out) / "doop.csv"));
    ASSERT_EQ(cli({"render-sweep", "-c", tiny_config(), "--data", dataset(), "--derender", m + "/derender.ckpt",
                   "--kp", "0", "--component", "0", "-o", out}),
              0);
    EXPECT_TRUE(fs::exists(fs::path(out) / "sweep_kp0_c0.png"));
    EXPECT_EQ(cli({"report", out, "-o", out}), 0);
    EXPECT_TRUE(fs::exists(fs::path(out) / "report.md"));
}

TEST(CliStudy, SweepRowsFpsBaseRowAndHash) {
    const std::string out = at("study");
    ASSERT_EQ(cli({"study", "eps-sweep", "-c", tiny_config(), "-o", out}), 0);
    ASSERT_EQ(cli({"study", "fps", "-c", tiny_config(), "-o", out}), 0);
    auto data_rows = [](const fs::path& p) {
        std::vector<std::string> rows;
        std::istringstream in(slurp(p));
        std::string line;
        while (std::getline(in, line))
            if (!line.empty() && line[0] != '#') rows.push_back(line);
        return rows;
    };
    const auto sweep = data_rows(fs::path(out) / "eps_sweep.csv");
    EXPECT_EQ(sweep.size(), 1u + 3u);
    const auto fps = data_rows(fs::path(out) / "fps.csv");
    ASSERT_EQ(fps.size(), 1u + 2u);
    EXPECT_EQ(fps[1].rfind("25,", 0), 0u);
    const std::string hash = read_json(fs::path(out) / "config.json").at("config_hash");
    EXPECT_NE(slurp(fs::path(out) / "fps.csv").find(hash), std::string::npos);
    EXPECT_EQ(read_json(fs::path(out) / "eps-sweep_summary.json").at("config_hash"), hash);
}
