// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per criterion.
//   cfphys_acceptance            all criteria
//   cfphys_acceptance --only 5   a single criterion
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "app.hpp"
#include "cfphys/benchgen.hpp"
#include "cfphys/cody.hpp"
#include "cfphys/derender.hpp"
#include "cfphys/eval.hpp"
#include "cfphys/io.hpp"
#include "cfphys/nn.hpp"
#include "filter_oracle.hpp"
#include "gradcheck.hpp"
#include "scene_gen.hpp"

using namespace cfphys;
namespace fs = std::filesystem;
using nn::Tensor;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

int pick(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

bool majority(const std::vector<bool>& v) { return 2 * std::count(v.begin(), v.end(), true) > static_cast<long>(v.size()); }

const std::vector<std::uint64_t> kSeeds{1, 2, 3};

// ------------------------------------------------------------------ 1

Outcome physics_oracle() {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int> coin(0, 1);
    double worst_p = 0.0, worst_e = 0.0;
    int collided = 0;
    for (int i = 0; i < 1000; ++i) {
        sim::Scene s = testkit::random_colliding_pair(rng);
        for (auto& b : s.bodies) b.mass = coin(rng) ? 10.0 : 1.0;
        std::vector<sim::Contact> contacts;
        const sim::Scene out = sim::step(s, 1.0, &contacts);
        collided += !contacts.empty();
        const sim::Vec2 p0 = sim::total_momentum(s.bodies), p1 = sim::total_momentum(out.bodies);
        const double e0 = sim::total_kinetic_energy(s.bodies), e1 = sim::total_kinetic_energy(out.bodies);
        worst_p = std::max(worst_p, (p1 - p0).norm() / std::max(p0.norm(), 1e-3));
        worst_e = std::max(worst_e, std::abs(e1 - e0) / e0);
    }
    sim::Scene head;
    head.walls = false;
    head.bodies = {sim::Body{{0.3, 0.5}, {1.0, 0.0}, 0.05, 10.0, 0}, sim::Body{{0.7, 0.5}, {0.0, 0.0}, 0.05, 1.0, 1}};
    const sim::Scene h = sim::step(head, 0.5);
    const double d1 = std::abs(h.bodies[0].velocity.x - 9.0 / 11.0);
    const double d2 = std::abs(h.bodies[1].velocity.x - 20.0 / 11.0);
    const bool pass = collided == 1000 && worst_p <= 1e-9 && worst_e <= 1e-6 && d1 <= 1e-12 && d2 <= 1e-12;
    return {pass, fmt("%d/1000 collided, momentum %.2e (<=1e-9), energy %.2e (<=1e-6), 1D |dv| %.1e %.1e (<=1e-12)",
                      collided, worst_p, worst_e, d1, d2)};
}

// ------------------------------------------------------------------ 2

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;
using Make = std::function<std::vector<Tensor>(std::mt19937_64&)>;

Outcome gradient_checks() {
    struct Case {
        std::string name;
        Fn f;
        Make make;
    };
    std::vector<Case> cases;
    cases.push_back({"dense", [](const auto& in) { return nn::linear(in[0], in[1], in[2]); }, [](auto& rng) {
                         const int n = pick(rng, 1, 4), k = pick(rng, 1, 5), m = pick(rng, 1, 4);
                         return std::vector<Tensor>{testkit::random_tensor(rng, {n, k}), testkit::random_tensor(rng, {k, m}),
                                                    testkit::random_tensor(rng, {m})};
                     }});
    cases.push_back({"spatial_softargmax", [](const auto& in) { return nn::spatial_softargmax(in[0], 3, 4); },
                     [](auto& rng) { return std::vector<Tensor>{testkit::random_tensor(rng, {pick(rng, 1, 3), 12}, -3, 3)}; }});
    cases.push_back({"gaussian_maps", [](const auto& in) { return nn::gaussian_maps(in[0], 5, 6, 0.3); },
                     [](auto& rng) { return std::vector<Tensor>{testkit::random_tensor(rng, {pick(rng, 1, 3), 2}, 0, 1)}; }});
    cases.push_back({"mse", [](const auto& in) { return nn::mse(in[0], in[1]); }, [](auto& rng) {
                         const nn::Shape s{pick(rng, 1, 4), pick(rng, 1, 5)};
                         return std::vector<Tensor>{testkit::random_tensor(rng, s), testkit::random_tensor(rng, s)};
                     }});
    cases.push_back({"bce_with_logits",
                     [](const auto& in) {
                         Tensor t = Tensor::zeros(in[0].shape());
                         for (std::size_t i = 0; i < t.size(); i += 2) t.data()[i] = 1.0;
                         return nn::bce_with_logits(in[0], t);
                     },
                     [](auto& rng) {
                         return std::vector<Tensor>{testkit::random_tensor(rng, {pick(rng, 1, 4), pick(rng, 1, 5)}, -4, 4)};
                     }});
    cases.push_back({"reconstruction_loss",
                     [](const auto& in) { return derender::reconstruction_loss(in[0], in[1], 3.0, 0.5); },
                     [](auto& rng) {
                         const nn::Shape s{1, 3, pick(rng, 2, 5), pick(rng, 2, 5)};
                         return std::vector<Tensor>{testkit::random_tensor(rng, s, 0, 1), testkit::random_tensor(rng, s, 0, 1)};
                     }});

    std::vector<std::string> report;
    double worst_all = 0.0;
    auto run = [&](const std::string& name, const std::function<testkit::GradReport(int, std::mt19937_64&)>& one) {
        std::mt19937_64 rng(std::hash<std::string>{}(name) & 0xFFFF);
        double worst = 0.0;
        for (int i = 0; i < 20; ++i) worst = std::max(worst, one(i, rng).worst);
        worst_all = std::max(worst_all, worst);
        report.push_back(fmt("%s %.1e", name.c_str(), worst));
    };
    for (const auto& c : cases) {
        run(c.name, [&](int, std::mt19937_64& rng) { return testkit::gradcheck(c.f, c.make(rng), rng); });
    }
    run("conv2d", [](int i, std::mt19937_64& rng) {
        const int stride = pick(rng, 1, 2), pad = pick(rng, 0, 1), k = pick(rng, 1, 3);
        const bool bias = i % 3 != 0;
        const int C = pick(rng, 1, 3), O = pick(rng, 1, 3);
        const Fn f = [=](const auto& in) { return nn::conv2d(in[0], in[1], bias ? in[2] : Tensor{}, stride, pad); };
        return testkit::gradcheck(f,
                                  {testkit::random_tensor(rng, {pick(rng, 1, 2), C, pick(rng, k, 6), pick(rng, k, 6)}),
                                   testkit::random_tensor(rng, {O, C, k, k}), testkit::random_tensor(rng, {O})},
                                  rng);
    });
    // Module parameters are checked too: they are passed in as inputs and
    // share storage with the module.
    run("gru", [](int i, std::mt19937_64& rng) {
        nn::ParamStore ps(static_cast<std::uint64_t>(i) + 1);
        const int in = pick(rng, 1, 3), h = pick(rng, 1, 4), n = pick(rng, 1, 3);
        nn::Gru gru(ps, "g", in, h, 2);
        std::vector<Tensor> inputs{testkit::random_tensor(rng, {n, in}), testkit::random_tensor(rng, {n, in})};
        for (const auto& name : ps.names()) inputs.push_back(ps.get(name));
        const Fn f = [&](const auto& x) {
            auto state = gru.zero_state(n);
            gru.step(x[0], state);
            return gru.step(x[1], state);
        };
        return testkit::gradcheck(f, inputs, rng);
    });
    run("graph_net", [](int i, std::mt19937_64& rng) {
        nn::ParamStore ps(static_cast<std::uint64_t>(i) + 100);
        const int k = 1 + i % 4, d = pick(rng, 1, 3);
        nn::GraphNet gn(ps, "gn", d, 2, {4});
        std::vector<Tensor> inputs{testkit::random_tensor(rng, {2 * k, d})};
        for (const auto& name : ps.names()) inputs.push_back(ps.get(name));
        return testkit::gradcheck([&](const auto& x) { return nn::tanh(gn(x[0], k)); }, inputs, rng);
    });
    run("cody_loss", [](int i, std::mt19937_64& rng) {
        cody::CodyConfig c;
        c.d_u = 3;
        c.d_sigma = 4;
        c.gn_hidden = {4};
        c.gru_hidden = 3;
        c.seed = static_cast<std::uint64_t>(i) + 7;
        cody::Cody m(c, 2, 3);
        std::uniform_real_distribution<double> u(-0.5, 0.5);
        for (const auto& name : m.params().names())
            if (name.rfind("dyn.head", 0) == 0)
                for (double& v : m.params().get(name).data()) v = u(rng);
        cody::Batch b;
        for (int t = 0; t < 3; ++t) {
            b.ab.push_back(testkit::random_tensor(rng, {2, 6}, 0, 1, false));
            b.cd.push_back(testkit::random_tensor(rng, {2, 3}, 0, 1, false));
        }
        std::vector<Tensor> inputs{testkit::random_tensor(rng, {2, 3}, 0, 1), testkit::random_tensor(rng, {2, 6}, 0, 1)};
        return testkit::gradcheck(
            [&](const auto& x) {
                cody::Batch bb = b;
                bb.c = x[0];
                bb.ab[1] = x[1];
                return cody::cody_loss(m, bb, 3);
            },
            inputs, rng);
    });
    std::string detail = fmt("worst rel err %.1e (<1e-4), 20 instances each:", worst_all);
    for (const auto& r : report) detail += " " + r;
    return {worst_all < 1e-4, detail};
}

// ------------------------------------------------------------------ 3

Outcome filter_soundness() {
    bench::ScenarioConfig cfg;
    const auto ds = bench::generate_dataset(cfg, 30.0, 200, 11);
    std::size_t violations = 0, bad_witness = 0, not_cf = 0;
    for (const auto& e : ds.experiments) {
        const auto v = testkit::brute_force_check(e, cfg.mass_alphabet);
        violations += v.violations;
        bad_witness += !v.witnesses_ok;
        not_cf += !v.counterfactual;
    }
    return {ds.experiments.size() == 200 && violations == 0 && bad_witness == 0 && not_cf == 0,
            fmt("%zu experiments: %zu identifiability violations, %zu unconfirmed witnesses, %zu without witness",
                ds.experiments.size(), violations, bad_witness, not_cf)};
}

// ------------------------------------------------------------------ 4

Outcome threshold_sweep() {
    bench::ScenarioConfig cfg;
    const std::vector<double> grid{1e-4, 1e-2, 1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1e3, 1e5};
    const auto rows = bench::threshold_sweep(cfg, grid, 500, 4);
    const auto peak = std::max_element(rows.begin(), rows.end(),
                                       [](const auto& a, const auto& b) { return a.rejection_pct < b.rejection_pct; });
    const double lo = rows.front().rejection_pct, hi = rows.back().rejection_pct;
    const bool interior = peak != rows.begin() && peak != rows.end() - 1;
    std::string curve;
    for (const auto& r : rows) curve += fmt(" %g:%.1f", r.eps, r.rejection_pct);
    return {lo <= 1.0 && hi <= 1.0 && interior && peak->rejection_pct >= 5.0,
            fmt("500 candidates; ends %.1f%% / %.1f%% (<=1%%), peak %.1f%% at eps %g (interior, >=5%%);", lo, hi,
                peak->rejection_pct, peak->eps) +
                curve};
}

// ------------------------------------------------------------------ 5

Outcome confounder_probe() {
    std::vector<bool> ok;
    std::string detail;
    for (auto seed : kSeeds) {
        bench::ScenarioConfig cfg;
        const auto filtered = bench::generate_dataset(cfg, 30.0, 600, seed);
        bench::ScenarioConfig ucfg = cfg;
        ucfg.require_contacts = false;
        const auto unfiltered = bench::generate_dataset(ucfg, 30.0, 600, seed, {false, false});
        eval::ProbeConfig pc;
        pc.seed = seed;
        const auto r = eval::confounder_probe(filtered.experiments, unfiltered.experiments, pc);
        const double gap = r.filtered.accuracy - r.unfiltered.accuracy;
        const bool pass = gap >= 0.05 && r.filtered.corrected_accuracy >= r.filtered.accuracy;
        ok.push_back(pass);
        detail += fmt(" [seed %llu: filtered %.3f unfiltered %.3f gap %+.3f corrected %.3f %s]",
                      static_cast<unsigned long long>(seed), r.filtered.accuracy, r.unfiltered.accuracy, gap,
                      r.filtered.corrected_accuracy, pass ? "ok" : "no");
    }
    return {majority(ok), "gap >= 0.05 and corrected >= accuracy, majority of 3 seeds:" + detail};
}

// ------------------------------------------------------------------ 6

Outcome fps_resolution() {
    std::vector<bool> ok;
    std::string detail;
    for (auto seed : kSeeds) {
        eval::FpsStudyConfig cfg;
        cfg.seed = seed;
        cfg.fps_grid = {25, 5};
        const auto rows = eval::fps_study(cfg);
        const double m25 = rows[0].mse, m5 = rows[1].mse;
        ok.push_back(m25 < m5);
        detail += fmt(" [seed %llu: 25fps %.5f 5fps %.5f %s]", static_cast<unsigned long long>(seed), m25, m5,
                      m25 < m5 ? "ok" : "no");
    }
    return {majority(ok), "final-frame MSE at 25 fps < 5 fps, majority of 3 seeds:" + detail};
}

// ------------------------------------------------------------------ 7, 8

cody::CodyConfig desk_cody(std::uint64_t seed, bool encoder) {
    cody::CodyConfig c;
    c.d_u = 16;
    c.d_sigma = 32;
    c.gn_hidden = {32, 32};
    c.gru_hidden = 32;
    c.lr = 1e-3;
    c.steps = 2000;
    c.use_encoder = encoder;
    c.seed = seed;
    return c;
}

struct CodyRun {
    double with_encoder = 0.0, without_encoder = 0.0, copy_b = 0.0, copy_c = 0.0;
};

std::vector<CodyRun>& cody_runs() {
    static std::vector<CodyRun> runs = [] {
        std::vector<CodyRun> out;
        for (auto seed : kSeeds) {
            bench::ScenarioConfig cfg;
            const auto ds = bench::generate_dataset(cfg, 30.0, 200, seed, {}, 1);
            std::vector<cody::Episode> train, test;
            for (const auto& e : ds.experiments)
                (io::split_of(e.id) == io::Split::train ? train : test).push_back(cody::oracle_episode(e, 3, 5));
            CodyRun r;
            for (const auto& e : test) {
                const auto s = eval::copy_keypoint_mse(e);
                r.copy_b += s.copy_b / static_cast<double>(test.size());
                r.copy_c += s.copy_c / static_cast<double>(test.size());
            }
            for (bool enc : {true, false}) {
                cody::Cody m(desk_cody(seed, enc), 3, 8);
                cody::train_cody(m, train);
                (enc ? r.with_encoder : r.without_encoder) = cody::keypoint_mse(m, test);
            }
            out.push_back(r);
        }
        return out;
    }();
    return runs;
}

Outcome cody_vs_copy() {
    std::vector<bool> ok;
    std::string detail;
    for (std::size_t i = 0; i < kSeeds.size(); ++i) {
        const auto& r = cody_runs()[i];
        const bool pass = r.with_encoder < std::min(r.copy_b, r.copy_c);
        ok.push_back(pass);
        detail += fmt(" [seed %llu: cody %.5f copyB %.5f copyC %.5f %s]", static_cast<unsigned long long>(kSeeds[i]),
                      r.with_encoder, r.copy_b, r.copy_c, pass ? "ok" : "no");
    }
    return {majority(ok), "held-out keypoint MSE, oracle keypoints, majority of 3 seeds:" + detail};
}

Outcome encoder_ablation() {
    std::vector<bool> ok;
    std::string detail;
    for (std::size_t i = 0; i < kSeeds.size(); ++i) {
        const auto& r = cody_runs()[i];
        const bool pass = r.with_encoder <= r.without_encoder;
        ok.push_back(pass);
        detail += fmt(" [seed %llu: encoder %.5f identity %.5f %s]", static_cast<unsigned long long>(kSeeds[i]),
                      r.with_encoder, r.without_encoder, pass ? "ok" : "no");
    }
    return {majority(ok), "with-encoder MSE <= without, same protocol as 7:" + detail};
}

// ------------------------------------------------------------------ 9

Outcome coefficient_ablation() {
    bench::ScenarioConfig cfg;
    const auto ds = bench::generate_dataset(cfg, 30.0, 300, 7, {}, 1);
    std::vector<bench::Experiment> train, held;
    for (const auto& e : ds.experiments) (io::split_of(e.id) == io::Split::train ? train : held).push_back(e);
    derender::TrainReport reps[2];
    for (int with = 0; with < 2; ++with) {
        derender::DerenderConfig dc;
        dc.keypoints = cfg.n_objects;
        dc.frame_size = 32;
        dc.feature_size = 16;
        dc.width1 = 8;
        dc.width2 = 16;
        dc.refine_width = 16;
        dc.steps = 3000;
        dc.use_coefficients = with == 1;
        derender::Derenderer m(dc);
        reps[with] = derender::train_derender(m, train, held);
    }
    const double on = reps[1].heldout_psnr, off = reps[0].heldout_psnr, copy = reps[1].copy_source_psnr;
    return {on > off && on - copy >= 3.0,
            fmt("K=N=%d, 32px, %zu held-out: with coefficients %.2f dB, without %.2f dB, copy source %.2f dB "
                "(margin %.2f >= 3)",
                cfg.n_objects, held.size(), on, off, copy, on - copy)};
}

// ------------------------------------------------------------------ 10

Outcome no_peeking() {
    bench::ScenarioConfig cfg;
    const auto ds = bench::generate_dataset(cfg, 30.0, 20, 5, {}, 1);
    derender::DerenderConfig dc;
    dc.frame_size = 16;
    dc.feature_size = 8;
    dc.width1 = 4;
    dc.width2 = 6;
    dc.refine_width = 6;
    dc.steps = 5;
    dc.batch = 2;
    derender::Derenderer enc(dc);
    derender::train_derender(enc, ds.experiments, {});
    cody::CodyConfig cc;
    cc.d_u = 4;
    cc.d_sigma = 8;
    cc.gn_hidden = {8};
    cc.gru_hidden = 8;
    cc.steps = 3;
    cc.batch = 2;
    std::vector<cody::Episode> eps;
    for (const auto& e : ds.experiments) {
        const auto f = cody::render_frames(e, dc.frame_size);
        eps.push_back(cody::make_episode(e.id, derender::encode_trajectory(enc, f.ab), derender::encode_trajectory(enc, f.cd)));
    }
    cody::Cody model(cc, dc.keypoints, 2 + dc.coefficient_width());
    cody::train_cody(model, eps);

    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::size_t identical = 0, clean_trace = 0;
    for (const auto& e : ds.experiments) {
        const auto frames = cody::render_frames(e, dc.frame_size);
        auto noisy = frames;
        for (std::size_t t = 1; t < noisy.cd.size(); ++t)
            for (double& v : noisy.cd[t].pixels) v = u(rng);
        const auto a = cody::predict_cd(frames, enc, model);
        const auto b = cody::predict_cd(noisy, enc, model);
        identical += a.states == b.states && a.frames == b.frames;
        bool clean = true;
        for (const auto& t : a.trace) clean &= t.rfind("ab:", 0) == 0 || t == "cd:0";
        clean_trace += clean;
    }
    return {identical == 20 && clean_trace == 20,
            fmt("%zu/20 predictions bitwise identical with noise in D, %zu/20 traces read only AB and C", identical,
                clean_trace)};
}

// ------------------------------------------------------------------ 11

// Largest matching within radius, then least total distance, by trying
// every injection of the smaller side into the larger.
std::pair<std::size_t, double> brute_match(const std::vector<eval::Tracked>& p, const std::vector<eval::Tracked>& g,
                                           double r) {
    const bool swap = p.size() > g.size();
    const auto& small = swap ? g : p;
    const auto& large = swap ? p : g;
    std::vector<int> idx(large.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::pair<std::size_t, double> best{0, 0.0};
    do {
        std::size_t n = 0;
        double d = 0.0;
        for (std::size_t i = 0; i < small.size(); ++i) {
            const double dist = (small[i].position - large[static_cast<std::size_t>(idx[i])].position).norm();
            if (dist <= r) {
                ++n;
                d += dist;
            }
        }
        if (n > best.first || (n == best.first && d < best.second - 1e-12)) best = {n, d};
    } while (std::next_permutation(idx.begin(), idx.end()));
    return best;
}

Outcome mot_checks() {
    std::vector<std::vector<eval::Tracked>> gt(5), perfect(5), missing(5);
    for (int t = 0; t < 5; ++t)
        for (int k = 0; k < 2; ++k) {
            const eval::Tracked obj{k, {0.2 + 0.5 * k, 0.3 + 0.05 * t}};
            gt[t].push_back(obj);
            perfect[t].push_back(obj);
            if (t != 4 || k != 1) missing[t].push_back(obj);
        }
    const auto p = eval::mot_metrics(perfect, gt);
    const auto m = eval::mot_metrics(missing, gt);
    const bool formulas = p.mota == 1.0 && p.motp == 0.0 && std::abs(m.mota - 0.9) < 1e-12;

    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.0, 0.2);
    int agree = 0;
    for (int i = 0; i < 100; ++i) {
        const int np = pick(rng, 1, 5), ng = pick(rng, 1, 5);
        std::vector<eval::Tracked> pr, gr;
        for (int k = 0; k < np; ++k) pr.push_back({k, {u(rng), u(rng)}});
        for (int k = 0; k < ng; ++k) gr.push_back({k, {u(rng), u(rng)}});
        const double radius = 0.1;
        const auto pairs = eval::match_frame(pr, gr, radius);
        double d = 0.0;
        for (const auto& [a, b] : pairs)
            d += (pr[static_cast<std::size_t>(a)].position - gr[static_cast<std::size_t>(b)].position).norm();
        const auto best = brute_match(pr, gr, radius);
        agree += pairs.size() == best.first && std::abs(d - best.second) < 1e-9;
    }
    return {formulas && agree == 100,
            fmt("perfect MOTA %.3f MOTP %.3f, one miss in 10 gives MOTA %.3f; assignment equals brute force on %d/100",
                p.mota, p.motp, m.mota, agree)};
}

// ------------------------------------------------------------------ 12

std::vector<std::pair<std::string, std::string>> tree(const fs::path& dir) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& f : fs::recursive_directory_iterator(dir)) {
        if (!f.is_regular_file() || f.path().filename() == "config.json") continue;
        out.emplace_back(fs::relative(f.path(), dir).string(), io::sha256_file(f.path()));
    }
    std::sort(out.begin(), out.end());
    return out;
}

Outcome determinism() {
    const fs::path root = fs::temp_directory_path() / "cfphys_acceptance_det";
    fs::remove_all(root);
    fs::create_directories(root);
    const std::string cfg = (root / "tiny.json").string();
    std::ofstream(cfg) << R"({
  "derender": {"frame_size": 16, "feature_size": 8, "width1": 4, "width2": 6, "refine_width": 6, "steps": 20, "batch": 2},
  "cody": {"d_u": 4, "d_sigma": 8, "gn_hidden": [8], "gru_hidden": 8, "steps": 10, "batch": 2, "lr": 0.001}
})";
    std::string detail;
    bool pass = true;
    auto stage = [&](const std::string& name, const std::function<std::vector<std::string>(const std::string&)>& args) {
        std::vector<std::pair<std::string, std::string>> trees[2];
        for (int r = 0; r < 2; ++r) {
            const std::string out = (root / (name + std::to_string(r))).string();
            std::ostringstream sink;
            auto* old = std::cout.rdbuf(sink.rdbuf());
            const int code = app::run(args(out));
            std::cout.rdbuf(old);
            if (code != 0) {
                pass = false;
                detail += " " + name + ":failed";
                return;
            }
            trees[r] = tree(out);
        }
        const bool same = trees[0] == trees[1] && !trees[0].empty();
        pass &= same;
        detail += fmt(" %s:%s(%zu files)", name.c_str(), same ? "identical" : "DIFFERENT", trees[0].size());
    };
    const std::string data = (root / "gen0").string();
    stage("gen", [&](const std::string& o) {
        return std::vector<std::string>{"gen", "-c", cfg, "--n", "30", "--seed", "5", "-o", o};
    });
    stage("derender", [&](const std::string& o) {
        return std::vector<std::string>{"train", "derender", "-c", cfg, "--data", data, "-o", o};
    });
    const std::string enc = (root / "derender0" / "derender.ckpt").string();
    stage("cody", [&](const std::string& o) {
        return std::vector<std::string>{"train", "cody", "-c", cfg, "--data", data, "--derender", enc, "-o", o};
    });
    stage("cody-oracle", [&](const std::string& o) {
        return std::vector<std::string>{"train", "cody", "-c", cfg, "--data", data, "--oracle-keypoints", "-o", o};
    });
    fs::remove_all(root);
    return {pass, "two runs, byte-identical artifacts:" + detail};
}

struct Criterion {
    int id;
    const char* name;
    Outcome (*run)();
};

const Criterion kCriteria[] = {
    {1, "physics oracle", physics_oracle},
    {2, "gradient checks", gradient_checks},
    {3, "filter soundness", filter_soundness},
    {4, "threshold sweep shape", threshold_sweep},
    {5, "confounder probe", confounder_probe},
    {6, "temporal resolution", fps_resolution},
    {7, "cody vs copy baselines", cody_vs_copy},
    {8, "state encoder ablation", encoder_ablation},
    {9, "coefficient ablation", coefficient_ablation},
    {10, "no-peeking audit", no_peeking},
    {11, "MOT metrics", mot_checks},
    {12, "determinism", determinism},
};

} // namespace

int main(int argc, char** argv) {
    CLI::App cli{"cfphys acceptance suite"};
    std::vector<int> only;
    cli.add_option("--only", only, "Criterion numbers to run (default: all)");
    CLI11_PARSE(cli, argc, argv);

    int failed = 0;
    for (const auto& c : kCriteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("%s %2d %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs);
        std::fflush(stdout);
        failed += !o.pass;
    }
    return failed == 0 ? 0 : 1;
}
