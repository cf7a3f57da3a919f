// SPDX-License-Identifier: Apache-2.0
#include "cfphys/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>

#include "cfphys/error.hpp"
#include "cfphys/io.hpp"
#include "cfphys/nn.hpp"

namespace cfphys::eval {

using nn::Tensor;

double psnr(std::span<const render::Frame> pred, std::span<const render::Frame> gt) {
    if (pred.size() != gt.size()) throw UsageError("psnr: sequence lengths differ");
    if (gt.empty()) throw UsageError("psnr: empty sequence");
    double total = 0.0;
    for (std::size_t t = 0; t < gt.size(); ++t) total += render::psnr(pred[t], gt[t]);
    return total / static_cast<double>(gt.size());
}

double l_psnr(std::span<const render::Frame> pred, std::span<const render::Frame> gt, const render::Frame& background,
              double thresh) {
    if (pred.size() != gt.size()) throw UsageError("l_psnr: sequence lengths differ");
    double total = 0.0;
    std::size_t used = 0;
    for (std::size_t t = 0; t < gt.size(); ++t) {
        if (pred[t].height != gt[t].height || pred[t].width != gt[t].width)
            throw UsageError("l_psnr: frame shapes differ");
        const auto mask = render::background_mask(gt[t], background, thresh);
        if (mask.count() == 0) continue;
        double se = 0.0;
        for (int y = 0; y < gt[t].height; ++y)
            for (int x = 0; x < gt[t].width; ++x) {
                if (!mask.at(y, x)) continue;
                for (int c = 0; c < 3; ++c) {
                    const double d = pred[t].at(y, x, c) - gt[t].at(y, x, c);
                    se += d * d;
                }
            }
        const double mse = se / static_cast<double>(mask.count() * 3);
        total += mse == 0.0 ? render::kPsnrCap : std::min(render::kPsnrCap, 10.0 * std::log10(1.0 / mse));
        ++used;
    }
    if (used == 0) throw UsageError("l_psnr: no foreground");
    return total / static_cast<double>(used);
}

std::vector<int> hungarian(const std::vector<std::vector<double>>& cost) {
    const int n = static_cast<int>(cost.size());
    for (const auto& row : cost)
        if (static_cast<int>(row.size()) != n) throw UsageError("hungarian: cost matrix must be square");
    if (n == 0) return {};
    // Potentials formulation, 1-based with column 0 as the sentinel.
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> assignment(n, -1);
    for (int j = 1; j <= n; ++j) assignment[p[j] - 1] = j - 1;
    return assignment;
}

std::vector<std::pair<int, int>> match_frame(std::span<const Tracked> pred, std::span<const Tracked> gt,
                                             double match_radius) {
    const int np = static_cast<int>(pred.size());
    const int ng = static_cast<int>(gt.size());
    const int n = std::max(np, ng);
    if (n == 0) return {};
    // A match inside the radius costs d - big, everything else 0, so the
    // optimum first maximizes the match count and then minimizes distance.
    const double big = (n + 1) * match_radius + 1.0;
    std::vector<std::vector<double>> cost(n, std::vector<double>(n, 0.0));
    for (int i = 0; i < np; ++i)
        for (int j = 0; j < ng; ++j) {
            const double d = (pred[i].position - gt[j].position).norm();
            if (d <= match_radius) cost[i][j] = d - big;
        }
    const auto a = hungarian(cost);
    std::vector<std::pair<int, int>> out;
    for (int i = 0; i < np; ++i)
        if (a[i] < ng && cost[i][a[i]] < 0.0) out.emplace_back(i, a[i]);
    return out;
}

MotResult mot_metrics(const std::vector<std::vector<Tracked>>& pred, const std::vector<std::vector<Tracked>>& gt,
                      double match_radius) {
    if (pred.size() != gt.size()) throw UsageError("mot_metrics: frame counts differ");
    MotResult r;
    std::map<int, int> last;  // gt id -> pred id it was last matched to
    for (std::size_t t = 0; t < gt.size(); ++t) {
        const auto m = match_frame(pred[t], gt[t], match_radius);
        r.ground_truth += gt[t].size();
        r.matches += m.size();
        r.misses += gt[t].size() - m.size();
        r.false_positives += pred[t].size() - m.size();
        for (const auto& [pi, gi] : m) {
            r.matched_distance += (pred[t][pi].position - gt[t][gi].position).norm();
            const int gid = gt[t][gi].id;
            const int pid = pred[t][pi].id;
            const auto it = last.find(gid);
            if (it != last.end() && it->second != pid) ++r.swaps;
            last[gid] = pid;
        }
    }
    const double errors = static_cast<double>(r.misses + r.false_positives + r.swaps);
    if (r.ground_truth > 0)
        r.mota = 1.0 - errors / static_cast<double>(r.ground_truth);
    else
        r.mota = errors == 0.0 ? 1.0 : -std::numeric_limits<double>::infinity();
    r.motp = r.matches > 0 ? r.matched_distance / static_cast<double>(r.matches) : 0.0;
    return r;
}

CopyScores copy_keypoint_mse(const cody::Episode& e) {
    const auto& obs = e.obs;
    const std::size_t frames = std::min(obs.ab.size(), e.cd.size());
    if (frames < 2) throw UsageError("copy_keypoint_mse: need at least 2 frames");
    std::vector<std::vector<double>> b, c, truth(e.cd.begin(), e.cd.begin() + static_cast<std::ptrdiff_t>(frames));
    for (std::size_t t = 0; t < frames; ++t) {
        std::vector<double> row;
        for (int k = 0; k < obs.keypoints; ++k) {
            const auto first = obs.ab[t].begin() + static_cast<std::ptrdiff_t>(k * 2 * obs.width);
            row.insert(row.end(), first, first + obs.width);
        }
        b.push_back(std::move(row));
        c.push_back(obs.c);
    }
    return {cody::sequence_mse(b, truth), cody::sequence_mse(c, truth)};
}

CopyScores copy_pixel_psnr(const cody::ExperimentFrames& frames) {
    const std::size_t n = std::min(frames.ab.size(), frames.cd.size());
    if (n < 2) throw UsageError("copy_pixel_psnr: need at least 2 frames");
    // Frame 0 of D is the given C frame; score the predicted frames only.
    const std::span<const render::Frame> gt(frames.cd.data() + 1, n - 1);
    const std::span<const render::Frame> b(frames.ab.data() + 1, n - 1);
    const std::vector<render::Frame> c(n - 1, frames.cd[0]);
    return {psnr(b, gt), psnr(c, gt)};
}

namespace {

struct ProbeSample {
    const bench::Experiment* e = nullptr;
    std::vector<double> labels;  // per body
};

class MassProbe {
public:
    MassProbe(int hidden, std::uint64_t seed)
        : ps_(seed),
          gn_(ps_, "probe.gn", 4, hidden, {hidden}),
          gru_(ps_, "probe.gru", hidden, hidden, 1),
          out_(ps_, "probe.out", hidden, 1) {}

    // Logits [N * K, 1] for experiments sharing the body count.
    Tensor logits(std::span<const ProbeSample* const> batch, int stride) const {
        const int k = static_cast<int>(batch[0]->e->traj_ab.body_count());
        const int n = static_cast<int>(batch.size());
        auto state = gru_.zero_state(n * k);
        Tensor h;
        const std::size_t frames = batch[0]->e->traj_ab.frame_count();
        for (std::size_t t = 0; t < frames; t += static_cast<std::size_t>(stride)) {
            std::vector<double> v;
            v.reserve(static_cast<std::size_t>(n * k * 4));
            for (const auto* s : batch) {
                const auto& fr = s->e->traj_ab.frames.at(t);
                if (static_cast<int>(fr.size()) != k) throw UsageError("probe: body counts differ within a batch");
                for (const auto& b : fr) v.insert(v.end(), {b.position.x, b.position.y, b.velocity.x, b.velocity.y});
            }
            h = gru_.step(gn_(Tensor::from({n * k, 4}, std::move(v)), k), state);
        }
        return out_(h);
    }

    nn::ParamStore& params() { return ps_; }

private:
    nn::ParamStore ps_;
    nn::GraphNet gn_;
    nn::Gru gru_;
    nn::Linear out_;
};

Tensor label_tensor(std::span<const ProbeSample* const> batch) {
    std::vector<double> v;
    for (const auto* s : batch) v.insert(v.end(), s->labels.begin(), s->labels.end());
    const int rows = static_cast<int>(v.size());
    return Tensor::from({rows, 1}, std::move(v));
}

} // namespace

ProbeResult probe_accuracy(std::span<const bench::Experiment> data, const ProbeConfig& cfg) {
    if (cfg.hidden < 1 || cfg.batch < 1 || cfg.steps < 0 || cfg.frame_stride < 1 || !(cfg.lr > 0))
        throw UsageError("probe: invalid config");
    // Heavy means the largest mass value present anywhere in the data.
    double heavy = -std::numeric_limits<double>::infinity();
    for (const auto& e : data)
        for (double m : e.confounders.masses) heavy = std::max(heavy, m);
    std::vector<ProbeSample> train, test;
    for (const auto& e : data) {
        if (e.traj_ab.frame_count() == 0) continue;
        ProbeSample s{&e, {}};
        for (double m : e.confounders.masses) s.labels.push_back(m == heavy ? 1.0 : 0.0);
        (io::split_of(e.id) == io::Split::train ? train : test).push_back(std::move(s));
    }
    if (train.empty() || test.empty()) throw UsageError("probe: need experiments in both train and held-out splits");

    std::mt19937_64 rng(bench::derive_seed(cfg.seed, 0x9B0BE));
    if (cfg.randomize_labels) {
        std::vector<double*> slots;
        for (auto* set : {&train, &test})
            for (auto& s : *set)
                for (auto& l : s.labels) slots.push_back(&l);
        std::vector<double> pool;
        for (auto* p : slots) pool.push_back(*p);
        std::shuffle(pool.begin(), pool.end(), rng);
        for (std::size_t i = 0; i < slots.size(); ++i) *slots[i] = pool[i];
    }

    MassProbe model(cfg.hidden, cfg.seed);
    ProbeResult r;
    std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<const ProbeSample*> batch;
        for (int b = 0; b < cfg.batch; ++b) batch.push_back(&train[pick(rng)]);
        model.params().zero_grad();
        Tensor loss = nn::bce_with_logits(model.logits(batch, cfg.frame_stride), label_tensor(batch));
        loss.backward();
        model.params().adam_step(cfg.lr);
        r.final_loss = loss.item();
    }

    nn::NoGradGuard ng;
    std::size_t correct = 0, corrected_correct = 0;
    for (const auto& s : test) {
        const ProbeSample* one[] = {&s};
        const Tensor z = model.logits(one, cfg.frame_stride);
        for (std::size_t i = 0; i < s.labels.size(); ++i) {
            const bool ok = (z[i] > 0.0) == (s.labels[i] > 0.5);
            ++r.test_bodies;
            correct += ok;
            if (std::find(s.e->consequential.begin(), s.e->consequential.end(), i) != s.e->consequential.end()) {
                ++r.corrected_bodies;
                corrected_correct += ok;
            }
        }
    }
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.test_bodies);
    r.corrected_accuracy = r.corrected_bodies > 0
                               ? static_cast<double>(corrected_correct) / static_cast<double>(r.corrected_bodies)
                               : r.accuracy;
    return r;
}

ProbeComparison confounder_probe(std::span<const bench::Experiment> filtered,
                                 std::span<const bench::Experiment> unfiltered, const ProbeConfig& cfg) {
    return {probe_accuracy(filtered, cfg), probe_accuracy(unfiltered, cfg)};
}

namespace {

// Positions of one subsampled window: [frame][body].
using Window = std::vector<std::vector<sim::Vec2>>;

class FpsPredictor {
public:
    FpsPredictor(int hidden, std::uint64_t seed)
        : ps_(seed),
          gn_(ps_, "fps.gn", 4, hidden, {hidden}),
          gru_(ps_, "fps.gru", hidden, hidden, 1),
          step_(ps_, "fps.step", 4 + hidden, hidden, {hidden}),
          head_(ps_, "fps.head", hidden, 2, nn::Init::zeros),
          carry_(ps_.create("fps.carry", {2, 2}, nn::Init::zeros)) {}

    // The GRU summarizes the history into a context; the rollout is then a
    // Markov update of (position, velocity) given that context.
    std::vector<Tensor> rollout(std::span<const Window* const> batch, int history, int horizon, double fps) const {
        const int n = static_cast<int>(batch.size());
        const int k = static_cast<int>(batch[0]->front().size());
        auto state = gru_.zero_state(n * k);
        auto frame_tensor = [&](int t) {
            std::vector<double> v;
            for (const auto* w : batch)
                for (int i = 0; i < k; ++i) {
                    const sim::Vec2 p = (*w)[t][i];
                    const sim::Vec2 vel = t > 0 ? (p - (*w)[t - 1][i]) * fps : sim::Vec2{};
                    v.insert(v.end(), {p.x, p.y, vel.x, vel.y});
                }
            return Tensor::from({n * k, 4}, std::move(v));
        };
        Tensor ctx;
        for (int t = 0; t < history; ++t) ctx = gru_.step(gn_(frame_tensor(t), k), state);
        const Tensor last = frame_tensor(history - 1);
        Tensor pos = nn::slice(last, 1, 0, 2);
        Tensor vel = nn::slice(last, 1, 2, 2);
        std::vector<Tensor> out;
        for (int s = 0; s < horizon; ++s) {
            // Zero-initialized, so the untrained model holds the last position.
            const Tensor h = step_(nn::concat({pos, vel, ctx}, 1), k);
            vel = nn::add(nn::matmul(vel, carry_), head_(nn::relu(h)));
            pos = nn::add(pos, nn::scale(vel, 1.0 / fps));
            out.push_back(pos);
        }
        return out;
    }

    nn::ParamStore& params() { return ps_; }

private:
    nn::ParamStore ps_;
    nn::GraphNet gn_;
    nn::Gru gru_;
    nn::GraphNet step_;
    nn::Linear head_;
    Tensor carry_;
};

Tensor window_targets(std::span<const Window* const> batch, int frame) {
    std::vector<double> v;
    for (const auto* w : batch)
        for (const auto& p : (*w)[frame]) v.insert(v.end(), {p.x, p.y});
    const int rows = static_cast<int>(v.size() / 2);
    return Tensor::from({rows, 2}, std::move(v));
}

std::vector<Window> make_windows(const FpsStudyConfig& cfg, int scenes, std::uint64_t stream) {
    std::mt19937_64 rng(bench::derive_seed(cfg.seed, stream));
    std::uniform_int_distribution<std::size_t> mass(0, cfg.scenario.mass_alphabet.size() - 1);
    const double duration = cfg.history + cfg.horizon + 1.0 / cfg.base_fps;
    std::vector<Window> out;
    for (int s = 0; s < scenes; ++s) {
        const auto scene = bench::sample_scene(cfg.scenario, rng);
        std::vector<double> masses;
        for (std::size_t i = 0; i < scene.bodies.size(); ++i) masses.push_back(cfg.scenario.mass_alphabet[mass(rng)]);
        const auto traj = sim::simulate(scene, masses, duration, cfg.base_fps);
        Window w;
        for (const auto& fr : traj.frames) {
            std::vector<sim::Vec2> row;
            for (const auto& b : fr) row.push_back(b.position);
            w.push_back(std::move(row));
        }
        out.push_back(std::move(w));
    }
    return out;
}

Window subsample(const Window& w, int every) {
    Window out;
    for (std::size_t t = 0; t < w.size(); t += static_cast<std::size_t>(every)) out.push_back(w[t]);
    return out;
}

} // namespace

std::vector<FpsRow> fps_study(const FpsStudyConfig& cfg) {
    bench::validate(cfg.scenario);
    if (cfg.base_fps < 1 || cfg.fps_grid.empty()) throw UsageError("fps study: empty grid or bad base rate");
    if (!(cfg.history > 0) || !(cfg.horizon > 0)) throw UsageError("fps study: history and horizon must be > 0");
    if (cfg.train_scenes < 1 || cfg.test_scenes < 1 || cfg.steps < 0 || cfg.batch < 1)
        throw UsageError("fps study: invalid sizes");
    for (int f : cfg.fps_grid)
        if (f < 1 || cfg.base_fps % f != 0)
            throw UsageError("fps study: " + std::to_string(f) + " does not divide the base rate");

    const auto train_base = make_windows(cfg, cfg.train_scenes, 1);
    const auto test_base = make_windows(cfg, cfg.test_scenes, 2);
    std::vector<FpsRow> rows;
    for (int fps : cfg.fps_grid) {
        const int every = cfg.base_fps / fps;
        const int history = static_cast<int>(std::lround(cfg.history * fps)) + 1;
        const int horizon = static_cast<int>(std::lround(cfg.horizon * fps));
        if (horizon < 1) throw UsageError("fps study: horizon shorter than one frame at " + std::to_string(fps));
        std::vector<Window> train, test;
        for (const auto& w : train_base) train.push_back(subsample(w, every));
        for (const auto& w : test_base) test.push_back(subsample(w, every));

        FpsPredictor model(cfg.hidden, bench::derive_seed(cfg.seed, static_cast<std::uint64_t>(fps)));
        std::mt19937_64 rng(bench::derive_seed(cfg.seed, 0xF00 + static_cast<std::uint64_t>(fps)));
        std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
        for (int step = 0; step < cfg.steps; ++step) {
            std::vector<const Window*> batch;
            for (int b = 0; b < cfg.batch; ++b) batch.push_back(&train[pick(rng)]);
            model.params().zero_grad();
            const auto pred = model.rollout(batch, history, horizon, fps);
            Tensor loss = Tensor::scalar(0.0);
            for (int s = 0; s < horizon; ++s) loss = nn::add(loss, nn::mse(pred[s], window_targets(batch, history + s)));
            loss = nn::scale(loss, 1.0 / horizon);
            loss.backward();
            model.params().adam_step(cfg.lr);
        }

        nn::NoGradGuard ng;
        FpsRow row{fps, 0.0, 0.0};
        std::vector<const Window*> all;
        for (const auto& w : test) all.push_back(&w);
        const int last = history + horizon - 1;
        const auto pred = model.rollout(all, history, horizon, fps);
        const Tensor truth = window_targets(all, last);
        row.mse = nn::mse(pred.back(), truth).item();
        row.constant_mse = nn::mse(window_targets(all, history - 1), truth).item();
        rows.push_back(row);
    }
    return rows;
}

DoopReport doop_impact(std::span<const DoopSample> samples, int bins, double max_shift) {
    if (bins < 1 || !(max_shift > 0)) throw UsageError("doop_impact: bins must be >= 1 and max_shift > 0");
    DoopReport rep;
    DoopRow remove{"remove", 0.0, 0.0, 0, 0.0};
    std::vector<DoopRow> shift;
    for (int b = 0; b < bins; ++b)
        shift.push_back({"shift", max_shift * b / bins, max_shift * (b + 1) / bins, 0, 0.0});
    double shift_sum = 0.0;
    std::size_t shift_n = 0;
    for (const auto& s : samples) {
        if (s.kind == bench::DoKind::remove) {
            ++remove.count;
            remove.mean_psnr += s.psnr;
            continue;
        }
        const int b = std::clamp(static_cast<int>(s.magnitude / max_shift * bins), 0, bins - 1);
        ++shift[b].count;
        shift[b].mean_psnr += s.psnr;
        shift_sum += s.psnr;
        ++shift_n;
    }
    rep.remove_mean = remove.count ? remove.mean_psnr / static_cast<double>(remove.count) : 0.0;
    rep.shift_mean = shift_n ? shift_sum / static_cast<double>(shift_n) : 0.0;
    rep.gap = rep.shift_mean - rep.remove_mean;
    remove.mean_psnr = rep.remove_mean;
    rep.rows.push_back(remove);
    for (auto& r : shift) {
        if (r.count) r.mean_psnr /= static_cast<double>(r.count);
        rep.rows.push_back(r);
    }
    return rep;
}

} // namespace cfphys::eval
