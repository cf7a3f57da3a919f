// SPDX-License-Identifier: Apache-2.0
#include "cfphys/benchgen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <thread>

namespace cfphys::bench {
namespace {

using sim::Scene;
using sim::Trajectory;
using sim::Vec2;

bool fits(const Scene& scene, std::size_t moved) {
    const sim::Body& b = scene.bodies[moved];
    const sim::Bounds& bd = scene.bounds;
    if (b.position.x - b.radius < bd.xmin || b.position.x + b.radius > bd.xmax || b.position.y - b.radius < bd.ymin ||
        b.position.y + b.radius > bd.ymax)
        return false;
    for (std::size_t j = 0; j < scene.bodies.size(); ++j) {
        if (j == moved) continue;
        const sim::Body& o = scene.bodies[j];
        if ((o.position - b.position).norm() < o.radius + b.radius + 1e-3) return false;
    }
    return true;
}

// Memoizes rollouts of one initial condition over mass assignments.
class RolloutCache {
public:
    RolloutCache(const Scene& scene, const ScenarioConfig& cfg) : scene_(scene), cfg_(cfg) {}

    const Trajectory& get(const std::vector<double>& full_masses) {
        auto masses = restrict_masses(scene_, full_masses);
        auto it = cache_.find(masses);
        if (it == cache_.end())
            it = cache_.emplace(masses, sim::simulate(scene_, masses, cfg_.duration, cfg_.fps)).first;
        return it->second;
    }

    void seed(const std::vector<double>& full_masses, Trajectory traj) {
        cache_.emplace(restrict_masses(scene_, full_masses), std::move(traj));
    }

private:
    const Scene& scene_;
    const ScenarioConfig& cfg_;
    std::map<std::vector<double>, Trajectory> cache_;
};

IdentifiabilityResult run_identifiability(RolloutCache& ab, RolloutCache& cd, const std::vector<double>& z,
                                          const std::vector<std::vector<double>>& combos, double eps) {
    const Trajectory& ref_a = ab.get(z);
    const Trajectory& ref_c = cd.get(z);
    for (const auto& alt : combos) {
        if (alt == z) continue;
        if (traj_distance(ref_a, ab.get(alt)) >= eps) continue;
        if (traj_distance(ref_c, cd.get(alt)) > eps) return {false, alt};
    }
    return {true, std::nullopt};
}

CounterfactualityResult run_counterfactuality(const Scene& scene_c, RolloutCache& cd, const std::vector<double>& z,
                                              const std::vector<double>& alphabet, double eps) {
    CounterfactualityResult out;
    const Trajectory& ref = cd.get(z);
    for (const sim::Body& b : scene_c.bodies) {
        const auto k = static_cast<std::size_t>(b.visual_id);
        for (double alt : alphabet) {
            if (alt == z[k]) continue;
            std::vector<double> flipped = z;
            flipped[k] = alt;
            if (traj_distance(cd.get(flipped), ref) >= eps) {
                out.consequential.push_back(k);
                break;
            }
        }
    }
    std::sort(out.consequential.begin(), out.consequential.end());
    out.counterfactual = !out.consequential.empty();
    return out;
}

bool every_body_collides(std::size_t n_bodies, const std::vector<sim::Contact>& contacts) {
    std::vector<bool> hit(n_bodies, false);
    for (const auto& c : contacts) hit[c.a] = hit[c.b] = true;
    return std::all_of(hit.begin(), hit.end(), [](bool h) { return h; });
}

struct SceneDraw {
    Scene scene;
    Trajectory traj;
};

std::optional<SceneDraw> draw_scene_a(const ScenarioConfig& cfg, const std::vector<double>& masses,
                                      std::mt19937_64& rng) {
    for (int attempt = 0; attempt < cfg.max_scene_tries; ++attempt) {
        Scene a = sample_scene(cfg, rng);
        std::vector<sim::Contact> contacts;
        Trajectory ab = sim::simulate(a, masses, cfg.duration, cfg.fps, &contacts);
        if (cfg.require_contacts && !every_body_collides(a.bodies.size(), contacts)) continue;
        for (std::size_t i = 0; i < a.bodies.size(); ++i) a.bodies[i].mass = masses[i];
        return SceneDraw{std::move(a), std::move(ab)};
    }
    return std::nullopt;
}

GenerationOutcome generate_for_masses(const ScenarioConfig& cfg, double eps, const std::vector<double>& masses,
                                      std::uint64_t seed, const FilterOptions& filters) {
    std::mt19937_64 rng(seed);
    auto drawn = draw_scene_a(cfg, masses, rng);
    if (!drawn) return Rejection{"identifiability", {{"identifiability", 1}}};

    const auto combos = enumerate_masses(masses.size(), cfg.mass_alphabet);
    RolloutCache ab(drawn->scene, cfg);
    ab.seed(masses, drawn->traj);

    std::map<std::string, std::size_t> failures;
    for (int trial = 0; trial < cfg.max_do_trials; ++trial) {
        DoOperation op;
        try {
            op = sample_do_operation(drawn->scene, cfg, rng);
        } catch (const DoOpError&) {
            ++failures["no-valid-do-op"];
            continue;
        }
        Scene c = apply_do(drawn->scene, op);
        RolloutCache cd(c, cfg);
        if (filters.identifiability && !run_identifiability(ab, cd, masses, combos, eps).identifiable) {
            ++failures["identifiability"];
            continue;
        }
        auto cf = run_counterfactuality(c, cd, masses, cfg.mass_alphabet, eps);
        if (filters.counterfactuality && !cf.counterfactual) {
            ++failures["counterfactuality"];
            continue;
        }
        Experiment e;
        e.scenario = cfg.scenario;
        e.seed = seed;
        e.duration = cfg.duration;
        e.fps = cfg.fps;
        e.eps = eps;
        e.scene_a = drawn->scene;
        e.traj_ab = drawn->traj;
        e.do_op = op;
        for (auto& b : c.bodies) b.mass = masses[static_cast<std::size_t>(b.visual_id)];
        e.traj_cd = cd.get(masses);
        e.scene_c = std::move(c);
        e.confounders.masses = masses;
        for (const auto& b : e.scene_a.bodies) e.confounders.initial_velocities.push_back(b.velocity);
        e.consequential = std::move(cf.consequential);
        return e;
    }
    return Rejection{"no-valid-do-op", std::move(failures)};
}

} // namespace

std::string to_string(Scenario s) { return s == Scenario::balls ? "balls" : "collision"; }

Scenario scenario_from_string(const std::string& name) {
    if (name == "balls") return Scenario::balls;
    if (name == "collision") return Scenario::collision;
    throw UsageError("scenario: unknown value '" + name + "' (expected balls|collision)");
}

std::string to_string(DoKind k) { return k == DoKind::remove ? "remove" : "shift"; }

DoKind do_kind_from_string(const std::string& name) {
    if (name == "remove") return DoKind::remove;
    if (name == "shift") return DoKind::shift;
    throw UsageError("do_op.kind: unknown value '" + name + "'");
}

void validate(const ScenarioConfig& cfg) {
    if (cfg.n_objects < 1) throw UsageError("n_objects: must be >= 1");
    if (cfg.scenario == Scenario::collision && cfg.n_objects != 2)
        throw UsageError("n_objects: the collision scenario has exactly 2 bodies");
    if (!(cfg.duration > 0.0)) throw UsageError("duration_s: must be > 0");
    if (!(cfg.fps > 0.0)) throw UsageError("fps: must be > 0");
    const double per = sim::kSubstepRate / cfg.fps;
    if (std::abs(per - std::round(per)) > 1e-9) throw UsageError("fps: must divide the 250 Hz substep rate");
    if (!(cfg.radius_min > 0.0) || cfg.radius_max < cfg.radius_min) throw UsageError("radius range: invalid");
    if (cfg.speed_max < cfg.speed_min || cfg.speed_min < 0.0) throw UsageError("speed range: invalid");
    if (cfg.shift_max < cfg.shift_min || cfg.shift_min <= 0.0) throw UsageError("shift range: invalid");
    if (cfg.mass_alphabet.size() < 2) throw UsageError("mass_alphabet: needs at least two values");
    if (cfg.max_do_trials < 1) throw UsageError("max_do_trials: must be >= 1");
    const double combos = std::pow(static_cast<double>(cfg.mass_alphabet.size()), cfg.n_objects);
    if (combos > static_cast<double>(kMaxCombinations))
        throw UsageError("n_objects: mass enumeration exceeds " + std::to_string(kMaxCombinations) + " combinations");
}

Scene apply_do(const Scene& scene_a, const DoOperation& op) {
    if (op.target >= scene_a.bodies.size())
        throw UsageError("do-operation target " + std::to_string(op.target) + " out of range");
    Scene c = scene_a;
    if (op.kind == DoKind::remove) {
        c.bodies.erase(c.bodies.begin() + static_cast<std::ptrdiff_t>(op.target));
    } else {
        c.bodies[op.target].position = c.bodies[op.target].position + op.delta;
    }
    return c;
}

std::vector<double> restrict_masses(const Scene& scene, const std::vector<double>& masses) {
    std::vector<double> out;
    out.reserve(scene.bodies.size());
    for (const auto& b : scene.bodies) {
        const auto k = static_cast<std::size_t>(b.visual_id);
        if (k >= masses.size()) throw UsageError("restrict_masses: visual_id beyond mass list");
        out.push_back(masses[k]);
    }
    return out;
}

double traj_distance(const Trajectory& t1, const Trajectory& t2) {
    if (t1.fps != t2.fps || t1.frame_count() != t2.frame_count() || t1.body_count() != t2.body_count())
        throw UsageError("traj_distance: trajectories differ in fps, length or body count");
    double d = 0.0;
    for (std::size_t f = 0; f < t1.frame_count(); ++f) {
        const auto& a = t1.frames[f];
        const auto& b = t2.frames[f];
        if (a.size() != b.size()) throw UsageError("traj_distance: body count changes within a trajectory");
        for (std::size_t i = 0; i < a.size(); ++i) d += (a[i].position - b[i].position).norm();
    }
    return d;
}

std::vector<std::vector<double>> enumerate_masses(std::size_t n_bodies, const std::vector<double>& alphabet) {
    const std::size_t base = alphabet.size();
    std::size_t total = 1;
    for (std::size_t i = 0; i < n_bodies; ++i) {
        total *= base;
        if (total > kMaxCombinations)
            throw UsageError("mass enumeration refused: more than " + std::to_string(kMaxCombinations) +
                             " combinations");
    }
    std::vector<std::vector<double>> out(total, std::vector<double>(n_bodies));
    for (std::size_t c = 0; c < total; ++c) {
        std::size_t rest = c;
        for (std::size_t i = n_bodies; i-- > 0;) {
            out[c][i] = alphabet[rest % base];
            rest /= base;
        }
    }
    return out;
}

IdentifiabilityResult identifiability_test(const Scene& scene_a, const Scene& scene_c, const ConfounderSet& z,
                                           double eps, const ScenarioConfig& cfg) {
    if (!(eps > 0.0)) throw UsageError("identifiability_test: eps must be > 0");
    if (z.masses.size() != scene_a.bodies.size()) throw UsageError("identifiability_test: one mass per body");
    const auto combos = enumerate_masses(z.masses.size(), cfg.mass_alphabet);
    RolloutCache ab(scene_a, cfg);
    RolloutCache cd(scene_c, cfg);
    return run_identifiability(ab, cd, z.masses, combos, eps);
}

CounterfactualityResult counterfactuality_test(const Scene& scene_c, const ConfounderSet& z, double eps,
                                               const ScenarioConfig& cfg) {
    if (!(eps > 0.0)) throw UsageError("counterfactuality_test: eps must be > 0");
    RolloutCache cd(scene_c, cfg);
    return run_counterfactuality(scene_c, cd, z.masses, cfg.mass_alphabet, eps);
}

BalanceLedger::BalanceLedger(std::size_t n_bodies, const std::vector<double>& alphabet)
    : combos_(enumerate_masses(n_bodies, alphabet)), alphabet_(alphabet), counts_(combos_.size(), 0) {}

BalanceLedger::BalanceLedger(const BalanceLedger& other) : combos_(other.combos_), alphabet_(other.alphabet_) {
    std::lock_guard lock(other.mutex_);
    counts_ = other.counts_;
}

std::size_t BalanceLedger::next_combination() const {
    std::lock_guard lock(mutex_);
    return static_cast<std::size_t>(std::min_element(counts_.begin(), counts_.end()) - counts_.begin());
}

void BalanceLedger::record(std::size_t combination) {
    std::lock_guard lock(mutex_);
    counts_.at(combination) += 1;
}

std::vector<double> BalanceLedger::masses(std::size_t combination) const { return combos_.at(combination); }

std::size_t BalanceLedger::combination_of(const std::vector<double>& masses) const {
    const auto it = std::find(combos_.begin(), combos_.end(), masses);
    if (it == combos_.end()) throw UsageError("mass combination not drawn from the alphabet");
    return static_cast<std::size_t>(it - combos_.begin());
}

std::vector<std::size_t> BalanceLedger::counts() const {
    std::lock_guard lock(mutex_);
    return counts_;
}

std::size_t BalanceLedger::total() const {
    std::lock_guard lock(mutex_);
    std::size_t t = 0;
    for (auto c : counts_) t += c;
    return t;
}

double BalanceLedger::imbalance() const {
    std::lock_guard lock(mutex_);
    const auto [lo, hi] = std::minmax_element(counts_.begin(), counts_.end());
    if (*lo == 0) return std::numeric_limits<double>::infinity();
    return static_cast<double>(*hi) / static_cast<double>(*lo);
}

Scene sample_scene(const ScenarioConfig& cfg, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const auto lerp = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
    constexpr double two_pi = 2.0 * std::numbers::pi;

    for (int attempt = 0; attempt < 10000; ++attempt) {
        Scene s;
        if (cfg.scenario == Scenario::balls) {
            bool ok = true;
            for (int i = 0; i < cfg.n_objects && ok; ++i) {
                sim::Body b;
                b.radius = lerp(cfg.radius_min, cfg.radius_max);
                b.visual_id = i;
                bool placed = false;
                for (int t = 0; t < cfg.max_placement_tries && !placed; ++t) {
                    b.position = {lerp(b.radius + 0.01, 1.0 - b.radius - 0.01), lerp(b.radius + 0.01, 1.0 - b.radius - 0.01)};
                    placed = std::all_of(s.bodies.begin(), s.bodies.end(), [&](const sim::Body& o) {
                        return (o.position - b.position).norm() > o.radius + b.radius + 0.01;
                    });
                }
                if (!placed) {
                    ok = false;
                    break;
                }
                const double speed = lerp(cfg.speed_min, cfg.speed_max);
                const double ang = two_pi * unit(rng);
                b.velocity = Vec2{std::cos(ang), std::sin(ang)} * speed;
                s.bodies.push_back(b);
            }
            if (ok) return s;
        } else {
            // Body 0 moves towards body 1, which rests near the center.
            sim::Body rest;
            rest.visual_id = 1;
            rest.radius = lerp(cfg.radius_min, cfg.radius_max);
            rest.position = {lerp(0.35, 0.65), lerp(0.35, 0.65)};
            sim::Body mover;
            mover.visual_id = 0;
            do {
                mover.radius = lerp(cfg.radius_min, cfg.radius_max);
            } while (std::abs(mover.radius - rest.radius) < 0.01 && cfg.radius_max - cfg.radius_min > 0.02);
            const double ang = two_pi * unit(rng);
            const Vec2 dir{std::cos(ang), std::sin(ang)};
            const Vec2 perp{-dir.y, dir.x};
            const double reach = mover.radius + rest.radius;
            mover.position = rest.position - dir * lerp(0.25, 0.4) + perp * (lerp(-0.8, 0.8) * reach);
            mover.velocity = dir * lerp(cfg.speed_min, cfg.speed_max);
            s.bodies = {mover, rest};
            if (fits(s, 0)) return s;
        }
    }
    throw Error("sample_scene: could not place bodies without overlap");
}

DoOperation sample_do_operation(const Scene& scene_a, const ScenarioConfig& cfg, std::mt19937_64& rng) {
    const std::size_t n = scene_a.bodies.size();
    if (n == 0) throw DoOpError("sample_do_operation: empty scene");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<DoKind> kinds{DoKind::shift};
    if (cfg.scenario == Scenario::balls && n >= 2) kinds.insert(kinds.begin(), DoKind::remove);
    DoOperation op;
    op.kind = kinds[std::uniform_int_distribution<std::size_t>(0, kinds.size() - 1)(rng)];
    if (op.kind == DoKind::remove) {
        op.target = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
        return op;
    }
    for (int t = 0; t < cfg.max_placement_tries; ++t) {
        const double dist = cfg.shift_min + (cfg.shift_max - cfg.shift_min) * unit(rng);
        if (cfg.scenario == Scenario::collision) {
            // The moving body is displaced along one canonical axis.
            op.target = 0;
            const auto axis = std::uniform_int_distribution<int>(0, 3)(rng);
            op.delta = axis == 0 ? Vec2{dist, 0} : axis == 1 ? Vec2{-dist, 0} : axis == 2 ? Vec2{0, dist} : Vec2{0, -dist};
        } else {
            op.target = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
            const double ang = 2.0 * std::numbers::pi * unit(rng);
            op.delta = Vec2{std::cos(ang), std::sin(ang)} * dist;
        }
        Scene c = scene_a;
        c.bodies[op.target].position = c.bodies[op.target].position + op.delta;
        if (fits(c, op.target)) return op;
    }
    throw DoOpError("sample_do_operation: no valid shift after " + std::to_string(cfg.max_placement_tries) +
                    " tries");
}

GenerationOutcome generate_experiment(const ScenarioConfig& cfg, double eps, const BalanceLedger& ledger,
                                      std::uint64_t seed, const FilterOptions& filters) {
    validate(cfg);
    if (!(eps > 0.0)) throw UsageError("eps: must be > 0");
    return generate_for_masses(cfg, eps, ledger.masses(ledger.next_combination()), seed, filters);
}

Dataset generate_dataset(const ScenarioConfig& cfg, double eps, std::size_t count, std::uint64_t seed,
                         const FilterOptions& filters, unsigned workers) {
    validate(cfg);
    if (!(eps > 0.0)) throw UsageError("eps: must be > 0");
    workers = std::max(1u, workers);
    BalanceLedger ledger(static_cast<std::size_t>(cfg.n_objects), cfg.mass_alphabet);
    Dataset ds;
    ds.config = cfg;
    ds.eps = eps;
    ds.seed = seed;
    const std::size_t max_attempts = std::max<std::size_t>(count * 200, 1000);
    std::size_t attempt = 0;

    // Speculative batches: every attempt in a batch assumes the current
    // least-populated cell; results are committed in attempt order and the
    // tail of a batch is discarded once the target cell changes. This gives
    // the same sequence as a single worker.
    while (ds.experiments.size() < count) {
        if (attempt >= max_attempts)
            throw Error("generate_dataset: gave up after " + std::to_string(attempt) + " attempts");
        const std::size_t combo = ledger.next_combination();
        const auto masses = ledger.masses(combo);
        std::vector<GenerationOutcome> batch(workers, Rejection{});
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(workers);
        for (unsigned w = 0; w < workers; ++w) {
            const auto run = [&, w] {
                try {
                    batch[w] = generate_for_masses(cfg, eps, masses, derive_seed(seed, attempt + w), filters);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            };
            if (workers == 1) run();
            else pool.emplace_back(run);
        }
        for (auto& t : pool) t.join();
        for (unsigned w = 0; w < workers; ++w) {
            if (ledger.next_combination() != combo || ds.experiments.size() >= count) break;
            if (errors[w]) std::rethrow_exception(errors[w]);
            ++attempt;
            ++ds.stats.attempts;
            if (auto* e = std::get_if<Experiment>(&batch[w])) {
                char id[32];
                std::snprintf(id, sizeof id, "%06zu", ds.experiments.size());
                e->id = id;
                ledger.record(combo);
                ds.experiments.push_back(std::move(*e));
            } else {
                const auto& rej = std::get<Rejection>(batch[w]);
                for (const auto& [k, v] : rej.trial_failures) ds.stats.rejections[k] += v;
                if (rej.reason == "no-valid-do-op") ++ds.stats.rejections["no-valid-do-op"];
            }
        }
    }
    ds.cell_counts = ledger.counts();
    return ds;
}

std::vector<SweepRow> threshold_sweep(const ScenarioConfig& cfg, const std::vector<double>& eps_grid,
                                      std::size_t n_samples, std::uint64_t seed) {
    validate(cfg);
    if (eps_grid.empty()) throw UsageError("eps grid: must be non-empty");
    if (!std::is_sorted(eps_grid.begin(), eps_grid.end()) ||
        std::adjacent_find(eps_grid.begin(), eps_grid.end()) != eps_grid.end())
        throw UsageError("eps grid: must be strictly increasing");
    const auto combos = enumerate_masses(static_cast<std::size_t>(cfg.n_objects), cfg.mass_alphabet);
    std::vector<std::size_t> rejected(eps_grid.size(), 0);

    for (std::size_t i = 0; i < n_samples; ++i) {
        std::mt19937_64 rng(derive_seed(seed, i));
        const auto& z = combos[std::uniform_int_distribution<std::size_t>(0, combos.size() - 1)(rng)];
        std::optional<SceneDraw> drawn;
        DoOperation op;
        for (bool ok = false; !ok;) {
            drawn = draw_scene_a(cfg, z, rng);
            if (!drawn) continue;
            try {
                op = sample_do_operation(drawn->scene, cfg, rng);
                ok = true;
            } catch (const DoOpError&) {
            }
        }
        const Scene c = apply_do(drawn->scene, op);
        RolloutCache ab(drawn->scene, cfg);
        ab.seed(z, drawn->traj);
        RolloutCache cd(c, cfg);
        std::vector<std::pair<double, double>> gaps;
        for (const auto& alt : combos) {
            if (alt == z) continue;
            gaps.emplace_back(traj_distance(ab.get(z), ab.get(alt)), traj_distance(cd.get(z), cd.get(alt)));
        }
        for (std::size_t e = 0; e < eps_grid.size(); ++e) {
            const double eps = eps_grid[e];
            const bool reject = std::any_of(gaps.begin(), gaps.end(),
                                            [eps](const auto& g) { return g.first < eps && g.second > eps; });
            rejected[e] += reject ? 1 : 0;
        }
    }
    std::vector<SweepRow> rows;
    for (std::size_t e = 0; e < eps_grid.size(); ++e)
        rows.push_back({eps_grid[e], 100.0 * static_cast<double>(rejected[e]) / static_cast<double>(n_samples)});
    return rows;
}

double best_threshold(const std::vector<SweepRow>& rows) {
    if (rows.empty()) throw UsageError("best_threshold: empty sweep");
    return std::max_element(rows.begin(), rows.end(),
                            [](const SweepRow& a, const SweepRow& b) { return a.rejection_pct < b.rejection_pct; })
        ->eps;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
    // splitmix64 over the pair
    std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

} // namespace cfphys::bench
