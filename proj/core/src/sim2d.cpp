// SPDX-License-Identifier: Apache-2.0
#include "cfphys/sim2d.hpp"

#include <algorithm>
#include <cstdio>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>

#include "cfphys/error.hpp"

namespace cfphys::sim {
namespace {

// Bodies closer than this (beyond the sum of radii) count as touching.
constexpr double kContactTol = 1e-9;
constexpr int kMaxEventsPerSubstep = 4096;

bool is_finite(Vec2 v) { return std::isfinite(v.x) && std::isfinite(v.y); }

// Ballistic state stored as an anchor so that free flight evaluates exactly
// as p(t) = p_anchor + v * (t - t_anchor) regardless of substep count.
struct Track {
    Vec2 anchor;
    double anchor_t = 0.0;
    Vec2 velocity;
    double radius = 0.0;
    double mass = 0.0;

    Vec2 at(double t) const { return anchor + velocity * (t - anchor_t); }
    void rebase(double t) {
        anchor = at(t);
        anchor_t = t;
    }
};

class Integrator {
public:
    Integrator(const Scene& scene, std::vector<Contact>* contacts)
        : bounds_(scene.bounds), gravity_(scene.gravity), walls_(scene.walls), contacts_(contacts) {
        tracks_.reserve(scene.bodies.size());
        for (const Body& b : scene.bodies)
            tracks_.push_back({b.position, 0.0, b.velocity, b.radius, b.mass});
        min_radius_ = std::numeric_limits<double>::infinity();
        for (const Track& tr : tracks_) min_radius_ = std::min(min_radius_, tr.radius);
    }

    void substep(double t0, double t1) {
        const double h = t1 - t0;
        check_tunnelling(h);
        if (gravity_.x != 0.0 || gravity_.y != 0.0) {
            for (Track& tr : tracks_) {
                tr.rebase(t0);
                tr.velocity = tr.velocity + gravity_ * h;
            }
        }
        double t = t0;
        for (int events = 0;; ++events) {
            if (events > kMaxEventsPerSubstep)
                throw SimulationError("contact resolution did not terminate at t=" +
                                      std::to_string(t));
            resolve_contacts(t);
            const double hit = next_event(t, t1 - t);
            if (!(hit < std::numeric_limits<double>::infinity())) break;
            t += hit;
        }
    }

    std::vector<BodyState> states(double t) const {
        std::vector<BodyState> out;
        out.reserve(tracks_.size());
        for (const Track& tr : tracks_) out.push_back({tr.at(t), tr.velocity});
        return out;
    }

private:
    void check_tunnelling(double h) const {
        for (std::size_t i = 0; i < tracks_.size(); ++i) {
            if (walls_ && tracks_[i].velocity.norm() * h > min_radius_)
                throw SimulationError("tunnelling risk: body " + std::to_string(i) +
                                      " moves more than the smallest radius per substep; "
                                      "use a smaller substep");
            for (std::size_t j = i + 1; j < tracks_.size(); ++j) {
                const double rel = (tracks_[i].velocity - tracks_[j].velocity).norm() * h;
                if (rel > min_radius_)
                    throw SimulationError("tunnelling risk: bodies " + std::to_string(i) + "," +
                                          std::to_string(j) +
                                          " close faster than the smallest radius per substep; "
                                          "use a smaller substep");
            }
        }
    }

    // Iterates pairwise impulses (index order) and wall reflections until no
    // touching pair is approaching, or the iteration cap is reached.
    void resolve_contacts(double t) {
        for (int iter = 0; iter < kMaxContactIterations; ++iter) {
            bool changed = false;
            for (std::size_t i = 0; i < tracks_.size(); ++i) {
                for (std::size_t j = i + 1; j < tracks_.size(); ++j) {
                    Track& a = tracks_[i];
                    Track& b = tracks_[j];
                    const Vec2 pa = a.at(t);
                    const Vec2 pb = b.at(t);
                    const Vec2 dp = pb - pa;
                    if (dp.norm() > a.radius + b.radius + kContactTol) continue;
                    if ((b.velocity - a.velocity).dot(dp) >= 0.0) continue;
                    Body ba{pa, a.velocity, a.radius, a.mass, 0};
                    Body bb{pb, b.velocity, b.radius, b.mass, 0};
                    const CollisionOutcome out = resolve_collision(ba, bb);
                    if (!out.applied) continue;
                    a.rebase(t);
                    b.rebase(t);
                    a.velocity = out.first.velocity;
                    b.velocity = out.second.velocity;
                    if (contacts_ != nullptr) contacts_->push_back({t, i, j});
                    changed = true;
                }
            }
            if (walls_) {
                for (Track& tr : tracks_) changed |= reflect_walls(tr, t);
            }
            if (!changed) return;
        }
    }

    bool reflect_walls(Track& tr, double t) const {
        const Vec2 p = tr.at(t);
        Vec2 v = tr.velocity;
        if (p.x - tr.radius <= bounds_.xmin + kContactTol && v.x < 0.0) v.x = -v.x;
        if (p.x + tr.radius >= bounds_.xmax - kContactTol && v.x > 0.0) v.x = -v.x;
        if (p.y - tr.radius <= bounds_.ymin + kContactTol && v.y < 0.0) v.y = -v.y;
        if (p.y + tr.radius >= bounds_.ymax - kContactTol && v.y > 0.0) v.y = -v.y;
        if (v == tr.velocity) return false;
        tr.rebase(t);
        tr.velocity = v;
        return true;
    }

    // Time until the earliest contact within `remaining`, or +inf.
    double next_event(double t, double remaining) const {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < tracks_.size(); ++i) {
            const Track& a = tracks_[i];
            const Vec2 pa = a.at(t);
            for (std::size_t j = i + 1; j < tracks_.size(); ++j) {
                const Track& b = tracks_[j];
                const Vec2 dp = b.at(t) - pa;
                const Vec2 dv = b.velocity - a.velocity;
                const double bq = dp.dot(dv);
                if (bq >= 0.0) continue;
                const double aq = dv.dot(dv);
                const double r = a.radius + b.radius;
                const double cq = dp.dot(dp) - r * r;
                const double disc = bq * bq - aq * cq;
                if (disc < 0.0) continue;
                const double toi = cq <= 0.0 ? 0.0 : cq / (-bq + std::sqrt(disc));
                if (toi <= remaining) best = std::min(best, toi);
            }
            if (walls_) {
                const auto wall = [&](double pos, double vel, double lo, double hi) {
                    if (vel > 0.0) return std::max(0.0, (hi - a.radius - pos) / vel);
                    if (vel < 0.0) return std::max(0.0, (lo + a.radius - pos) / vel);
                    return std::numeric_limits<double>::infinity();
                };
                const double tx = wall(pa.x, a.velocity.x, bounds_.xmin, bounds_.xmax);
                const double ty = wall(pa.y, a.velocity.y, bounds_.ymin, bounds_.ymax);
                if (tx <= remaining) best = std::min(best, tx);
                if (ty <= remaining) best = std::min(best, ty);
            }
        }
        return best;
    }

    std::vector<Track> tracks_;
    Bounds bounds_;
    Vec2 gravity_;
    bool walls_;
    double min_radius_;
    std::vector<Contact>* contacts_;
};

long long checked_ratio(double num, double den, const char* what) {
    const double r = num / den;
    const long long n = std::llround(r);
    if (n < 1 || std::abs(r - static_cast<double>(n)) > 1e-9)
        throw UsageError(std::string(what) + ": " + std::to_string(num) + " is not an integer multiple of " +
                         std::to_string(den));
    return n;
}

} // namespace

CollisionOutcome resolve_collision(const Body& b1, const Body& b2) {
    CollisionOutcome out{b1, b2, false};
    const Vec2 d = b2.position - b1.position;
    const double dist = d.norm();
    if (!(dist > 0.0)) return out;
    const Vec2 n = d * (1.0 / dist);
    // Closing speed along the normal; <= 0 means separating or sliding.
    const double closing = (b1.velocity - b2.velocity).dot(n);
    if (closing <= 0.0) return out;
    const double total = b1.mass + b2.mass;
    const double w1 = 2.0 * b2.mass / total;
    const double w2 = 2.0 * b1.mass / total;
    out.first.velocity = b1.velocity - n * (w1 * closing);
    out.second.velocity = b2.velocity + n * (w2 * closing);
    out.applied = true;
    return out;
}

void validate_scene(const Scene& scene) {
    const Bounds& bd = scene.bounds;
    for (std::size_t i = 0; i < scene.bodies.size(); ++i) {
        const Body& b = scene.bodies[i];
        if (!(b.radius > 0.0)) throw UsageError("body " + std::to_string(i) + ": radius must be > 0");
        if (!(b.mass > 0.0)) throw UsageError("body " + std::to_string(i) + ": mass must be > 0");
        if (!is_finite(b.position) || !is_finite(b.velocity))
            throw UsageError("body " + std::to_string(i) + ": non-finite state");
        if (scene.walls && (b.position.x - b.radius < bd.xmin - 1e-12 || b.position.x + b.radius > bd.xmax + 1e-12 ||
                            b.position.y - b.radius < bd.ymin - 1e-12 || b.position.y + b.radius > bd.ymax + 1e-12))
            throw UsageError("body " + std::to_string(i) + " is outside the scene bounds");
        for (std::size_t j = i + 1; j < scene.bodies.size(); ++j) {
            const Body& o = scene.bodies[j];
            if ((o.position - b.position).norm() < b.radius + o.radius - 1e-12)
                throw UsageError("bodies " + std::to_string(i) + " and " + std::to_string(j) + " overlap");
        }
    }
}

Scene step(const Scene& scene, double dt, std::vector<Contact>* contacts) {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw UsageError("step: dt must be > 0");
    const auto n = static_cast<long long>(std::ceil(dt * kSubstepRate - 1e-9));
    Integrator integ(scene, contacts);
    double t0 = 0.0;
    for (long long k = 1; k <= n; ++k) {
        const double t1 = k == n ? dt : dt * static_cast<double>(k) / static_cast<double>(n);
        integ.substep(t0, t1);
        t0 = t1;
    }
    Scene out = scene;
    const auto st = integ.states(dt);
    for (std::size_t i = 0; i < out.bodies.size(); ++i) {
        out.bodies[i].position = st[i].position;
        out.bodies[i].velocity = st[i].velocity;
    }
    return out;
}

Trajectory simulate(const Scene& scene, std::span<const double> masses, double duration, double fps,
                    std::vector<Contact>* contacts) {
    if (masses.size() != scene.bodies.size())
        throw UsageError("simulate: expected " + std::to_string(scene.bodies.size()) + " masses, got " +
                         std::to_string(masses.size()));
    if (!(fps > 0.0) || !(duration > 0.0)) throw UsageError("simulate: fps and duration must be > 0");
    const long long per_frame = checked_ratio(kSubstepRate, fps, "simulate: substep rate");
    const long long frames = std::llround(duration * fps);
    if (frames < 1) throw UsageError("simulate: duration shorter than one frame");

    Scene s = scene;
    for (std::size_t i = 0; i < masses.size(); ++i) s.bodies[i].mass = masses[i];
    validate_scene(s);

    Integrator integ(s, contacts);
    Trajectory traj;
    traj.fps = fps;
    traj.frames.reserve(static_cast<std::size_t>(frames));
    traj.frames.push_back(integ.states(0.0));
    long long sub = 0;
    for (long long f = 1; f < frames; ++f) {
        for (long long k = 0; k < per_frame; ++k, ++sub) {
            const double t0 = static_cast<double>(sub) / kSubstepRate;
            const double t1 = static_cast<double>(sub + 1) / kSubstepRate;
            integ.substep(t0, t1);
        }
        auto st = integ.states(static_cast<double>(f) / fps);
        for (const BodyState& b : st) {
            if (!is_finite(b.position) || !is_finite(b.velocity))
                throw SimulationError("non-finite state at frame " + std::to_string(f));
        }
        traj.frames.push_back(std::move(st));
    }
    return traj;
}

Trajectory resample(const Trajectory& traj, double target_fps) {
    if (!(target_fps > 0.0)) throw UsageError("resample: target fps must be > 0");
    const long long stride = checked_ratio(traj.fps, target_fps, "resample: fps");
    Trajectory out;
    out.fps = target_fps;
    for (std::size_t f = 0; f < traj.frames.size(); f += static_cast<std::size_t>(stride))
        out.frames.push_back(traj.frames[f]);
    return out;
}

double total_kinetic_energy(std::span<const Body> bodies) {
    double e = 0.0;
    for (const Body& b : bodies) e += 0.5 * b.mass * b.velocity.dot(b.velocity);
    return e;
}

Vec2 total_momentum(std::span<const Body> bodies) {
    Vec2 p;
    for (const Body& b : bodies) p = p + b.velocity * b.mass;
    return p;
}

void write_trajectory_csv(std::ostream& out, const Trajectory& traj) {
    out << "t,obj,x,y,vx,vy\n";
    char buf[256];
    for (std::size_t f = 0; f < traj.frames.size(); ++f) {
        for (std::size_t i = 0; i < traj.frames[f].size(); ++i) {
            const BodyState& s = traj.frames[f][i];
            std::snprintf(buf, sizeof buf, "%.6f,%zu,%.17g,%.17g,%.17g,%.17g\n", traj.time(f), i, s.position.x,
                          s.position.y, s.velocity.x, s.velocity.y);
            out << buf;
        }
    }
}

Trajectory read_trajectory_csv(std::istream& in, double fps) {
    std::string line;
    if (!std::getline(in, line) || line != "t,obj,x,y,vx,vy") throw IoError("trajectory csv: bad header");
    Trajectory traj;
    traj.fps = fps;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        double t = 0;
        std::size_t obj = 0;
        BodyState s;
        if (std::sscanf(line.c_str(), "%lf,%zu,%lf,%lf,%lf,%lf", &t, &obj, &s.position.x, &s.position.y,
                        &s.velocity.x, &s.velocity.y) != 6)
            throw IoError("trajectory csv: malformed row " + std::to_string(row));
        const auto f = static_cast<std::size_t>(std::llround(t * fps));
        if (f == traj.frames.size()) traj.frames.emplace_back();
        if (f + 1 != traj.frames.size() || obj != traj.frames.back().size())
            throw IoError("trajectory csv: rows out of order at line " + std::to_string(row));
        traj.frames.back().push_back(s);
    }
    return traj;
}

} // namespace cfphys::sim
