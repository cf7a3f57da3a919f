// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <iosfwd>
#include <span>
#include <vector>

namespace cfphys::sim {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    constexpr Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
    constexpr Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
    constexpr Vec2 operator*(double s) const { return {x * s, y * s}; }
    constexpr Vec2 operator-() const { return {-x, -y}; }
    constexpr bool operator==(const Vec2&) const = default;
    constexpr double dot(Vec2 o) const { return x * o.x + y * o.y; }
    double norm() const { return std::hypot(x, y); }
};

struct Body {
    Vec2 position;
    Vec2 velocity;
    double radius = 0.05;
    double mass = 1.0;
    /// Appearance index. Stays attached to the same physical object across
    /// the observed and counterfactual legs of an experiment.
    int visual_id = 0;
    bool operator==(const Body&) const = default;
};

struct Bounds {
    double xmin = 0.0;
    double ymin = 0.0;
    double xmax = 1.0;
    double ymax = 1.0;
    bool operator==(const Bounds&) const = default;
};

struct Scene {
    std::vector<Body> bodies;
    Bounds bounds;
    Vec2 gravity;
    /// When false the bounds are not enforced and bodies fly freely.
    bool walls = true;
    bool operator==(const Scene&) const = default;
};

struct BodyState {
    Vec2 position;
    Vec2 velocity;
    bool operator==(const BodyState&) const = default;
};

/// Uniformly sampled record of a rollout: frames[t][body].
struct Trajectory {
    double fps = 25.0;
    std::vector<std::vector<BodyState>> frames;

    std::size_t frame_count() const { return frames.size(); }
    std::size_t body_count() const { return frames.empty() ? 0 : frames.front().size(); }
    double time(std::size_t frame) const { return static_cast<double>(frame) / fps; }
    bool operator==(const Trajectory&) const = default;
};

/// A body-body impulse applied during integration.
struct Contact {
    double time = 0.0;
    std::size_t a = 0;
    std::size_t b = 0;
};

/// Integration rate of the simulator; every public entry point subdivides
/// its interval into substeps no longer than 1 / kSubstepRate.
inline constexpr double kSubstepRate = 250.0;
/// Cap on the pairwise impulse sweeps when several contacts coincide.
inline constexpr int kMaxContactIterations = 16;

struct CollisionOutcome {
    Body first;
    Body second;
    /// False when the bodies were separating and nothing was applied.
    bool applied = false;
};

/// Elastic two-mass impulse along the contact normal.
CollisionOutcome resolve_collision(const Body& b1, const Body& b2);

/// Throws UsageError if bodies overlap, leave the bounds, or have
/// non-positive radius/mass.
void validate_scene(const Scene& scene);

/// Advances the scene by dt seconds. Any dt > 0 is accepted and split into
/// substeps of at most 1/kSubstepRate with exact (event-driven) contact times.
Scene step(const Scene& scene, double dt, std::vector<Contact>* contacts = nullptr);

/// Rolls the scene out with the given per-body masses and samples it at fps.
/// Produces round(duration * fps) frames starting at t = 0. kSubstepRate must
/// be an integer multiple of fps.
Trajectory simulate(const Scene& scene, std::span<const double> masses, double duration,
                    double fps, std::vector<Contact>* contacts = nullptr);

/// Keeps every (fps / target_fps)-th frame starting from t = 0.
Trajectory resample(const Trajectory& traj, double target_fps);

double total_kinetic_energy(std::span<const Body> bodies);
Vec2 total_momentum(std::span<const Body> bodies);

/// CSV with header `t,obj,x,y,vx,vy`; one row per body per frame.
void write_trajectory_csv(std::ostream& out, const Trajectory& traj);
Trajectory read_trajectory_csv(std::istream& in, double fps);

} // namespace cfphys::sim
