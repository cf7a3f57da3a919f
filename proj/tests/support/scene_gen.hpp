// SPDX-License-Identifier: Apache-2.0
// Random scene generators shared by the property-style tests.
#pragma once

#include <random>
#include <vector>

#include "cfphys/sim2d.hpp"

namespace cfphys::testkit {

inline sim::Scene random_scene(std::mt19937_64& rng, int n_bodies, bool walls, double speed = 0.5) {
    std::uniform_real_distribution<double> radius(0.03, 0.08);
    std::uniform_real_distribution<double> coord(0.1, 0.9);
    std::uniform_real_distribution<double> vel(-speed, speed);
    sim::Scene scene;
    scene.walls = walls;
    for (int attempt = 0; static_cast<int>(scene.bodies.size()) < n_bodies && attempt < 10000; ++attempt) {
        sim::Body b;
        b.radius = radius(rng);
        b.position = {coord(rng), coord(rng)};
        b.velocity = {vel(rng), vel(rng)};
        b.visual_id = static_cast<int>(scene.bodies.size());
        bool ok = true;
        for (const auto& o : scene.bodies)
            ok &= (o.position - b.position).norm() > o.radius + b.radius + 1e-3;
        if (ok) scene.bodies.push_back(b);
    }
    return scene;
}

// Two balls aimed at each other so that they collide within ~0.5 s.
inline sim::Scene random_colliding_pair(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> radius(0.03, 0.08);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_real_distribution<double> speed(0.2, 1.0);
    sim::Scene scene;
    scene.walls = false;
    const double r1 = radius(rng), r2 = radius(rng);
    const double angle = unit(rng) * 6.283185307179586;
    const sim::Vec2 dir{std::cos(angle), std::sin(angle)};
    const sim::Vec2 perp{-dir.y, dir.x};
    const double offset = (unit(rng) * 2.0 - 1.0) * 0.9 * (r1 + r2);
    sim::Body a{{0.5, 0.5}, dir * speed(rng), r1, 1.0, 0};
    sim::Body b{sim::Vec2{0.5, 0.5} + dir * (r1 + r2 + 0.2) + perp * offset, dir * (-speed(rng)), r2, 1.0, 1};
    scene.bodies = {a, b};
    return scene;
}

} // namespace cfphys::testkit
