// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <random>

#include "cfphys/benchgen.hpp"
#include "cfphys/cody.hpp"
#include "cfphys/derender.hpp"
#include "cfphys/eval.hpp"

using namespace cfphys;

namespace {

void BM_SimulateBalls(benchmark::State& state) {
    bench::ScenarioConfig cfg;
    cfg.n_objects = static_cast<int>(state.range(0));
    std::mt19937_64 rng(1);
    const sim::Scene s = bench::sample_scene(cfg, rng);
    const std::vector<double> masses(s.bodies.size(), 1.0);
    for (auto _ : state) benchmark::DoNotOptimize(sim::simulate(s, masses, cfg.duration, cfg.fps));
}
BENCHMARK(BM_SimulateBalls)->Arg(2)->Arg(3)->Arg(4);

void BM_GenerateExperiment(benchmark::State& state) {
    bench::ScenarioConfig cfg;
    const bench::BalanceLedger ledger(static_cast<std::size_t>(cfg.n_objects), cfg.mass_alphabet);
    std::uint64_t seed = 0;
    for (auto _ : state) benchmark::DoNotOptimize(bench::generate_experiment(cfg, 30.0, ledger, ++seed));
}
BENCHMARK(BM_GenerateExperiment)->Unit(benchmark::kMillisecond);

void BM_Conv2dForwardBackward(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(-1, 1);
    auto rnd = [&](const nn::Shape& s) {
        std::vector<double> v(nn::numel(s));
        for (double& x : v) x = u(rng);
        return nn::Tensor::from(s, std::move(v), true);
    };
    nn::Tensor x = rnd({2, 8, n, n}), w = rnd({16, 8, 3, 3}), b = rnd({16});
    for (auto _ : state) {
        nn::Tensor y = nn::sum(nn::conv2d(x, w, b, 1, 1));
        y.backward();
        benchmark::DoNotOptimize(w.grad());
    }
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_DerenderEncode(benchmark::State& state) {
    derender::DerenderConfig dc;
    dc.frame_size = static_cast<int>(state.range(0));
    dc.feature_size = dc.frame_size / 4;
    const derender::Derenderer m(dc);
    sim::Scene s;
    s.bodies = {sim::Body{{0.4, 0.5}, {}, 0.08, 1.0, 0}};
    const render::Frame f = render::rasterize(s, dc.frame_size, dc.frame_size);
    nn::NoGradGuard ng;
    for (auto _ : state) benchmark::DoNotOptimize(m.encode(f));
}
BENCHMARK(BM_DerenderEncode)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_CodyPredict(benchmark::State& state) {
    bench::ScenarioConfig cfg;
    const auto ds = bench::generate_dataset(cfg, 30.0, 1, 3);
    const auto ep = cody::oracle_episode(ds.experiments[0], 3, 5);
    const cody::Cody m(cody::CodyConfig{}, 3, 8);
    nn::NoGradGuard ng;
    for (auto _ : state) benchmark::DoNotOptimize(m.predict(ep.obs, static_cast<int>(ep.cd.size())));
}
BENCHMARK(BM_CodyPredict)->Unit(benchmark::kMillisecond);

void BM_Hungarian(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<std::vector<double>> cost(n, std::vector<double>(n));
    for (auto& row : cost)
        for (double& c : row) c = u(rng);
    for (auto _ : state) benchmark::DoNotOptimize(eval::hungarian(cost));
}
BENCHMARK(BM_Hungarian)->Arg(5)->Arg(50);

} // namespace

BENCHMARK_MAIN();
