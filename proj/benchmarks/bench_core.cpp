#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "bevmine/detector.hpp"
#include "bevmine/geometry.hpp"
#include "bevmine/mining.hpp"
#include "bevmine/scenes.hpp"
#include "fixtures.hpp"

using namespace bevmine;

namespace {

// Same shape as configs/benchmark.toml.
AnchorGrid bench_grid() { return AnchorGrid(25, 25, 1.6, {-20.0, -20.0}, {{4.1, 1.8, 0.0}, {4.1, 1.8, kPi / 2.0}}); }

void BM_RotatedIou(benchmark::State& state) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> pos(-2.0, 2.0);
    std::uniform_real_distribution<double> yaw(-kPi, kPi);
    std::vector<BoxBEV> boxes;
    for (int i = 0; i < 256; ++i) {
        boxes.push_back({pos(rng), pos(rng), 4.1, 1.8, yaw(rng)});
    }
    std::size_t i = 0;
    for (auto _ : state) {
        benchmark::DoNotOptimize(rotated_iou(boxes[i % 256], boxes[(i * 7 + 3) % 256]));
        ++i;
    }
}
BENCHMARK(BM_RotatedIou);

void BM_Nms(benchmark::State& state) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> pos(-20.0, 20.0);
    std::uniform_real_distribution<double> score(0.0, 1.0);
    std::uniform_real_distribution<double> yaw(-kPi, kPi);
    std::vector<ScoredBox> cands;
    for (std::size_t k = 0; k < static_cast<std::size_t>(state.range(0)); ++k) {
        cands.push_back({{pos(rng), pos(rng), 4.1, 1.8, yaw(rng)}, score(rng), k});
    }
    for (auto _ : state) {
        benchmark::DoNotOptimize(nms(cands, 0.15));
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Nms)->RangeMultiplier(4)->Range(16, 1024)->Complexity();

void BM_MfmSfm(benchmark::State& state) {
    const AnchorGrid g = bench_grid();
    std::mt19937_64 rng(3);
    const Prediction st = fixture::random_prediction(g, rng, -7.0, 0.5);
    const Prediction dt = fixture::random_prediction(g, rng, -7.0, 0.5);
    for (auto _ : state) {
        const PositiveSet main = mfm(st, g, 0.2, 0.15);
        benchmark::DoNotOptimize(sfm(dt, g, 0.5, 0.15, main));
    }
}
BENCHMARK(BM_MfmSfm);

void BM_TwoMeans(benchmark::State& state) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> v(static_cast<std::size_t>(state.range(0)));
    for (auto& x : v) {
        x = u(rng);
    }
    for (auto _ : state) {
        benchmark::DoNotOptimize(two_means_1d(v));
    }
}
BENCHMARK(BM_TwoMeans)->Arg(8)->Arg(64)->Arg(512);

void BM_CollaborativeFeatures(benchmark::State& state) {
    const AnchorGrid g = bench_grid();
    const Scene scene = generate_scene(SceneGenParams{}, 0);
    for (auto _ : state) {
        benchmark::DoNotOptimize(collaborative_features(scene, g));
    }
}
BENCHMARK(BM_CollaborativeFeatures);

void BM_HeadForward(benchmark::State& state) {
    const AnchorGrid g = bench_grid();
    const FeatureMap f = collaborative_features(generate_scene(SceneGenParams{}, 0), g);
    const DetectorState s = fixture::random_state(g, 1);
    for (auto _ : state) {
        benchmark::DoNotOptimize(detect_head(f, s));
    }
}
BENCHMARK(BM_HeadForward);

void BM_LossAndBackward(benchmark::State& state) {
    const AnchorGrid g = bench_grid();
    const FeatureMap f = collaborative_features(generate_scene(SceneGenParams{}, 0), g);
    const DetectorState s = fixture::random_state(g, 1);
    std::mt19937_64 rng(9);
    const LabelSet labels = fixture::random_labels(g, rng, 12);
    for (auto _ : state) {
        const Prediction p = detect_head(f, s);
        const LossResult loss = supervised_loss(p, labels, g);
        benchmark::DoNotOptimize(detect_head_backward(f, s, loss.grad));
    }
}
BENCHMARK(BM_LossAndBackward);

}  // namespace

BENCHMARK_MAIN();
