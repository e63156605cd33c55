#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "bevmine/detector.hpp"
#include "bevmine/mining.hpp"
#include "bevmine/scenes.hpp"

namespace fixture {

using namespace bevmine;

inline AnchorGrid small_grid(int h = 6, int w = 7) {
    return AnchorGrid(h, w, 1.6, {-0.8 * w, -0.8 * h}, {{4.1, 1.8, 0.0}, {4.1, 1.8, kPi / 2.0}});
}

/// Logits spread so that a handful of anchors clear the usual 0.15-0.2 thresholds.
inline Prediction random_prediction(const AnchorGrid& grid, std::mt19937_64& rng, double lo = -5.0, double hi = 1.0) {
    Prediction p(grid.num_anchors());
    std::uniform_real_distribution<double> logit(lo, hi);
    std::uniform_real_distribution<double> small(-0.4, 0.4);
    for (auto& v : p.cls) {
        v = logit(rng);
    }
    for (auto& v : p.reg) {
        v = small(rng);
    }
    for (auto& v : p.dir) {
        v = small(rng);
    }
    return p;
}

inline LabelSet random_labels(const AnchorGrid& grid, std::mt19937_64& rng, std::size_t count) {
    std::vector<std::size_t> anchors(grid.num_anchors());
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        anchors[i] = i;
    }
    std::shuffle(anchors.begin(), anchors.end(), rng);
    std::uniform_real_distribution<double> t(-0.6, 0.6);
    std::bernoulli_distribution coin(0.5);
    LabelSet labels;
    for (std::size_t k = 0; k < std::min(count, anchors.size()); ++k) {
        LabelEntry e;
        e.anchor = anchors[k];
        e.target = {t(rng), t(rng), t(rng), t(rng), t(rng)};
        e.direction = coin(rng) ? 1 : 0;
        e.regress = k % 3 != 2;
        e.source = kAllLabelSources[k % 4];
        labels.positives.push_back(e);
    }
    std::sort(labels.positives.begin(), labels.positives.end(),
              [](const LabelEntry& a, const LabelEntry& b) { return a.anchor < b.anchor; });
    return labels;
}

inline DetectorState random_state(const AnchorGrid& grid, std::uint64_t seed, double scale = 0.2) {
    DetectorState s = initialize_detector(grid, seed);
    std::mt19937_64 rng(seed ^ 0xabcdefULL);
    std::normal_distribution<double> n(0.0, scale);
    for (auto& p : s.params) {
        p += n(rng);
    }
    return s;
}

inline SceneGenParams small_scene_params(std::uint64_t seed) {
    SceneGenParams p;
    p.half_extent = 6.0;
    p.placement_margin = 1.0;
    p.min_objects = 2;
    p.max_objects = 4;
    p.agent_spread = 4.0;
    p.clutter_rate = 10.0;
    p.min_distractors = 0;
    p.max_distractors = 1;
    p.seed = seed;
    return p;
}

inline FeatureMap random_scene_features(const AnchorGrid& grid, std::uint64_t seed) {
    const Scene s = generate_scene(small_scene_params(seed), 0);
    return collaborative_features(s, grid);
}

inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

}  // namespace fixture
