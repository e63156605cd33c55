#include "bevmine/mining.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <unordered_set>

namespace bevmine {

namespace {

struct CellRange {
    int row_lo, row_hi, col_lo, col_hi;
};

/// Cells whose anchors could overlap a disc of `radius` around `center`.
CellRange cells_near(const AnchorGrid& grid, Vec2 center, double radius) {
    double template_reach = 0.0;
    for (const auto& t : grid.templates()) {
        template_reach = std::max(template_reach, 0.5 * std::hypot(t.length, t.width));
    }
    const double r = radius + template_reach;
    const double cs = grid.cell_size();
    auto clamp_index = [](double v, int hi) { return static_cast<int>(std::clamp(v, 0.0, static_cast<double>(hi))); };
    return {clamp_index(std::floor((center.y - r - grid.origin().y) / cs), grid.height_cells() - 1),
            clamp_index(std::floor((center.y + r - grid.origin().y) / cs), grid.height_cells() - 1),
            clamp_index(std::floor((center.x - r - grid.origin().x) / cs), grid.width_cells() - 1),
            clamp_index(std::floor((center.x + r - grid.origin().x) / cs), grid.width_cells() - 1)};
}

double clamp_centroid(double base, double sum_shifted, std::size_t count, double lo, double hi) {
    return std::clamp(base + sum_shifted / static_cast<double>(count), lo, hi);
}

}  // namespace

void MiningConfig::validate() const {
    auto in_unit = [](double v) { return v > 0.0 && v < 1.0; };
    if (!in_unit(sigma_st_low) || !in_unit(sigma_st_high) || !(sigma_st_low < sigma_st_high)) {
        throw std::invalid_argument("MiningConfig: need 0 < sigma_st_low < sigma_st_high < 1");
    }
    if (!in_unit(tau) || !in_unit(tau_nei)) {
        throw std::invalid_argument("MiningConfig: tau and tau_nei must lie in (0, 1)");
    }
}

std::vector<std::size_t> threshold_candidates(const Prediction& pred, double sigma) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < pred.num_anchors; ++i) {
        if (pred.score(i) > sigma) {
            out.push_back(i);
        }
    }
    return out;
}

PositiveSet filter_and_suppress(const Prediction& pred, const AnchorGrid& grid, double sigma, double tau,
                                LabelSource source) {
    if (pred.num_anchors != grid.num_anchors()) {
        throw std::invalid_argument("mining: prediction does not match the anchor grid");
    }
    const auto candidates = threshold_candidates(pred, sigma);
    std::vector<ScoredBox> boxes;
    boxes.reserve(candidates.size());
    for (std::size_t anchor : candidates) {
        boxes.push_back({decode_box(grid.anchor_box(anchor), pred.delta(anchor)), pred.score(anchor), anchor});
    }
    PositiveSet out;
    for (std::size_t k : nms(boxes, tau)) {
        out.push_back({boxes[k].key, boxes[k].score, boxes[k].box, source});
    }
    return out;
}

PositiveSet mfm(const Prediction& pred, const AnchorGrid& grid, double sigma_st, double tau) {
    return filter_and_suppress(pred, grid, sigma_st, tau, LabelSource::PseudoMain);
}

PositiveSet sfm(const Prediction& pred_dt, const AnchorGrid& grid, double sigma_dt, double tau,
                const PositiveSet& r_st) {
    std::unordered_set<std::size_t> taken;
    for (const auto& p : r_st) {
        taken.insert(grid.cell_of(p.anchor));
    }
    PositiveSet out;
    for (auto& p : filter_and_suppress(pred_dt, grid, sigma_dt, tau, LabelSource::PseudoSupp)) {
        if (!taken.contains(grid.cell_of(p.anchor))) {
            out.push_back(p);
        }
    }
    return out;
}

TwoMeans two_means_1d(std::span<const double> values) {
    if (values.size() < 2) {
        throw std::invalid_argument("two_means_1d: need at least two values");
    }
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    const double shift = sorted.front();

    std::vector<long double> s1(n + 1, 0.0L);
    std::vector<long double> s2(n + 1, 0.0L);
    for (std::size_t i = 0; i < n; ++i) {
        const long double v = static_cast<long double>(sorted[i]) - shift;
        s1[i + 1] = s1[i] + v;
        s2[i + 1] = s2[i] + v * v;
    }
    auto segment_sse = [&](std::size_t lo, std::size_t hi) {
        const long double cnt = static_cast<long double>(hi - lo);
        const long double sum = s1[hi] - s1[lo];
        const long double sse = (s2[hi] - s2[lo]) - sum * sum / cnt;
        return std::max(sse, 0.0L);
    };

    std::size_t best_split = 1;
    long double best = segment_sse(0, 1) + segment_sse(1, n);
    for (std::size_t k = 2; k < n; ++k) {
        const long double sse = segment_sse(0, k) + segment_sse(k, n);
        if (sse < best) {
            best = sse;
            best_split = k;
        }
    }

    TwoMeans result;
    result.split = best_split;
    result.sse = static_cast<double>(best);
    double low_sum = 0.0;
    for (std::size_t i = 0; i < best_split; ++i) {
        low_sum += sorted[i] - sorted[0];
    }
    double high_sum = 0.0;
    for (std::size_t i = best_split; i < n; ++i) {
        high_sum += sorted[i] - sorted[best_split];
    }
    result.low_centroid = clamp_centroid(sorted[0], low_sum, best_split, sorted[0], sorted[best_split - 1]);
    result.high_centroid = clamp_centroid(sorted[best_split], high_sum, n - best_split, sorted[best_split], sorted[n - 1]);
    return result;
}

DynamicThreshold dynamic_threshold(std::span<const double> scores, double fallback_sigma) {
    DynamicThreshold out;
    out.sample_count = scores.size();
    if (scores.empty()) {
        out.value = fallback_sigma;
        out.fallback = true;
    } else if (scores.size() == 1) {
        out.value = scores.front();
        out.fallback = true;
    } else {
        out.value = two_means_1d(scores).high_centroid;
    }
    return out;
}

DynamicThreshold dynamic_threshold(std::span<const Prediction* const> batch_predictions,
                                   std::span<const std::vector<std::size_t>> sparse_anchors, double fallback_sigma) {
    if (batch_predictions.size() != sparse_anchors.size()) {
        throw std::invalid_argument("dynamic_threshold: one sparse anchor list per prediction required");
    }
    std::vector<double> scores;
    for (std::size_t s = 0; s < batch_predictions.size(); ++s) {
        for (std::size_t anchor : sparse_anchors[s]) {
            scores.push_back(batch_predictions[s]->score(anchor));
        }
    }
    return dynamic_threshold(scores, fallback_sigma);
}

std::vector<Neighbor> nas(const PositiveSet& positives, const AnchorGrid& grid, double tau_nei) {
    std::unordered_set<std::size_t> positive_anchors;
    for (const auto& p : positives) {
        positive_anchors.insert(p.anchor);
    }
    std::map<std::size_t, Neighbor> best;
    const std::size_t a_per_cell = grid.anchors_per_cell();
    for (std::size_t pi = 0; pi < positives.size(); ++pi) {
        const BoxBEV& box = positives[pi].box;
        const CellRange range = cells_near(grid, {box.cx, box.cy}, box.circumradius());
        for (int r = range.row_lo; r <= range.row_hi; ++r) {
            for (int c = range.col_lo; c <= range.col_hi; ++c) {
                for (std::size_t slot = 0; slot < a_per_cell; ++slot) {
                    const std::size_t anchor = grid.anchor_index({r, c}, slot);
                    const double iou = rotated_iou(grid.anchor_box(anchor), box);
                    if (iou <= 0.0) {
                        continue;
                    }
                    auto it = best.find(anchor);
                    if (it == best.end()) {
                        best.emplace(anchor, Neighbor{anchor, pi, iou});
                    } else if (iou > it->second.iou) {
                        it->second = Neighbor{anchor, pi, iou};
                    }
                }
            }
        }
    }
    std::vector<Neighbor> out;
    for (const auto& [anchor, n] : best) {
        if (n.iou > tau_nei && !positive_anchors.contains(anchor)) {
            out.push_back(n);
        }
    }
    return out;
}

std::size_t assign_sparse_anchor(const BoxBEV& box, const AnchorGrid& grid) {
    if (!box.valid()) {
        throw std::invalid_argument("assign_sparse_anchor: invalid box");
    }
    if (!grid.contains({box.cx, box.cy})) {
        throw std::invalid_argument("assign_sparse_anchor: box center lies outside the grid");
    }
    const CellRange range = cells_near(grid, {box.cx, box.cy}, box.circumradius());
    std::size_t best_anchor = 0;
    double best_iou = 0.0;
    for (int r = range.row_lo; r <= range.row_hi; ++r) {
        for (int c = range.col_lo; c <= range.col_hi; ++c) {
            for (std::size_t slot = 0; slot < grid.anchors_per_cell(); ++slot) {
                const std::size_t anchor = grid.anchor_index({r, c}, slot);
                const double iou = rotated_iou(grid.anchor_box(anchor), box);
                if (iou > best_iou) {
                    best_iou = iou;
                    best_anchor = anchor;
                }
            }
        }
    }
    // No overlap anywhere: every anchor ties at zero and the lowest index wins.
    return best_iou > 0.0 ? best_anchor : 0;
}

RegDelta regression_target(const AnchorGrid& grid, std::size_t anchor, const BoxBEV& box) {
    const BoxBEV anchor_box = grid.anchor_box(anchor);
    return encode_box(anchor_box, fold_yaw(box, anchor_box.yaw));
}

LabelSet merge_labels(std::span<const SparseLabel> sparse, const PositiveSet& positives,
                      std::span<const Neighbor> neighbors, const AnchorGrid& grid, bool pseudo_regression) {
    std::map<std::size_t, LabelEntry> merged;
    auto offer = [&](LabelEntry entry) {
        auto it = merged.find(entry.anchor);
        if (it == merged.end()) {
            merged.emplace(entry.anchor, std::move(entry));
        } else if (static_cast<int>(entry.source) < static_cast<int>(it->second.source)) {
            it->second = std::move(entry);
        }
    };
    for (const auto& s : sparse) {
        if (s.anchor >= grid.num_anchors()) {
            throw std::out_of_range("merge_labels: sparse label anchor outside the grid");
        }
        offer({s.anchor, regression_target(grid, s.anchor, s.box), direction_bin(s.box.yaw), LabelSource::Sparse, true,
               1.0, s.box});
    }
    for (const auto& p : positives) {
        offer({p.anchor, regression_target(grid, p.anchor, p.box), direction_bin(p.box.yaw), p.source,
               pseudo_regression, p.score, p.box});
    }
    for (const auto& n : neighbors) {
        const Positive& parent = positives.at(n.parent);
        offer({n.anchor, regression_target(grid, n.anchor, parent.box), direction_bin(parent.box.yaw),
               LabelSource::Neighbor, pseudo_regression, parent.score, parent.box});
    }
    LabelSet out;
    out.positives.reserve(merged.size());
    for (auto& [anchor, entry] : merged) {
        out.positives.push_back(std::move(entry));
    }
    return out;
}

std::size_t shared_cells(const PositiveSet& a, const PositiveSet& b, const AnchorGrid& grid) {
    std::unordered_set<std::size_t> cells_a;
    for (const auto& p : a) {
        cells_a.insert(grid.cell_of(p.anchor));
    }
    std::unordered_set<std::size_t> shared;
    for (const auto& p : b) {
        const std::size_t cell = grid.cell_of(p.anchor);
        if (cells_a.contains(cell)) {
            shared.insert(cell);
        }
    }
    return shared.size();
}

}  // namespace bevmine
