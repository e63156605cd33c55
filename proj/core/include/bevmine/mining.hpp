#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "bevmine/detector.hpp"
#include "bevmine/geometry.hpp"
#include "bevmine/labels.hpp"

namespace bevmine {

struct MiningConfig {
    double sigma_st_low = 0.15;
    double sigma_st_high = 0.2;
    double tau = 0.15;
    double tau_nei = 0.6;
    /// Supervise regression on pseudo and neighbour entries (classification only when off).
    bool pseudo_regression = true;

    /// Throws std::invalid_argument when thresholds fall outside (0, 1) or are misordered.
    void validate() const;

    friend bool operator==(const MiningConfig&, const MiningConfig&) = default;
};

/// A mined positive anchor with the teacher's decoded box.
struct Positive {
    std::size_t anchor = 0;
    double score = 0.0;
    BoxBEV box;
    LabelSource source = LabelSource::PseudoMain;
};

using PositiveSet = std::vector<Positive>;

/// Anchors whose sigmoid score exceeds `sigma`, ascending by anchor index.
std::vector<std::size_t> threshold_candidates(const Prediction& pred, double sigma);

/// Score threshold, decode, then NMS with `tau`. Survivors come back in NMS
/// keep order and tagged `source`.
PositiveSet filter_and_suppress(const Prediction& pred, const AnchorGrid& grid, double sigma, double tau,
                                LabelSource source);

/// Main foreground mining on the static teacher's prediction.
PositiveSet mfm(const Prediction& pred, const AnchorGrid& grid, double sigma_st, double tau);

/// Supplement foreground mining: like mfm on the dynamic teacher, then drops
/// every candidate whose grid cell already holds a main-mining positive.
PositiveSet sfm(const Prediction& pred_dt, const AnchorGrid& grid, double sigma_dt, double tau,
                const PositiveSet& r_st);

struct TwoMeans {
    double low_centroid = 0.0;
    double high_centroid = 0.0;
    /// Number of sorted values in the low cluster.
    std::size_t split = 0;
    double sse = 0.0;
};

/// Exact 1-D 2-means: sort, scan every contiguous split and keep the one with
/// minimum within-cluster SSE (earliest split on ties). Requires >= 2 values.
TwoMeans two_means_1d(std::span<const double> values);

struct DynamicThreshold {
    double value = 0.0;
    std::size_t sample_count = 0;
    bool fallback = false;
};

/// High-cluster centroid of the scores. With a single score that score is
/// returned; with none, `fallback_sigma`. Both fallbacks set `fallback`.
DynamicThreshold dynamic_threshold(std::span<const double> scores, double fallback_sigma);

/// Collects the dynamic teacher's sigmoid scores at each scene's sparse anchors
/// (one list per scene in the batch) and thresholds them.
DynamicThreshold dynamic_threshold(std::span<const Prediction* const> batch_predictions,
                                   std::span<const std::vector<std::size_t>> sparse_anchors, double fallback_sigma);

struct Neighbor {
    std::size_t anchor = 0;
    /// Index into the positive set of the best-overlapping box.
    std::size_t parent = 0;
    double iou = 0.0;
};

/// Anchors (template footprint at the cell center) whose best IoU against the
/// positives' decoded boxes exceeds `tau_nei`, excluding the positives' own anchors.
/// Ascending by anchor index.
std::vector<Neighbor> nas(const PositiveSet& positives, const AnchorGrid& grid, double tau_nei);

struct SparseLabel {
    std::size_t anchor = 0;
    BoxBEV box;
};

/// Anchor whose footprint has maximal IoU with `box` (lowest index on ties).
/// Throws std::invalid_argument when the box center lies outside the grid.
std::size_t assign_sparse_anchor(const BoxBEV& box, const AnchorGrid& grid);

/// Regression target for `box` at `anchor`, with the box yaw folded to the
/// anchor's half-plane (a rectangle is unchanged by a rotation of pi).
RegDelta regression_target(const AnchorGrid& grid, std::size_t anchor, const BoxBEV& box);

/// Union of sparse, pseudo and neighbour entries. Collisions on one anchor
/// resolve by priority Sparse > PseudoMain > PseudoSupp > Neighbor.
LabelSet merge_labels(std::span<const SparseLabel> sparse, const PositiveSet& positives,
                      std::span<const Neighbor> neighbors, const AnchorGrid& grid, bool pseudo_regression = true);

/// Number of grid cells shared between two positive sets.
std::size_t shared_cells(const PositiveSet& a, const PositiveSet& b, const AnchorGrid& grid);

}  // namespace bevmine
