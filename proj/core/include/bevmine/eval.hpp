#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "bevmine/detector.hpp"
#include "bevmine/geometry.hpp"
#include "bevmine/labels.hpp"
#include "bevmine/scenes.hpp"

namespace bevmine {

struct Detection {
    BoxBEV box;
    double score = 0.0;
};

/// Detections for one scene.
using SceneDetections = std::vector<Detection>;

struct InferenceSettings {
    double score_threshold = 0.2;
    double nms_tau = 0.15;
};

/// Score-filter, decode and suppress one prediction into detections (descending score).
SceneDetections postprocess(const Prediction& pred, const AnchorGrid& grid, const InferenceSettings& settings = {});

struct MatchResult {
    std::vector<bool> pred_tp;     // aligned with the input predictions
    std::vector<bool> gt_matched;  // aligned with the ground truths
};

/// Greedy matching in descending score order (ties by input order): each
/// prediction takes the unmatched ground truth of highest IoU if that IoU
/// reaches the threshold.
MatchResult match_predictions(std::span<const Detection> preds, std::span<const BoxBEV> gts, double iou_threshold);

struct ApResult {
    double ap = 0.0;
    std::size_t true_positives = 0;
    std::size_t false_positives = 0;
    std::size_t ground_truths = 0;
    /// Set when the corpus has no ground truth; AP is then reported as 0.
    bool no_ground_truth = false;
};

/// All-point interpolated area under the precision/recall curve over the
/// corpus-wide score ranking.
ApResult average_precision(std::span<const SceneDetections> results, std::span<const std::vector<BoxBEV>> gts,
                           double iou_threshold);

/// One scene of mined labels as written by the label dump.
struct LabelDump {
    std::string scene_id;
    std::vector<LabelEntry> entries;
};

std::string label_dump_to_json_line(const LabelDump& dump);
/// Throws ParseError naming the offending field.
LabelDump label_dump_from_json_line(const std::string& line, std::size_t line_number);
void save_label_dumps(const std::filesystem::path& path, std::span<const LabelDump> dumps);
std::vector<LabelDump> load_label_dumps(const std::filesystem::path& path);

struct PseudoLabelQuality {
    double fpr = 0.0;
    double mpr = 0.0;
    /// Mined (main + supplement) labels per frame.
    double an = 0.0;
    /// Neighbour labels per frame, reported separately.
    double an_neighbors = 0.0;
    std::size_t pseudo_labels = 0;
    std::size_t false_labels = 0;
    std::size_t missed = 0;
    std::size_t ground_truths = 0;
    std::size_t neighbors = 0;
    std::size_t frames = 0;
    /// FPR is 0 by convention when nothing was mined.
    bool no_pseudo_labels = false;
};

/// Quality of mined labels against ground truth. Sparse entries are given, not
/// mined, and neighbour entries duplicate their parent's box; neither is
/// counted as a pseudo label.
PseudoLabelQuality pseudo_label_quality(std::span<const LabelDump> dumps, std::span<const std::vector<BoxBEV>> gts,
                                        double iou_threshold = 0.5);

struct MetricsReport {
    std::map<double, ApResult> ap;  // keyed by IoU threshold
    std::size_t frames = 0;
    std::size_t detections = 0;
};

MetricsReport evaluate_detections(std::span<const SceneDetections> results, std::span<const std::vector<BoxBEV>> gts,
                                  std::span<const double> iou_thresholds = std::span<const double>{});

/// 0.3, 0.5 and 0.7.
std::span<const double> default_iou_thresholds();

}  // namespace bevmine
