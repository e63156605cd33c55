#include "bevmine/eval.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "bevmine/mining.hpp"

namespace bevmine {

namespace {

constexpr std::array<double, 3> kDefaultIous{0.3, 0.5, 0.7};

std::vector<std::size_t> descending_order(std::span<const Detection> preds) {
    std::vector<std::size_t> order(preds.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });
    return order;
}

using nlohmann::json;

double number_field(const json& obj, const char* key, std::size_t line, const std::string& path) {
    auto it = obj.find(key);
    if (it == obj.end() || !it->is_number()) {
        throw ParseError(line, path + "." + key, "missing or not a number");
    }
    return it->get<double>();
}

LabelEntry entry_from_json(const json& je, std::size_t line, const std::string& path) {
    if (!je.is_object()) {
        throw ParseError(line, path, "expected an object");
    }
    LabelEntry e;
    auto anchor = je.find("anchor");
    if (anchor == je.end() || !anchor->is_number_unsigned()) {
        throw ParseError(line, path + ".anchor", "missing or not a non-negative integer");
    }
    e.anchor = anchor->get<std::size_t>();
    auto source = je.find("source");
    if (source == je.end() || !source->is_string()) {
        throw ParseError(line, path + ".source", "missing or not a string");
    }
    const auto parsed = label_source_from_string(source->get<std::string>());
    if (!parsed) {
        throw ParseError(line, path + ".source", "unknown label source '" + source->get<std::string>() + "'");
    }
    e.source = *parsed;
    e.score = number_field(je, "score", line, path);
    auto direction = je.find("direction");
    if (direction == je.end() || !direction->is_number_integer() || direction->get<int>() < 0 ||
        direction->get<int>() > 1) {
        throw ParseError(line, path + ".direction", "expected 0 or 1");
    }
    e.direction = direction->get<int>();
    auto regress = je.find("regress");
    if (regress == je.end() || !regress->is_boolean()) {
        throw ParseError(line, path + ".regress", "missing or not a boolean");
    }
    e.regress = regress->get<bool>();
    auto box = je.find("box");
    if (box == je.end() || !box->is_object()) {
        throw ParseError(line, path + ".box", "missing or not an object");
    }
    const std::string bp = path + ".box";
    e.box = {number_field(*box, "cx", line, bp), number_field(*box, "cy", line, bp),
             number_field(*box, "length", line, bp), number_field(*box, "width", line, bp),
             number_field(*box, "yaw", line, bp)};
    if (!e.box.valid()) {
        throw ParseError(line, bp, "box has non-positive size or non-finite values");
    }
    auto target = je.find("target");
    if (target == je.end() || !target->is_array() || target->size() != 5) {
        throw ParseError(line, path + ".target", "expected an array of 5 numbers");
    }
    std::array<double, 5> t{};
    for (std::size_t k = 0; k < 5; ++k) {
        if (!(*target)[k].is_number()) {
            throw ParseError(line, path + ".target", "expected an array of 5 numbers");
        }
        t[k] = (*target)[k].get<double>();
    }
    e.target = RegDelta::from_array(t);
    return e;
}

}  // namespace

std::string label_dump_to_json_line(const LabelDump& dump) {
    json entries = json::array();
    for (const auto& e : dump.entries) {
        const auto t = e.target.as_array();
        entries.push_back({{"anchor", e.anchor},
                           {"source", std::string(to_string(e.source))},
                           {"score", e.score},
                           {"direction", e.direction},
                           {"regress", e.regress},
                           {"box",
                            {{"cx", e.box.cx},
                             {"cy", e.box.cy},
                             {"length", e.box.length},
                             {"width", e.box.width},
                             {"yaw", e.box.yaw}}},
                           {"target", t}});
    }
    json j;
    j["scene_id"] = dump.scene_id;
    j["entries"] = std::move(entries);
    return j.dump();
}

LabelDump label_dump_from_json_line(const std::string& line, std::size_t line_number) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::parse_error& e) {
        throw ParseError(line_number, "<record>", std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) {
        throw ParseError(line_number, "<record>", "expected a JSON object");
    }
    LabelDump dump;
    auto id = j.find("scene_id");
    if (id == j.end() || !id->is_string()) {
        throw ParseError(line_number, "scene_id", "missing or not a string");
    }
    dump.scene_id = id->get<std::string>();
    auto entries = j.find("entries");
    if (entries == j.end() || !entries->is_array()) {
        throw ParseError(line_number, "entries", "missing or not an array");
    }
    std::set<std::size_t> anchors;
    for (std::size_t i = 0; i < entries->size(); ++i) {
        const std::string path = "entries[" + std::to_string(i) + "]";
        dump.entries.push_back(entry_from_json((*entries)[i], line_number, path));
        if (!anchors.insert(dump.entries.back().anchor).second) {
            throw ParseError(line_number, path + ".anchor", "duplicate anchor");
        }
    }
    return dump;
}

void save_label_dumps(const std::filesystem::path& path, std::span<const LabelDump> dumps) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    }
    for (const auto& d : dumps) {
        out << label_dump_to_json_line(d) << '\n';
    }
}

std::vector<LabelDump> load_label_dumps(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open '" + path.string() + "' for reading");
    }
    std::vector<LabelDump> dumps;
    std::string line;
    std::size_t line_number = 0;
    while (std::getline(in, line)) {
        ++line_number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        dumps.push_back(label_dump_from_json_line(line, line_number));
    }
    return dumps;
}

std::span<const double> default_iou_thresholds() { return kDefaultIous; }

SceneDetections postprocess(const Prediction& pred, const AnchorGrid& grid, const InferenceSettings& settings) {
    SceneDetections out;
    for (const auto& p : filter_and_suppress(pred, grid, settings.score_threshold, settings.nms_tau,
                                             LabelSource::PseudoMain)) {
        out.push_back({p.box, p.score});
    }
    return out;
}

MatchResult match_predictions(std::span<const Detection> preds, std::span<const BoxBEV> gts, double iou_threshold) {
    MatchResult result;
    result.pred_tp.assign(preds.size(), false);
    result.gt_matched.assign(gts.size(), false);
    for (std::size_t pi : descending_order(preds)) {
        double best_iou = -1.0;
        std::size_t best_gt = gts.size();
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (result.gt_matched[g]) {
                continue;
            }
            const double iou = rotated_iou(preds[pi].box, gts[g]);
            if (iou > best_iou) {
                best_iou = iou;
                best_gt = g;
            }
        }
        if (best_gt < gts.size() && best_iou >= iou_threshold) {
            result.pred_tp[pi] = true;
            result.gt_matched[best_gt] = true;
        }
    }
    return result;
}

ApResult average_precision(std::span<const SceneDetections> results, std::span<const std::vector<BoxBEV>> gts,
                           double iou_threshold) {
    if (results.size() != gts.size()) {
        throw std::invalid_argument("average_precision: one detection list per ground-truth list required");
    }
    struct Ranked {
        double score;
        std::size_t scene;
        std::size_t index;
        bool tp;
    };
    std::vector<Ranked> ranked;
    ApResult out;
    for (std::size_t s = 0; s < results.size(); ++s) {
        out.ground_truths += gts[s].size();
        const MatchResult m = match_predictions(results[s], gts[s], iou_threshold);
        for (std::size_t i = 0; i < results[s].size(); ++i) {
            ranked.push_back({results[s][i].score, s, i, m.pred_tp[i]});
        }
    }
    std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
        if (a.score != b.score) {
            return a.score > b.score;
        }
        if (a.scene != b.scene) {
            return a.scene < b.scene;
        }
        return a.index < b.index;
    });
    for (const auto& r : ranked) {
        (r.tp ? out.true_positives : out.false_positives) += 1;
    }
    if (out.ground_truths == 0) {
        out.no_ground_truth = true;
        out.ap = 0.0;
        return out;
    }

    const std::size_t n = ranked.size();
    std::vector<double> precision(n);
    std::vector<double> recall(n);
    std::size_t tp = 0;
    for (std::size_t i = 0; i < n; ++i) {
        tp += ranked[i].tp ? 1 : 0;
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        recall[i] = static_cast<double>(tp) / static_cast<double>(out.ground_truths);
    }
    for (std::size_t i = n; i-- > 1;) {
        precision[i - 1] = std::max(precision[i - 1], precision[i]);
    }
    double ap = 0.0;
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    out.ap = std::clamp(ap, 0.0, 1.0);
    return out;
}

PseudoLabelQuality pseudo_label_quality(std::span<const LabelDump> dumps, std::span<const std::vector<BoxBEV>> gts,
                                        double iou_threshold) {
    if (dumps.size() != gts.size()) {
        throw std::invalid_argument("pseudo_label_quality: one ground-truth list per dump required");
    }
    PseudoLabelQuality q;
    q.frames = dumps.size();
    for (std::size_t s = 0; s < dumps.size(); ++s) {
        std::vector<Detection> mined;
        for (const auto& e : dumps[s].entries) {
            if (e.source == LabelSource::PseudoMain || e.source == LabelSource::PseudoSupp) {
                mined.push_back({e.box, e.score});
            } else if (e.source == LabelSource::Neighbor) {
                ++q.neighbors;
            }
        }
        const MatchResult m = match_predictions(mined, gts[s], iou_threshold);
        q.pseudo_labels += mined.size();
        q.false_labels += static_cast<std::size_t>(std::count(m.pred_tp.begin(), m.pred_tp.end(), false));
        q.missed += static_cast<std::size_t>(std::count(m.gt_matched.begin(), m.gt_matched.end(), false));
        q.ground_truths += gts[s].size();
    }
    q.no_pseudo_labels = q.pseudo_labels == 0;
    q.fpr = q.no_pseudo_labels ? 0.0 : static_cast<double>(q.false_labels) / static_cast<double>(q.pseudo_labels);
    q.mpr = q.ground_truths == 0 ? 0.0 : static_cast<double>(q.missed) / static_cast<double>(q.ground_truths);
    q.an = q.frames == 0 ? 0.0 : static_cast<double>(q.pseudo_labels) / static_cast<double>(q.frames);
    q.an_neighbors = q.frames == 0 ? 0.0 : static_cast<double>(q.neighbors) / static_cast<double>(q.frames);
    return q;
}

MetricsReport evaluate_detections(std::span<const SceneDetections> results, std::span<const std::vector<BoxBEV>> gts,
                                  std::span<const double> iou_thresholds) {
    if (iou_thresholds.empty()) {
        iou_thresholds = default_iou_thresholds();
    }
    MetricsReport report;
    report.frames = results.size();
    for (const auto& r : results) {
        report.detections += r.size();
    }
    for (double t : iou_thresholds) {
        report.ap[t] = average_precision(results, gts, t);
    }
    return report;
}

}  // namespace bevmine
