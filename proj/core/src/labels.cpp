#include "bevmine/labels.hpp"

#include <algorithm>
#include <unordered_set>

namespace bevmine {

std::string_view to_string(LabelSource source) {
    switch (source) {
        case LabelSource::Sparse:
            return "sparse";
        case LabelSource::PseudoMain:
            return "pseudo_main";
        case LabelSource::PseudoSupp:
            return "pseudo_supp";
        case LabelSource::Neighbor:
            return "neighbor";
    }
    return "unknown";
}

std::optional<LabelSource> label_source_from_string(std::string_view name) {
    for (LabelSource s : kAllLabelSources) {
        if (to_string(s) == name) {
            return s;
        }
    }
    return std::nullopt;
}

int direction_bin(double yaw) { return normalize_angle(yaw) >= 0.0 ? 1 : 0; }

std::size_t LabelSet::count(LabelSource source) const {
    return static_cast<std::size_t>(
        std::count_if(positives.begin(), positives.end(), [&](const LabelEntry& e) { return e.source == source; }));
}

bool LabelSet::valid(std::size_t num_anchors) const {
    std::unordered_set<std::size_t> seen;
    for (const auto& e : positives) {
        if (e.anchor >= num_anchors || !e.target.finite() || (e.direction != 0 && e.direction != 1)) {
            return false;
        }
        if (!seen.insert(e.anchor).second) {
            return false;
        }
    }
    return true;
}

}  // namespace bevmine
