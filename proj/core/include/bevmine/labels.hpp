#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string_view>
#include <vector>

#include "bevmine/geometry.hpp"

namespace bevmine {

/// Ordered by merge priority: a lower value wins an anchor collision.
enum class LabelSource { Sparse = 0, PseudoMain = 1, PseudoSupp = 2, Neighbor = 3 };

inline constexpr std::array<LabelSource, 4> kAllLabelSources{LabelSource::Sparse, LabelSource::PseudoMain,
                                                             LabelSource::PseudoSupp, LabelSource::Neighbor};

std::string_view to_string(LabelSource source);
std::optional<LabelSource> label_source_from_string(std::string_view name);

/// Heading bin used by the two-logit direction head: 1 for yaw in [0, pi), else 0.
int direction_bin(double yaw);

struct LabelEntry {
    std::size_t anchor = 0;
    RegDelta target;
    int direction = 0;
    LabelSource source = LabelSource::Sparse;
    /// When false only classification is supervised for this anchor.
    bool regress = true;
    /// Teacher score (1 for sparse entries) and the box the target encodes;
    /// carried for dumps and auditing.
    double score = 1.0;
    BoxBEV box;
};

/// Positive anchors; every anchor not listed is a negative.
struct LabelSet {
    std::vector<LabelEntry> positives;

    std::size_t count(LabelSource source) const;
    bool valid(std::size_t num_anchors) const;
};

}  // namespace bevmine
