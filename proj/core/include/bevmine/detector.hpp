#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bevmine/geometry.hpp"
#include "bevmine/labels.hpp"
#include "bevmine/scenes.hpp"

namespace bevmine {

/// Encoder channels: point count, mean x offset, mean y offset (both in units
/// of cell_size, relative to the cell center) and a saturating density.
inline constexpr int kFeatureChannels = 4;
inline constexpr double kDensityScale = 4.0;

struct FeatureMap {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> values;  // (row, col, channel) row-major

    FeatureMap() = default;
    FeatureMap(int h, int w, int c) : height(h), width(w), channels(c), values(static_cast<std::size_t>(h) * w * c) {}

    double& at(int row, int col, int ch) { return values[(static_cast<std::size_t>(row) * width + col) * channels + ch]; }
    double at(int row, int col, int ch) const {
        return values[(static_cast<std::size_t>(row) * width + col) * channels + ch];
    }
    bool same_shape(const FeatureMap& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }

    friend bool operator==(const FeatureMap&, const FeatureMap&) = default;
};

/// Rasterizes the agent's points on `grid`, which is interpreted in the agent frame.
FeatureMap encode(const Agent& agent, const AnchorGrid& grid);

/// Resamples `f` (laid out on `grid` in from_pose's frame) onto the same grid
/// in to_pose's frame using nearest-cell lookup; unmapped cells are zero.
FeatureMap project_feature(const FeatureMap& f, const AnchorGrid& grid, const Pose2D& from_pose,
                           const Pose2D& to_pose);

/// Elementwise maximum. Throws std::invalid_argument on shape mismatch.
FeatureMap fuse_max(const FeatureMap& ego, std::span<const FeatureMap> projected);

/// Encode every agent, project into the ego agent's frame and max-fuse.
FeatureMap collaborative_features(const Scene& scene, const AnchorGrid& grid, std::size_t ego = 0);

inline constexpr int kOutputsPerAnchor = 8;  // cls, 5 regression, 2 direction
inline constexpr int kKernelTaps = 9;        // 3x3 neighbourhood

struct Prediction {
    std::size_t num_anchors = 0;
    std::vector<double> cls;  // [anchor]
    std::vector<double> reg;  // [anchor * 5 + k]
    std::vector<double> dir;  // [anchor * 2 + k]

    Prediction() = default;
    explicit Prediction(std::size_t anchors) : num_anchors(anchors), cls(anchors), reg(anchors * 5), dir(anchors * 2) {}

    RegDelta delta(std::size_t anchor) const {
        const double* r = &reg[anchor * 5];
        return {r[0], r[1], r[2], r[3], r[4]};
    }
    double score(std::size_t anchor) const;
    bool finite() const;

    friend bool operator==(const Prediction&, const Prediction&) = default;
};

struct ParamBlock {
    std::string name;
    std::size_t offset = 0;
    std::size_t size = 0;

    friend bool operator==(const ParamBlock&, const ParamBlock&) = default;
};

struct ParamLayout {
    int channels = kFeatureChannels;
    int anchors_per_cell = 0;
    std::vector<ParamBlock> blocks;

    static ParamLayout for_head(int channels, int anchors_per_cell);
    std::size_t total() const;
    std::size_t inputs() const { return static_cast<std::size_t>(kKernelTaps) * channels; }
    std::size_t outputs() const { return static_cast<std::size_t>(kOutputsPerAnchor) * anchors_per_cell; }

    friend bool operator==(const ParamLayout&, const ParamLayout&) = default;
};

/// Flat parameter vector of the detection head (the encoder is a fixed rasterizer).
struct DetectorState {
    ParamLayout layout;
    std::vector<double> params;

    bool finite() const;
    std::uint64_t fingerprint() const;

    friend bool operator==(const DetectorState&, const DetectorState&) = default;
};

/// Small random weights plus the usual focal-loss prior on the class bias.
DetectorState initialize_detector(const AnchorGrid& grid, std::uint64_t seed, double prior_probability = 0.01);
DetectorState zero_detector(const AnchorGrid& grid);

/// Shared 3x3 affine head applied at every cell (zero padded).
Prediction detect_head(const FeatureMap& fused, const DetectorState& state);

/// Accumulates d(loss)/d(params) given d(loss)/d(prediction).
std::vector<double> detect_head_backward(const FeatureMap& fused, const DetectorState& state,
                                         const Prediction& grad_pred);

struct LossWeights {
    double cls = 1.0;
    double reg = 2.0;
    double dir = 0.2;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
    double smooth_l1_beta = 1.0 / 9.0;
};

struct LossResult {
    double total = 0.0;
    double cls = 0.0;  // weighted terms; total = cls + reg + dir
    double reg = 0.0;
    double dir = 0.0;
    std::size_t num_positives = 0;
    Prediction grad;
};

/// Focal classification over every anchor, smooth-L1 regression and direction
/// cross-entropy on positives, normalized by max(1, #positives).
LossResult supervised_loss(const Prediction& pred, const LabelSet& labels, const AnchorGrid& grid,
                           const LossWeights& weights = {});

struct AdamSettings {
    double lr = 0.002;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamMemory {
    std::vector<double> m;
    std::vector<double> v;
    std::int64_t step = 0;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// One Adam update in place. Throws NumericError on a non-finite gradient and
/// std::invalid_argument on a size mismatch.
void optimizer_step(DetectorState& state, std::span<const double> gradient, AdamMemory& memory,
                    const AdamSettings& settings = {});

/// Identifies the grid and head layout a checkpoint was trained for.
std::uint64_t config_hash(const AnchorGrid& grid, const ParamLayout& layout);
std::string hash_hex(std::uint64_t hash);

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void save_checkpoint(const std::filesystem::path& path, const DetectorState& state, const AnchorGrid& grid);
/// Throws CheckpointError when the file is unreadable or was written for a different grid/layout.
DetectorState load_checkpoint(const std::filesystem::path& path, const AnchorGrid& grid);

}  // namespace bevmine
