#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "bevmine/eval.hpp"
#include "bevmine/geometry.hpp"
#include "bevmine/scenes.hpp"
#include "bevmine/trainer.hpp"

namespace bevmine::app {

/// Bad config text or values. Carries the 1-based line when one applies.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& message) : std::runtime_error(message) {}
};

struct GridConfig {
    int height = 25;
    int width = 25;
    double cell_size = 1.6;
    double origin_x = -20.0;
    double origin_y = -20.0;
    double anchor_length = 4.1;
    double anchor_width = 1.8;
    std::vector<double> anchor_yaws{0.0, kPi / 2.0};

    AnchorGrid build() const;
};

struct DataConfig {
    int train_scenes = 240;
    int val_scenes = 200;
};

struct EvalConfig {
    double score_threshold = 0.2;
    double nms_tau = 0.15;
    std::vector<double> iou_thresholds{0.3, 0.5, 0.7};
    double pseudo_iou = 0.5;

    InferenceSettings inference() const { return {score_threshold, nms_tau}; }
};

/// Everything a command needs. Field names match the config keys.
struct RunConfig {
    SceneGenParams scenes;
    DataConfig data;
    GridConfig grid;

    MiningConfig mining;
    double alpha = 0.999;
    int i_max = 6000;
    /// Negative means half of i_max.
    int i_refine = -1;
    int batch_size = 4;
    int pretrain_iterations = 6000;
    AdamSettings optimizer;
    LossWeights loss;
    std::uint64_t train_seed = 1;
    std::string ablation = "full";
    std::string inference_model = "dynamic_teacher";
    /// 0 writes final checkpoints only.
    int checkpoint_interval = 0;

    EvalConfig eval;
    std::vector<double> mine_sweep{0.15, 0.2, 0.25, 0.3};

    /// Fills derived defaults and checks every component invariant.
    void finalize();
    TrainerConfig trainer() const;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Shortest round-trip decimal form, always with a fraction or exponent.
std::string format_number(double value);

/// Canonical text form; parse_config(to_toml(c)) reproduces c.
std::string to_toml(const RunConfig& config);
/// Same fields as to_toml, grouped by section.
nlohmann::json to_json(const RunConfig& config);

}  // namespace bevmine::app
