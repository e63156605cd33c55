#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bevmine/detector.hpp"
#include "bevmine/mining.hpp"
#include "bevmine/scenes.hpp"

namespace bevmine {

/// A scene reduced to what training and evaluation consume: fused ego-frame
/// features, ego-frame ground truth and the per-agent sparse annotations.
struct TrainingSample {
    std::string scene_id;
    FeatureMap features;
    std::vector<BoxBEV> gt;
    /// One entry per agent carrying a sparse label (anchors may repeat).
    std::vector<SparseLabel> sparse;

    std::vector<std::size_t> sparse_anchors() const;
};

/// Ego is agent 0. Sparse boxes whose centers fall outside the grid are dropped.
TrainingSample prepare_sample(const Scene& scene, const AnchorGrid& grid);
std::vector<TrainingSample> prepare_dataset(std::span<const Scene> scenes, const AnchorGrid& grid);

enum class Stage { WarmUp, Refinement };
std::string_view to_string(Stage stage);

enum class InferenceModel { DynamicTeacher, Student };

/// Switches used to reproduce the ablation grids.
struct StageOverrides {
    /// Train on sparse labels only (no mining at all).
    bool disable_mining = false;
    bool disable_sfm = false;
    bool disable_nas = false;
    /// Two separately trained phases instead of end-to-end staged training.
    bool disable_stt = false;
    /// Main mining uses sigma_st_high in every iteration.
    bool fixed_sigma_high = false;

    friend bool operator==(const StageOverrides&, const StageOverrides&) = default;
};

enum class Ablation { Full, SparseOnly, MfmOnly, MfmNas, NoStt };
std::string_view to_string(Ablation ablation);
std::optional<Ablation> ablation_from_string(std::string_view name);
StageOverrides overrides_for(Ablation ablation);

struct TrainerConfig {
    MiningConfig mining;
    double alpha = 0.999;
    int i_max = 2000;
    int i_refine = 1000;
    int batch_size = 4;
    int pretrain_iterations = 2000;
    AdamSettings optimizer;
    LossWeights loss;
    std::uint64_t seed = 1;
    StageOverrides overrides;
    InferenceModel inference_model = InferenceModel::DynamicTeacher;

    void validate() const;
};

struct IterationRecord {
    int iter = 0;
    Stage stage = Stage::WarmUp;
    /// 1 for end-to-end runs; 1 or 2 for two-phase runs.
    int phase = 1;
    double loss_total = 0.0;
    double loss_cls = 0.0;
    double loss_reg = 0.0;
    double loss_dir = 0.0;
    std::optional<double> sigma_dt;
    bool sigma_fallback = false;
    /// Merged label counts summed over the batch, indexed by LabelSource.
    std::array<std::size_t, 4> label_counts{};
    /// Grid cells shared between main and supplement positives (must stay 0).
    std::size_t grid_overlap = 0;
    /// Times the dynamic teacher changed other than through ema_update.
    std::size_t teacher_external_writes = 0;
    std::size_t ema_updates = 0;
};

struct TrainRun {
    DetectorState student;
    DetectorState dynamic_teacher;
    DetectorState static_teacher;
    std::vector<IterationRecord> log;
    /// Dynamic teacher as it stood when refinement began (the warm-up result).
    std::optional<DetectorState> warmup_teacher;
    InferenceModel inference_model = InferenceModel::DynamicTeacher;
};

/// Per-scene mining outcome, reported to an optional observer.
struct MiningTrace {
    int iter = 0;
    Stage stage = Stage::WarmUp;
    std::size_t sample = 0;
    const PositiveSet* main = nullptr;
    const PositiveSet* supplement = nullptr;
    const LabelSet* labels = nullptr;
};

struct TrainHooks {
    std::function<void(const MiningTrace&)> on_mining;
    /// Called after every completed iteration with the current student and dynamic teacher.
    std::function<void(const IterationRecord&, const DetectorState&, const DetectorState&)> on_iteration;
};

/// Eq.-6 style two-branch EMA: ramp with 1/iter while 1 - 1/iter < alpha, then alpha.
DetectorState ema_update(const DetectorState& theta_dt, const DetectorState& theta_s, int iter, double alpha);

/// Sparse-label training of a freshly initialized detector.
DetectorState pretrain_static_teacher(std::span<const TrainingSample> corpus, const AnchorGrid& grid,
                                      const TrainerConfig& config);

/// Staged warm-up / refinement training. Throws NumericError on non-finite predictions or loss.
TrainRun train(std::span<const TrainingSample> corpus, const AnchorGrid& grid, const DetectorState& static_teacher,
               const TrainerConfig& config, const TrainHooks& hooks = {});

const DetectorState& select_inference_model(const TrainRun& run);
const DetectorState& select_inference_model(const TrainRun& run, InferenceModel override_model);

/// Labels the trainer would build for one sample, given teacher predictions.
/// `pred_dt` and `sigma_dt` are only used when the supplement miner runs.
struct MinedLabels {
    PositiveSet main;
    PositiveSet supplement;
    std::vector<Neighbor> neighbors;
    LabelSet labels;
};

MinedLabels mine_sample(const TrainingSample& sample, const AnchorGrid& grid, const Prediction& pred_st,
                        double sigma_st, const Prediction* pred_dt, std::optional<double> sigma_dt,
                        const MiningConfig& mining, bool use_nas);

void write_run_log(const std::filesystem::path& path, std::span<const IterationRecord> log);
std::string run_log_line(const IterationRecord& record);

}  // namespace bevmine
