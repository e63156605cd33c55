#include "bevmine/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "bevmine/rng.hpp"

namespace bevmine {

namespace {

constexpr std::uint64_t kStudentStream = 1;
constexpr std::uint64_t kStaticStream = 2;
constexpr std::uint64_t kSamplerStream = 3;
constexpr std::uint64_t kPhaseTwoStream = 4;

/// Epoch-wise shuffled batches.
class BatchSampler {
public:
    BatchSampler(std::size_t corpus_size, std::size_t batch_size, std::uint64_t seed)
        : order_(corpus_size), batch_size_(std::min(batch_size, corpus_size)), rng_(seed) {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        reshuffle();
    }

    std::vector<std::size_t> next() {
        std::vector<std::size_t> batch;
        while (batch.size() < batch_size_) {
            if (cursor_ == order_.size()) {
                reshuffle();
            }
            batch.push_back(order_[cursor_++]);
        }
        return batch;
    }

private:
    void reshuffle() {
        std::shuffle(order_.begin(), order_.end(), rng_);
        cursor_ = 0;
    }

    std::vector<std::size_t> order_;
    std::size_t batch_size_;
    std::size_t cursor_ = 0;
    std::mt19937_64 rng_;
};

/// Lazily evaluated predictions of a detector that never changes during the run.
class FrozenPredictions {
public:
    FrozenPredictions(std::span<const TrainingSample> corpus, const DetectorState& state)
        : corpus_(corpus), state_(state), cache_(corpus.size()) {}

    const Prediction& at(std::size_t sample) {
        auto& slot = cache_[sample];
        if (!slot) {
            slot = detect_head(corpus_[sample].features, state_);
            if (!slot->finite()) {
                throw NumericError("non-finite teacher prediction on scene " + corpus_[sample].scene_id);
            }
        }
        return *slot;
    }

private:
    std::span<const TrainingSample> corpus_;
    const DetectorState& state_;
    std::vector<std::optional<Prediction>> cache_;
};

/// Main-mining results on the static teacher, cached per (sample, threshold).
class MainMiningCache {
public:
    MainMiningCache(FrozenPredictions& predictions, const AnchorGrid& grid, std::size_t corpus_size, double tau)
        : predictions_(predictions), grid_(grid), tau_(tau), low_(corpus_size), high_(corpus_size) {}

    const PositiveSet& get(std::size_t sample, double sigma, bool high) {
        auto& slot = high ? high_[sample] : low_[sample];
        if (!slot) {
            slot = mfm(predictions_.at(sample), grid_, sigma, tau_);
        }
        return *slot;
    }

private:
    FrozenPredictions& predictions_;
    const AnchorGrid& grid_;
    double tau_;
    std::vector<std::optional<PositiveSet>> low_;
    std::vector<std::optional<PositiveSet>> high_;
};

/// Which labels the loop builds and where the supplement teacher comes from.
struct LoopSpec {
    int first_iter = 0;
    int iterations = 0;
    /// Iterations with index >= refine_from run the refinement branch.
    int refine_from = 0;
    int phase = 1;
    bool ema_teacher = true;
    /// When set, supplement mining reads this frozen detector instead of the EMA teacher.
    FrozenPredictions* frozen_supplement = nullptr;
};

struct LoopState {
    DetectorState student;
    AdamMemory adam;
    DetectorState teacher;
    std::uint64_t teacher_fingerprint = 0;
    std::size_t ema_updates = 0;
    std::size_t external_writes = 0;
};

void run_loop(std::span<const TrainingSample> corpus, const AnchorGrid& grid, const TrainerConfig& config,
              MainMiningCache& main_cache, BatchSampler& sampler, LoopState& st, const LoopSpec& spec,
              const TrainHooks& hooks, TrainRun& run) {
    const auto& ov = config.overrides;
    const auto& mining = config.mining;
    for (int k = 0; k < spec.iterations; ++k) {
        const int iter = spec.first_iter + k;
        const Stage stage = iter < spec.refine_from ? Stage::WarmUp : Stage::Refinement;
        if (stage == Stage::Refinement && !run.warmup_teacher && spec.phase == 1) {
            run.warmup_teacher = st.teacher;
        }
        const auto batch = sampler.next();

        IterationRecord rec;
        rec.iter = iter;
        rec.stage = stage;
        rec.phase = spec.phase;

        const bool supplement = !ov.disable_mining && !ov.disable_sfm && stage == Stage::Refinement;
        std::vector<Prediction> teacher_preds;
        std::vector<const Prediction*> teacher_ptrs;
        std::optional<double> sigma_dt;
        if (supplement) {
            std::vector<std::vector<std::size_t>> anchors;
            for (std::size_t s : batch) {
                if (spec.frozen_supplement != nullptr) {
                    teacher_ptrs.push_back(&spec.frozen_supplement->at(s));
                } else {
                    teacher_preds.push_back(detect_head(corpus[s].features, st.teacher));
                    if (!teacher_preds.back().finite()) {
                        throw NumericError("non-finite dynamic teacher prediction at iteration " +
                                           std::to_string(iter));
                    }
                }
                anchors.push_back(corpus[s].sparse_anchors());
            }
            if (spec.frozen_supplement == nullptr) {
                for (const auto& p : teacher_preds) {
                    teacher_ptrs.push_back(&p);
                }
            }
            const DynamicThreshold dt = dynamic_threshold(teacher_ptrs, anchors, mining.sigma_st_high);
            if (dt.fallback) {
                spdlog::debug("iteration {}: dynamic threshold fell back with {} sparse scores", iter,
                              dt.sample_count);
            }
            sigma_dt = dt.value;
            rec.sigma_dt = dt.value;
            rec.sigma_fallback = dt.fallback;
        }

        std::vector<double> grad(st.student.params.size(), 0.0);
        const double inv_batch = 1.0 / static_cast<double>(batch.size());
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const std::size_t s = batch[b];
            const TrainingSample& sample = corpus[s];
            MinedLabels mined;
            if (ov.disable_mining) {
                mined.labels = merge_labels(sample.sparse, {}, {}, grid, mining.pseudo_regression);
            } else {
                const bool high = stage == Stage::Refinement || ov.fixed_sigma_high;
                const double sigma_st = high ? mining.sigma_st_high : mining.sigma_st_low;
                mined.main = main_cache.get(s, sigma_st, high);
                if (supplement) {
                    mined.supplement = sfm(*teacher_ptrs[b], grid, *sigma_dt, mining.tau, mined.main);
                }
                PositiveSet all = mined.main;
                all.insert(all.end(), mined.supplement.begin(), mined.supplement.end());
                if (!ov.disable_nas) {
                    mined.neighbors = nas(all, grid, mining.tau_nei);
                }
                mined.labels = merge_labels(sample.sparse, all, mined.neighbors, grid, mining.pseudo_regression);
                rec.grid_overlap += shared_cells(mined.main, mined.supplement, grid);
            }
            if (hooks.on_mining) {
                hooks.on_mining({iter, stage, s, &mined.main, &mined.supplement, &mined.labels});
            }
            for (const auto& e : mined.labels.positives) {
                ++rec.label_counts[static_cast<std::size_t>(e.source)];
            }

            const Prediction pred = detect_head(sample.features, st.student);
            if (!pred.finite()) {
                throw NumericError("non-finite student prediction at iteration " + std::to_string(iter));
            }
            const LossResult loss = supervised_loss(pred, mined.labels, grid, config.loss);
            if (!std::isfinite(loss.total)) {
                spdlog::error("non-finite loss at iteration {} (scene {})", iter, sample.scene_id);
                throw NumericError("non-finite loss at iteration " + std::to_string(iter));
            }
            rec.loss_total += loss.total * inv_batch;
            rec.loss_cls += loss.cls * inv_batch;
            rec.loss_reg += loss.reg * inv_batch;
            rec.loss_dir += loss.dir * inv_batch;
            const auto g = detect_head_backward(sample.features, st.student, loss.grad);
            for (std::size_t i = 0; i < grad.size(); ++i) {
                grad[i] += g[i] * inv_batch;
            }
        }

        optimizer_step(st.student, grad, st.adam, config.optimizer);

        if (spec.ema_teacher) {
            if (st.ema_updates > 0 && st.teacher.fingerprint() != st.teacher_fingerprint) {
                ++st.external_writes;
            }
            st.teacher = ema_update(st.teacher, st.student, k + 1, config.alpha);
            st.teacher_fingerprint = st.teacher.fingerprint();
            ++st.ema_updates;
        }
        rec.ema_updates = st.ema_updates;
        rec.teacher_external_writes = st.external_writes;
        run.log.push_back(rec);
        if (hooks.on_iteration) {
            hooks.on_iteration(rec, st.student, st.teacher);
        }
    }
}

}  // namespace

std::vector<std::size_t> TrainingSample::sparse_anchors() const {
    std::vector<std::size_t> out;
    out.reserve(sparse.size());
    for (const auto& s : sparse) {
        out.push_back(s.anchor);
    }
    return out;
}

TrainingSample prepare_sample(const Scene& scene, const AnchorGrid& grid) {
    if (scene.agents.empty()) {
        throw std::invalid_argument("prepare_sample: scene '" + scene.scene_id + "' has no agents");
    }
    TrainingSample sample;
    sample.scene_id = scene.scene_id;
    sample.features = collaborative_features(scene, grid, 0);
    const Pose2D world{};
    const Pose2D& ego = scene.agents.front().pose;
    for (const auto& obj : scene.gt_boxes) {
        const BoxBEV box = se2_transform(obj.box, world, ego);
        if (grid.contains({box.cx, box.cy})) {
            sample.gt.push_back(box);
        }
    }
    for (const auto& agent : scene.agents) {
        if (!agent.sparse_label) {
            continue;
        }
        const GtObject* obj = scene.find_object(*agent.sparse_label);
        if (obj == nullptr) {
            throw std::invalid_argument("prepare_sample: sparse label references unknown object");
        }
        const BoxBEV box = se2_transform(obj->box, world, ego);
        if (grid.contains({box.cx, box.cy})) {
            sample.sparse.push_back({assign_sparse_anchor(box, grid), box});
        }
    }
    return sample;
}

std::vector<TrainingSample> prepare_dataset(std::span<const Scene> scenes, const AnchorGrid& grid) {
    std::vector<TrainingSample> out;
    out.reserve(scenes.size());
    for (const auto& scene : scenes) {
        out.push_back(prepare_sample(scene, grid));
    }
    return out;
}

std::string_view to_string(Stage stage) { return stage == Stage::WarmUp ? "warm_up" : "refinement"; }

std::string_view to_string(Ablation ablation) {
    switch (ablation) {
        case Ablation::Full:
            return "full";
        case Ablation::SparseOnly:
            return "sparse-only";
        case Ablation::MfmOnly:
            return "mfm-only";
        case Ablation::MfmNas:
            return "mfm-nas";
        case Ablation::NoStt:
            return "no-stt";
    }
    return "full";
}

std::optional<Ablation> ablation_from_string(std::string_view name) {
    for (Ablation a : {Ablation::Full, Ablation::SparseOnly, Ablation::MfmOnly, Ablation::MfmNas, Ablation::NoStt}) {
        if (to_string(a) == name) {
            return a;
        }
    }
    return std::nullopt;
}

StageOverrides overrides_for(Ablation ablation) {
    StageOverrides o;
    switch (ablation) {
        case Ablation::Full:
            break;
        case Ablation::SparseOnly:
            o.disable_mining = true;
            break;
        case Ablation::MfmOnly:
            o.disable_sfm = true;
            o.disable_nas = true;
            o.fixed_sigma_high = true;
            break;
        case Ablation::MfmNas:
            o.disable_sfm = true;
            o.fixed_sigma_high = true;
            break;
        case Ablation::NoStt:
            o.disable_stt = true;
            break;
    }
    return o;
}

void TrainerConfig::validate() const {
    mining.validate();
    if (!(alpha > 0.0 && alpha < 1.0)) {
        throw std::invalid_argument("TrainerConfig: alpha must lie in (0, 1)");
    }
    if (i_max < 0 || i_refine <= 0 || i_refine > i_max) {
        throw std::invalid_argument("TrainerConfig: need 0 < i_refine <= i_max");
    }
    if (batch_size <= 0) {
        throw std::invalid_argument("TrainerConfig: batch_size must be positive");
    }
    if (pretrain_iterations < 0) {
        throw std::invalid_argument("TrainerConfig: pretrain_iterations must be non-negative");
    }
    if (!(optimizer.lr > 0.0)) {
        throw std::invalid_argument("TrainerConfig: learning rate must be positive");
    }
}

DetectorState ema_update(const DetectorState& theta_dt, const DetectorState& theta_s, int iter, double alpha) {
    if (iter < 1) {
        throw std::invalid_argument("ema_update: iteration counter starts at 1");
    }
    if (theta_dt.layout != theta_s.layout || theta_dt.params.size() != theta_s.params.size()) {
        throw std::invalid_argument("ema_update: teacher and student layouts differ");
    }
    const double ramp = 1.0 - 1.0 / static_cast<double>(iter);
    const double keep = ramp < alpha ? ramp : alpha;
    const double take = ramp < alpha ? 1.0 / static_cast<double>(iter) : 1.0 - alpha;
    DetectorState out = theta_dt;
    for (std::size_t i = 0; i < out.params.size(); ++i) {
        out.params[i] = keep * theta_dt.params[i] + take * theta_s.params[i];
    }
    return out;
}

DetectorState pretrain_static_teacher(std::span<const TrainingSample> corpus, const AnchorGrid& grid,
                                      const TrainerConfig& config) {
    DetectorState state = initialize_detector(grid, derive_seed(config.seed, kStaticStream));
    if (config.pretrain_iterations == 0 || corpus.empty()) {
        return state;
    }
    TrainerConfig sparse_cfg = config;
    sparse_cfg.overrides = overrides_for(Ablation::SparseOnly);
    FrozenPredictions unused(corpus, state);
    MainMiningCache cache(unused, grid, corpus.size(), config.mining.tau);
    BatchSampler sampler(corpus.size(), static_cast<std::size_t>(config.batch_size),
                         derive_seed(config.seed, kSamplerStream, kStaticStream));
    LoopState st{state, {}, state};
    TrainRun scratch;
    LoopSpec spec;
    spec.iterations = config.pretrain_iterations;
    spec.refine_from = config.pretrain_iterations;
    spec.ema_teacher = false;
    run_loop(corpus, grid, sparse_cfg, cache, sampler, st, spec, {}, scratch);
    return st.student;
}

MinedLabels mine_sample(const TrainingSample& sample, const AnchorGrid& grid, const Prediction& pred_st,
                        double sigma_st, const Prediction* pred_dt, std::optional<double> sigma_dt,
                        const MiningConfig& mining, bool use_nas) {
    MinedLabels out;
    out.main = mfm(pred_st, grid, sigma_st, mining.tau);
    if (pred_dt != nullptr && sigma_dt) {
        out.supplement = sfm(*pred_dt, grid, *sigma_dt, mining.tau, out.main);
    }
    PositiveSet all = out.main;
    all.insert(all.end(), out.supplement.begin(), out.supplement.end());
    if (use_nas) {
        out.neighbors = nas(all, grid, mining.tau_nei);
    }
    out.labels = merge_labels(sample.sparse, all, out.neighbors, grid, mining.pseudo_regression);
    return out;
}

TrainRun train(std::span<const TrainingSample> corpus, const AnchorGrid& grid, const DetectorState& static_teacher,
               const TrainerConfig& config, const TrainHooks& hooks) {
    config.validate();
    if (corpus.empty()) {
        throw std::invalid_argument("train: corpus is empty");
    }
    TrainRun run;
    run.static_teacher = static_teacher;
    run.inference_model = config.overrides.disable_stt ? InferenceModel::Student : config.inference_model;

    FrozenPredictions static_preds(corpus, static_teacher);
    MainMiningCache main_cache(static_preds, grid, corpus.size(), config.mining.tau);
    BatchSampler sampler(corpus.size(), static_cast<std::size_t>(config.batch_size),
                         derive_seed(config.seed, kSamplerStream));

    DetectorState student = initialize_detector(grid, derive_seed(config.seed, kStudentStream));
    LoopState st{student, {}, student};

    if (!config.overrides.disable_stt) {
        LoopSpec spec;
        spec.iterations = config.i_max;
        spec.refine_from = config.i_refine;
        run_loop(corpus, grid, config, main_cache, sampler, st, spec, hooks, run);
        run.student = std::move(st.student);
        run.dynamic_teacher = std::move(st.teacher);
        return run;
    }

    // Two separately trained phases: warm-up labels train a student/teacher
    // pair, then a fresh student learns from the static teacher plus the frozen
    // phase-one teacher.
    const int phase_one = config.i_max / 2;
    LoopSpec first;
    first.iterations = phase_one;
    first.refine_from = phase_one;
    run_loop(corpus, grid, config, main_cache, sampler, st, first, hooks, run);
    const DetectorState phase_one_teacher = st.teacher;
    run.warmup_teacher = phase_one_teacher;

    FrozenPredictions supplement_preds(corpus, phase_one_teacher);
    LoopState second{initialize_detector(grid, derive_seed(config.seed, kPhaseTwoStream)), {}, phase_one_teacher};
    LoopSpec spec2;
    spec2.first_iter = phase_one;
    spec2.iterations = config.i_max - phase_one;
    spec2.refine_from = phase_one;
    spec2.phase = 2;
    spec2.ema_teacher = false;
    spec2.frozen_supplement = &supplement_preds;
    run_loop(corpus, grid, config, main_cache, sampler, second, spec2, hooks, run);
    run.student = std::move(second.student);
    run.dynamic_teacher = phase_one_teacher;
    return run;
}

const DetectorState& select_inference_model(const TrainRun& run) {
    return select_inference_model(run, run.inference_model);
}

const DetectorState& select_inference_model(const TrainRun& run, InferenceModel override_model) {
    return override_model == InferenceModel::Student ? run.student : run.dynamic_teacher;
}

std::string run_log_line(const IterationRecord& r) {
    nlohmann::json j;
    j["iter"] = r.iter;
    j["stage"] = std::string(to_string(r.stage));
    j["phase"] = r.phase;
    j["loss"] = {{"total", r.loss_total}, {"cls", r.loss_cls}, {"reg", r.loss_reg}, {"dir", r.loss_dir}};
    j["sigma_dt"] = r.sigma_dt ? nlohmann::json(*r.sigma_dt) : nlohmann::json(nullptr);
    j["sigma_dt_fallback"] = r.sigma_fallback;
    nlohmann::json counts;
    for (LabelSource s : kAllLabelSources) {
        counts[std::string(to_string(s))] = r.label_counts[static_cast<std::size_t>(s)];
    }
    j["counts"] = std::move(counts);
    j["grid_overlap"] = r.grid_overlap;
    j["ema_updates"] = r.ema_updates;
    j["teacher_external_writes"] = r.teacher_external_writes;
    return j.dump();
}

void write_run_log(const std::filesystem::path& path, std::span<const IterationRecord> log) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    }
    for (const auto& r : log) {
        out << run_log_line(r) << '\n';
    }
}

}  // namespace bevmine
