#include "bevmine/app/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "bevmine/app/config.hpp"
#include "bevmine/detector.hpp"
#include "bevmine/eval.hpp"
#include "bevmine/mining.hpp"
#include "bevmine/scenes.hpp"
#include "bevmine/trainer.hpp"

namespace bevmine::app {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot read '" + path.string() + "'");
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out || !(out << text) || !out.flush()) {
        throw DataError("cannot write '" + path.string() + "'");
    }
}

void ensure_directory(const fs::path& dir) {
    if (dir.empty()) {
        return;
    }
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) {
        throw DataError("cannot create directory '" + dir.string() + "'");
    }
}

void ensure_parent(const fs::path& file) { ensure_directory(file.parent_path()); }

std::vector<Scene> read_corpus(const fs::path& path) {
    if (!fs::exists(path)) {
        throw DataError("scene corpus '" + path.string() + "' does not exist");
    }
    try {
        return load_scenes(path);
    } catch (const ParseError& e) {
        throw DataError("'" + path.string() + "': " + e.what());
    } catch (const std::runtime_error& e) {
        throw DataError(e.what());
    }
}

std::vector<TrainingSample> prepare(const std::vector<Scene>& scenes, const AnchorGrid& grid,
                                    const fs::path& source) {
    try {
        return prepare_dataset(scenes, grid);
    } catch (const std::invalid_argument& e) {
        throw DataError("'" + source.string() + "': " + e.what());
    }
}

DetectorState read_checkpoint(const fs::path& path, const AnchorGrid& grid) {
    if (!fs::exists(path)) {
        throw DataError("checkpoint '" + path.string() + "' does not exist");
    }
    try {
        return load_checkpoint(path, grid);
    } catch (const CheckpointError& e) {
        throw DataError("checkpoint '" + path.string() + "': " + e.what());
    }
}

void write_checkpoint(const fs::path& path, const DetectorState& state, const AnchorGrid& grid) {
    try {
        save_checkpoint(path, state, grid);
    } catch (const std::runtime_error& e) {
        throw DataError(e.what());
    }
}

json stats_json(const CorpusStats& s) {
    return {{"scenes", s.scenes},
            {"agents", s.agents},
            {"objects", s.objects},
            {"sparse_labels", s.sparse_labels},
            {"distinct_sparse_objects", s.distinct_sparse_objects},
            {"sparse_ratio", s.sparse_ratio}};
}

json quality_json(const PseudoLabelQuality& q) {
    return {{"fpr", q.fpr},
            {"mpr", q.mpr},
            {"an", q.an},
            {"an_neighbors", q.an_neighbors},
            {"pseudo_labels", q.pseudo_labels},
            {"false_labels", q.false_labels},
            {"missed", q.missed},
            {"ground_truths", q.ground_truths},
            {"neighbors", q.neighbors},
            {"frames", q.frames},
            {"no_pseudo_labels", q.no_pseudo_labels}};
}

std::vector<std::vector<BoxBEV>> ground_truth(const std::vector<TrainingSample>& samples) {
    std::vector<std::vector<BoxBEV>> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        out.push_back(s.gt);
    }
    return out;
}

std::string corpus_hash(const fs::path& path) { return hash_hex(fnv1a(read_file(path))); }

/// Adds a content-derived run id and returns the serialized document.
std::string finish_report(json report) {
    report["run_id"] = hash_hex(fnv1a(report.dump()));
    return report.dump(2) + "\n";
}

}  // namespace

void cmd_gen_data(const GenDataOptions& options) {
    RunConfig config = load_config(options.config);
    if (options.train_scenes) {
        config.data.train_scenes = *options.train_scenes;
    }
    if (options.val_scenes) {
        config.data.val_scenes = *options.val_scenes;
    }
    if (options.seed) {
        config.scenes.seed = *options.seed;
    }
    config.finalize();

    ensure_directory(options.out_dir);
    const auto n_train = static_cast<std::size_t>(config.data.train_scenes);
    const auto n_val = static_cast<std::size_t>(config.data.val_scenes);
    spdlog::info("generating {} train and {} val scenes (seed {})", n_train, n_val, config.scenes.seed);
    const auto train = generate_corpus(config.scenes, 0, n_train);
    const auto val = generate_corpus(config.scenes, n_train, n_val);

    const fs::path train_path = options.out_dir / "train.jsonl";
    const fs::path val_path = options.out_dir / "val.jsonl";
    try {
        save_scenes(train_path, train);
        save_scenes(val_path, val);
    } catch (const std::runtime_error& e) {
        throw DataError(e.what());
    }

    json manifest;
    manifest["format"] = "bevmine-corpus-manifest/1";
    manifest["splits"] = {
        {"train", {{"file", "train.jsonl"}, {"first_index", 0}, {"content_hash", corpus_hash(train_path)},
                   {"stats", stats_json(corpus_stats(train))}}},
        {"val", {{"file", "val.jsonl"}, {"first_index", n_train}, {"content_hash", corpus_hash(val_path)},
                 {"stats", stats_json(corpus_stats(val))}}}};
    const json full = to_json(config);
    manifest["config"] = {{"scenes", full["scenes"]}, {"data", full["data"]}};
    write_file(options.out_dir / "manifest.json", manifest.dump(2) + "\n");
    spdlog::info("wrote {}", (options.out_dir / "manifest.json").string());
}

void cmd_train(const TrainOptions& options) {
    RunConfig config = load_config(options.config);
    if (options.ablation) {
        config.ablation = *options.ablation;
    }
    if (options.i_max) {
        config.i_max = *options.i_max;
    }
    if (options.i_refine) {
        config.i_refine = *options.i_refine;
    }
    if (options.seed) {
        config.train_seed = *options.seed;
    }
    config.finalize();
    if (!options.pretrain_static && !options.static_checkpoint) {
        throw UsageError("train needs a static teacher: pass --static <checkpoint> or --pretrain-static");
    }

    const AnchorGrid grid = config.grid.build();
    const TrainerConfig trainer = config.trainer();
    const auto scenes = read_corpus(options.data);
    if (scenes.empty()) {
        throw DataError("scene corpus '" + options.data.string() + "' is empty");
    }
    const auto samples = prepare(scenes, grid, options.data);
    ensure_directory(options.run_dir);
    write_file(options.run_dir / "config.toml", to_toml(config));

    DetectorState static_teacher;
    if (options.static_checkpoint) {
        static_teacher = read_checkpoint(*options.static_checkpoint, grid);
    } else {
        spdlog::info("pretraining static teacher for {} iterations", trainer.pretrain_iterations);
        static_teacher = pretrain_static_teacher(samples, grid, trainer);
    }
    write_checkpoint(options.run_dir / "static_teacher.json", static_teacher, grid);

    const fs::path log_path = options.run_dir / "run_log.jsonl";
    std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
    if (!log) {
        throw DataError("cannot write '" + log_path.string() + "'");
    }
    if (config.checkpoint_interval > 0) {
        ensure_directory(options.run_dir / "checkpoints");
    }
    TrainHooks hooks;
    hooks.on_iteration = [&](const IterationRecord& rec, const DetectorState& student, const DetectorState& teacher) {
        log << run_log_line(rec) << '\n';
        const int done = rec.iter + 1;
        if (config.checkpoint_interval > 0 && done % config.checkpoint_interval == 0) {
            char suffix[32];
            std::snprintf(suffix, sizeof(suffix), "_iter%06d.json", done);
            write_checkpoint(options.run_dir / "checkpoints" / ("student" + std::string(suffix)), student, grid);
            write_checkpoint(options.run_dir / "checkpoints" / ("dynamic_teacher" + std::string(suffix)), teacher,
                             grid);
        }
        if (done % 500 == 0) {
            spdlog::info("iteration {} ({}) loss {:.4f}", done, to_string(rec.stage), rec.loss_total);
        }
    };
    spdlog::info("training '{}' for {} iterations (refinement from {})", config.ablation, trainer.i_max,
                 trainer.i_refine);
    const TrainRun run = train(samples, grid, static_teacher, trainer, hooks);
    log.flush();
    if (!log) {
        throw DataError("failed writing '" + log_path.string() + "'");
    }
    write_checkpoint(options.run_dir / "student.json", run.student, grid);
    write_checkpoint(options.run_dir / "dynamic_teacher.json", run.dynamic_teacher, grid);
    write_checkpoint(options.run_dir / "inference.json", select_inference_model(run), grid);
    spdlog::info("wrote checkpoints to {}", options.run_dir.string());
}

void cmd_mine(const MineOptions& options) {
    RunConfig config = load_config(options.config);
    if (options.sweep) {
        config.mine_sweep = *options.sweep;
    }
    config.finalize();
    const AnchorGrid grid = config.grid.build();
    const TrainerConfig trainer = config.trainer();
    const auto& ov = trainer.overrides;

    const DetectorState st = read_checkpoint(options.static_checkpoint, grid);
    std::optional<DetectorState> dt;
    if (options.dynamic_checkpoint && !ov.disable_sfm) {
        dt = read_checkpoint(*options.dynamic_checkpoint, grid);
    }
    const auto scenes = read_corpus(options.data);
    const auto samples = prepare(scenes, grid, options.data);

    std::vector<Prediction> pred_st;
    std::vector<Prediction> pred_dt;
    std::vector<std::optional<double>> sigma_dt(samples.size());
    for (const auto& s : samples) {
        pred_st.push_back(detect_head(s.features, st));
        if (dt) {
            pred_dt.push_back(detect_head(s.features, *dt));
        }
    }
    if (dt) {
        const auto batch = static_cast<std::size_t>(trainer.batch_size);
        for (std::size_t first = 0; first < samples.size(); first += batch) {
            const std::size_t last = std::min(samples.size(), first + batch);
            std::vector<const Prediction*> preds;
            std::vector<std::vector<std::size_t>> anchors;
            for (std::size_t i = first; i < last; ++i) {
                preds.push_back(&pred_dt[i]);
                anchors.push_back(samples[i].sparse_anchors());
            }
            const DynamicThreshold th = dynamic_threshold(preds, anchors, trainer.mining.sigma_st_high);
            for (std::size_t i = first; i < last; ++i) {
                sigma_dt[i] = th.value;
            }
        }
    }

    auto mine_all = [&](double sigma_st, bool use_nas) {
        std::vector<LabelDump> dumps;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const auto mined = mine_sample(samples[i], grid, pred_st[i], sigma_st, dt ? &pred_dt[i] : nullptr,
                                           sigma_dt[i], trainer.mining, use_nas);
            dumps.push_back({samples[i].scene_id, mined.labels.positives});
        }
        return dumps;
    };

    const auto dumps = mine_all(trainer.mining.sigma_st_high, !ov.disable_nas);
    ensure_parent(options.out);
    try {
        save_label_dumps(options.out, dumps);
    } catch (const std::runtime_error& e) {
        throw DataError(e.what());
    }
    spdlog::info("wrote {} scenes of labels to {}", dumps.size(), options.out.string());

    const auto gts = ground_truth(samples);
    json summary;
    summary["format"] = "bevmine-mining-summary/1";
    summary["matching_iou"] = config.eval.pseudo_iou;
    summary["frames"] = samples.size();
    summary["supplement"] = dt.has_value();
    summary["dump"] = quality_json(pseudo_label_quality(dumps, gts, config.eval.pseudo_iou));
    json rows = json::array();
    for (double sigma : config.mine_sweep) {
        const auto q = pseudo_label_quality(mine_all(sigma, false), gts, config.eval.pseudo_iou);
        rows.push_back({{"sigma_st", sigma}, {"quality", quality_json(q)}});
        spdlog::info("sigma {:.3f}: FPR {:.3f} MPR {:.3f} AN {:.2f}", sigma, q.fpr, q.mpr, q.an);
    }
    summary["sweep"] = std::move(rows);
    summary["config"] = to_json(config);
    const fs::path summary_path = options.summary ? *options.summary : fs::path(options.out).concat(".summary.json");
    ensure_parent(summary_path);
    write_file(summary_path, finish_report(std::move(summary)));
}

void cmd_eval(const EvalOptions& options) {
    RunConfig config = load_config(options.config);
    const AnchorGrid grid = config.grid.build();
    const int sources = (options.checkpoint ? 1 : 0) + (options.oracle_gt ? 1 : 0);
    if (sources > 1) {
        throw UsageError("eval takes at most one of --checkpoint and --oracle-gt");
    }
    if (sources == 0 && !options.labels) {
        throw UsageError("eval needs --checkpoint, --oracle-gt or --labels");
    }
    const auto scenes = read_corpus(options.data);
    if (scenes.empty()) {
        throw DataError("scene corpus '" + options.data.string() + "' is empty");
    }
    const auto samples = prepare(scenes, grid, options.data);
    const auto gts = ground_truth(samples);

    json report;
    report["format"] = "bevmine-metrics/1";
    report["ap_method"] = "all-point interpolated precision/recall area over the corpus-wide score ranking";
    report["corpus"] = {{"scenes", samples.size()}, {"content_hash", corpus_hash(options.data)}};

    std::optional<MetricsReport> metrics;
    if (sources == 1) {
        std::vector<SceneDetections> detections;
        std::string model;
        if (options.oracle_gt) {
            model = "oracle_gt";
            for (const auto& s : samples) {
                SceneDetections d;
                for (const auto& b : s.gt) {
                    d.push_back({b, 1.0});
                }
                detections.push_back(std::move(d));
            }
        } else {
            const DetectorState state = read_checkpoint(*options.checkpoint, grid);
            model = hash_hex(state.fingerprint());
            for (const auto& s : samples) {
                detections.push_back(postprocess(detect_head(s.features, state), grid, config.eval.inference()));
            }
        }
        metrics = evaluate_detections(detections, gts, config.eval.iou_thresholds);
        report["model"] = model;
        report["inference"] = {{"score_threshold", config.eval.score_threshold}, {"nms_tau", config.eval.nms_tau}};
        report["frames"] = metrics->frames;
        report["detections"] = metrics->detections;
        json ap = json::object();
        for (const auto& [iou, r] : metrics->ap) {
            ap[format_number(iou)] = {{"ap", r.ap},
                                      {"true_positives", r.true_positives},
                                      {"false_positives", r.false_positives},
                                      {"ground_truths", r.ground_truths},
                                      {"no_ground_truth", r.no_ground_truth}};
            if (r.no_ground_truth) {
                spdlog::warn("no ground truth in '{}'; AP reported as 0", options.data.string());
            }
            spdlog::info("AP@{} = {:.4f}", format_number(iou), r.ap);
        }
        report["ap"] = std::move(ap);
    }

    if (options.labels) {
        std::vector<LabelDump> dumps;
        try {
            dumps = load_label_dumps(*options.labels);
        } catch (const ParseError& e) {
            throw DataError("'" + options.labels->string() + "': " + e.what());
        } catch (const std::runtime_error& e) {
            throw DataError(e.what());
        }
        std::map<std::string, std::size_t> by_id;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            by_id.emplace(samples[i].scene_id, i);
        }
        std::vector<std::vector<BoxBEV>> dump_gts;
        for (const auto& d : dumps) {
            auto it = by_id.find(d.scene_id);
            if (it == by_id.end()) {
                throw DataError("label dump scene '" + d.scene_id + "' is not in '" + options.data.string() + "'");
            }
            dump_gts.push_back(gts[it->second]);
        }
        const auto q = pseudo_label_quality(dumps, dump_gts, config.eval.pseudo_iou);
        report["pseudo_labels"] = quality_json(q);
        report["pseudo_labels"]["matching_iou"] = config.eval.pseudo_iou;
        spdlog::info("pseudo labels: FPR {:.4f} MPR {:.4f} AN {:.2f}", q.fpr, q.mpr, q.an);
    }
    report["config"] = to_json(config);

    ensure_parent(options.out);
    write_file(options.out, finish_report(std::move(report)));

    if (options.csv) {
        if (!metrics) {
            throw UsageError("--csv needs detections (--checkpoint or --oracle-gt)");
        }
        std::string csv = "method,frames,detections";
        for (const auto& [iou, r] : metrics->ap) {
            csv += ",AP@" + format_number(iou);
        }
        csv += "\n" + options.row_label.value_or(config.ablation) + "," + std::to_string(metrics->frames) + "," +
               std::to_string(metrics->detections);
        for (const auto& [iou, r] : metrics->ap) {
            char cell[32];
            std::snprintf(cell, sizeof(cell), ",%.2f", 100.0 * r.ap);
            csv += cell;
        }
        ensure_parent(*options.csv);
        write_file(*options.csv, csv + "\n");
    }
}

}  // namespace bevmine::app
