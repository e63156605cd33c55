// Acceptance suite: prints one PASS/FAIL line per criterion and exits non-zero
// if any criterion fails. With --known-failures the exit status instead checks
// that exactly the listed criteria fail; their FAIL lines are still printed.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include <sys/wait.h>

#include <CLI11.hpp>

#include "bevmine/app/config.hpp"
#include "bevmine/eval.hpp"
#include "bevmine/trainer.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace bevmine;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), f, args...);
    return buf;
}

bool same_positives(const PositiveSet& got, const std::vector<oracle::Mined>& want) {
    if (got.size() != want.size()) {
        return false;
    }
    for (std::size_t i = 0; i < got.size(); ++i) {
        if (got[i].anchor != want[i].anchor || got[i].score != want[i].score || !(got[i].box == want[i].box)) {
            return false;
        }
    }
    return true;
}

/// Background-heavy logits with a few confident blobs, like a trained head.
Prediction realistic_prediction(const AnchorGrid& g, std::mt19937_64& rng) {
    Prediction p = fixture::random_prediction(g, rng);
    std::normal_distribution<double> bg(-4.0, 1.5);
    for (auto& v : p.cls) {
        v = bg(rng);
    }
    return p;
}

Outcome mining_oracle(const AnchorGrid& g) {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(1001);
    std::uniform_real_distribution<double> sigma(0.1, 0.5);
    std::size_t mismatches = 0;
    std::size_t mined = 0;
    for (int t = 0; t < 1000; ++t) {
        const Prediction st = realistic_prediction(g, rng);
        const Prediction dt = realistic_prediction(g, rng);
        const double s_st = sigma(rng);
        const double s_dt = sigma(rng);
        const PositiveSet main = mfm(st, g, s_st, 0.15);
        const auto ref_main = oracle::threshold_and_nms(st, g, s_st, 0.15);
        const PositiveSet supp = sfm(dt, g, s_dt, 0.15, main);
        mismatches += same_positives(main, ref_main) ? 0 : 1;
        mismatches += same_positives(supp, oracle::supplement(dt, g, s_dt, 0.15, ref_main)) ? 0 : 1;
        mined += main.size() + supp.size();
    }
    const double secs = seconds_since(t0);
    return {mismatches == 0 && secs < 30.0,
            fmt("1000 predictions, %zu mined boxes, %zu mismatches, %.1f s (limit 30 s)", mined, mismatches, secs)};
}

Outcome threshold_oracle() {
    std::mt19937_64 rng(2002);
    std::uniform_int_distribution<int> size(1, 64);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::bernoulli_distribution repeat(0.2);
    std::size_t mismatches = 0;
    for (int t = 0; t < 1000; ++t) {
        std::vector<double> v(static_cast<std::size_t>(size(rng)));
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] = (i > 0 && repeat(rng)) ? v[i - 1] : u(rng);
        }
        const double expected = v.size() == 1 ? v[0] : oracle::two_means(v).high;
        mismatches += dynamic_threshold(v, 0.2).value == expected ? 0 : 1;
    }
    return {mismatches == 0, fmt("1000 trials of 1-64 scores, %zu mismatches", mismatches)};
}

Outcome ema_contract(const AnchorGrid& g) {
    const double alpha = 0.999;
    const DetectorState student = fixture::random_state(g, 31);
    const DetectorState teacher0 = fixture::random_state(g, 32);

    const bool copies = ema_update(teacher0, student, 1, alpha) == student;

    double worst_contraction = 0.0;
    DetectorState dt = teacher0;
    for (int k = 0; k < 5000; ++k) {
        const int iter = 1000 + k;
        const DetectorState next = ema_update(dt, student, iter, alpha);
        for (std::size_t i = 0; i < next.params.size(); ++i) {
            const double expected = alpha * (dt.params[i] - student.params[i]);
            const double got = next.params[i] - student.params[i];
            worst_contraction = std::max(worst_contraction, std::abs(got - expected));
        }
        dt = next;
    }

    std::mt19937_64 rng(33);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> sum(student.params.size(), 0.0);
    DetectorState ramp;
    double worst_mean = 0.0;
    for (int iter = 1; iter < 1000; ++iter) {
        DetectorState s = student;
        for (auto& p : s.params) {
            p = n(rng);
        }
        for (std::size_t i = 0; i < sum.size(); ++i) {
            sum[i] += s.params[i];
        }
        ramp = iter == 1 ? ema_update(s, s, 1, alpha) : ema_update(ramp, s, iter, alpha);
        for (std::size_t i = 0; i < sum.size(); ++i) {
            worst_mean = std::max(worst_mean, std::abs(ramp.params[i] - sum[i] / iter));
        }
    }
    return {copies && worst_contraction <= 1e-12 && worst_mean <= 1e-9,
            fmt("iter 1 copy %s; contraction error %.2e over 5000 steps; running-mean error %.2e over 999 steps",
                copies ? "exact" : "WRONG", worst_contraction, worst_mean)};
}

Outcome gradient_fidelity(const AnchorGrid& g, const SceneGenParams& scenes) {
    double worst = 0.0;
    std::size_t checked = 0;
    for (std::uint64_t inst = 0; inst < 10; ++inst) {
        const Scene scene = generate_corpus(scenes, 900000 + inst, 1)[0];
        const TrainingSample sample = prepare_sample(scene, g);
        const DetectorState state = fixture::random_state(g, 500 + inst, 0.05);
        const Prediction pst = detect_head(sample.features, fixture::random_state(g, 700 + inst, 0.3));
        const MinedLabels mined = mine_sample(sample, g, pst, 0.2, nullptr, std::nullopt, MiningConfig{}, true);
        const LabelSet& labels = mined.labels;

        auto loss_at = [&](const std::vector<double>& params) {
            DetectorState s = state;
            s.params = params;
            return supervised_loss(detect_head(sample.features, s), labels, g).total;
        };
        const LossResult r = supervised_loss(detect_head(sample.features, state), labels, g);
        const auto grad = detect_head_backward(sample.features, state, r.grad);

        std::mt19937_64 rng(inst);
        std::uniform_int_distribution<std::size_t> pick(0, state.params.size() - 1);
        std::vector<std::size_t> coords;
        for (int k = 0; k < 40; ++k) {
            coords.push_back(pick(rng));
        }
        const std::size_t bias0 = state.layout.blocks.back().offset;
        for (std::size_t k = bias0; k < state.params.size(); ++k) {
            coords.push_back(k);
        }
        for (std::size_t i : coords) {
            const double fd = oracle::central_difference(loss_at, state.params, i, 1e-5);
            worst = std::max(worst, fixture::relative_error(grad[i], fd));
            ++checked;
        }
    }
    return {worst < 1e-4, fmt("10 instances, %zu coordinates, worst relative error %.2e (limit 1e-4)", checked, worst)};
}

double ap50(const DetectorState& s, std::span<const TrainingSample> val, const AnchorGrid& g,
            const app::EvalConfig& ev) {
    std::vector<SceneDetections> r;
    std::vector<std::vector<BoxBEV>> gts;
    for (const auto& v : val) {
        r.push_back(postprocess(detect_head(v.features, s), g, ev.inference()));
        gts.push_back(v.gt);
    }
    return 100.0 * average_precision(r, gts, 0.5).ap;
}

struct Quality {
    PseudoLabelQuality merged;
    PseudoLabelQuality high;
    PseudoLabelQuality low;
};

Quality mining_balance(std::span<const TrainingSample> corpus, const AnchorGrid& g, const DetectorState& st,
                       const DetectorState& dt, const TrainerConfig& cfg) {
    std::vector<Prediction> pst;
    std::vector<Prediction> pdt;
    for (const auto& s : corpus) {
        pst.push_back(detect_head(s.features, st));
        pdt.push_back(detect_head(s.features, dt));
    }
    std::vector<LabelDump> merged;
    std::vector<LabelDump> high;
    std::vector<LabelDump> low;
    std::vector<std::vector<BoxBEV>> gts;
    const auto batch = static_cast<std::size_t>(cfg.batch_size);
    for (std::size_t first = 0; first < corpus.size(); first += batch) {
        const std::size_t last = std::min(corpus.size(), first + batch);
        std::vector<const Prediction*> preds;
        std::vector<std::vector<std::size_t>> anchors;
        for (std::size_t i = first; i < last; ++i) {
            preds.push_back(&pdt[i]);
            anchors.push_back(corpus[i].sparse_anchors());
        }
        const double sigma_dt = dynamic_threshold(preds, anchors, cfg.mining.sigma_st_high).value;
        for (std::size_t i = first; i < last; ++i) {
            const auto& s = corpus[i];
            const auto m = mine_sample(s, g, pst[i], cfg.mining.sigma_st_high, &pdt[i], sigma_dt, cfg.mining, false);
            const auto h = mine_sample(s, g, pst[i], cfg.mining.sigma_st_high, nullptr, std::nullopt, cfg.mining, false);
            const auto l = mine_sample(s, g, pst[i], cfg.mining.sigma_st_low, nullptr, std::nullopt, cfg.mining, false);
            merged.push_back({s.scene_id, m.labels.positives});
            high.push_back({s.scene_id, h.labels.positives});
            low.push_back({s.scene_id, l.labels.positives});
            gts.push_back(s.gt);
        }
    }
    return {pseudo_label_quality(merged, gts, 0.5), pseudo_label_quality(high, gts, 0.5),
            pseudo_label_quality(low, gts, 0.5)};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int shell(const std::string& cmd) {
    const int status = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome pipeline_determinism(const fs::path& config) {
    const fs::path root = fs::temp_directory_path() / "bevmine_acceptance_determinism";
    fs::remove_all(root);
    std::string reports[2];
    for (int k = 0; k < 2; ++k) {
        const fs::path dir = root / std::to_string(k);
        const std::string bin = BEVMINE_BINARY;
        const std::string cfg = " --config '" + config.string() + "'";
        const std::string d = "'" + (dir / "data").string() + "'";
        const std::string r = "'" + (dir / "run").string() + "'";
        const int rc = shell(bin + " gen-data" + cfg + " --out " + d) |
                       shell(bin + " train" + cfg + " --pretrain-static --data " + d + "/train.jsonl --run-dir " + r) |
                       shell(bin + " eval" + cfg + " --data " + d + "/val.jsonl --checkpoint " + r +
                             "/dynamic_teacher.json --out '" + (dir / "report.json").string() + "'");
        if (rc != 0) {
            fs::remove_all(root);
            return {false, fmt("pipeline %d exited with a non-zero status", k + 1)};
        }
        reports[k] = slurp(dir / "report.json");
    }
    fs::remove_all(root);
    const bool same = !reports[0].empty() && reports[0] == reports[1];
    return {same, fmt("two gen-data/train/eval pipelines, reports of %zu and %zu bytes, %s", reports[0].size(),
                      reports[1].size(), same ? "byte-identical" : "DIFFERENT")};
}

void report(int id, const char* name, const Outcome& o, std::set<int>& failed) {
    std::printf("C%d %s  %s: %s\n", id, o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) {
        failed.insert(id);
    }
}

std::string join(const std::set<int>& ids) {
    std::string out;
    for (int id : ids) {
        out += (out.empty() ? "C" : ", C") + std::to_string(id);
    }
    return out.empty() ? "none" : out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App cli{"acceptance suite"};
    fs::path config_path = fs::path(BEVMINE_CONFIG_DIR) / "benchmark.toml";
    std::vector<int> known;
    cli.add_option("config", config_path, "benchmark config")->check(CLI::ExistingFile);
    cli.add_option("--known-failures", known, "criteria expected to fail")->delimiter(',');
    CLI11_PARSE(cli, argc, argv);
    const app::RunConfig config = app::load_config(config_path);
    const AnchorGrid grid = config.grid.build();
    const TrainerConfig trainer = config.trainer();
    std::set<int> failed;

    report(1, "mining oracle equivalence", mining_oracle(grid), failed);
    report(2, "dynamic threshold exactness", threshold_oracle(), failed);
    report(3, "EMA contract", ema_contract(grid), failed);
    report(4, "gradient fidelity", gradient_fidelity(grid, config.scenes), failed);

    const auto t_data = Clock::now();
    const auto n_train = static_cast<std::size_t>(config.data.train_scenes);
    const auto n_val = static_cast<std::size_t>(config.data.val_scenes);
    const auto train_set = prepare_dataset(generate_corpus(config.scenes, 0, n_train), grid);
    const auto val_set = prepare_dataset(generate_corpus(config.scenes, n_train, n_val), grid);
    const double data_secs = seconds_since(t_data);

    const auto t_pre = Clock::now();
    const DetectorState static_teacher = pretrain_static_teacher(train_set, grid, trainer);
    const double pre_secs = seconds_since(t_pre);

    std::size_t overlap_cells = 0;
    std::size_t refinement_batches = 0;
    std::size_t supplement_labels = 0;
    TrainHooks hooks;
    hooks.on_mining = [&](const MiningTrace& t) {
        if (t.stage == Stage::Refinement) {
            overlap_cells += shared_cells(*t.main, *t.supplement, grid);
            supplement_labels += t.supplement->size();
            ++refinement_batches;
        }
    };
    auto run_ablation = [&](Ablation a, const TrainHooks& h) {
        TrainerConfig c = trainer;
        c.overrides = overrides_for(a);
        const auto t0 = Clock::now();
        TrainRun run = train(train_set, grid, static_teacher, c, h);
        return std::make_pair(std::move(run), seconds_since(t0));
    };
    auto [full, full_secs] = run_ablation(Ablation::Full, hooks);
    std::size_t logged_overlap = 0;
    for (const auto& r : full.log) {
        logged_overlap += r.grid_overlap;
    }
    report(5, "grid-disjointness invariant",
           {overlap_cells == 0 && logged_overlap == 0 && refinement_batches > 0,
            fmt("%zu refinement scene-iterations, %zu supplement labels, %zu shared cells", refinement_batches,
                supplement_labels, overlap_cells + logged_overlap)},
           failed);

    const auto t_q = Clock::now();
    const Quality q = mining_balance(train_set, grid, static_teacher, *full.warmup_teacher, trainer);
    const double q_secs = seconds_since(t_q) + pre_secs + full_secs / 2.0;
    const bool c6 = q.merged.mpr <= q.high.mpr - 0.05 && q.merged.fpr <= q.low.fpr && q_secs < 300.0;
    report(6, "quality/quantity balance",
           {c6, fmt("%zu scenes; MPR merged %.3f vs MFM@0.2 %.3f (need <= %.3f); FPR merged %.3f vs MFM@0.15 %.3f; "
                    "AN %.2f/%.2f/%.2f; %.0f s incl. teacher training (limit 300 s)",
                    train_set.size(), q.merged.mpr, q.high.mpr, q.high.mpr - 0.05, q.merged.fpr, q.low.fpr,
                    q.merged.an, q.high.an, q.low.an, q_secs)},
           failed);

    const double ap_full = ap50(select_inference_model(full), val_set, grid, config.eval);
    const auto [sparse, sparse_secs] = run_ablation(Ablation::SparseOnly, {});
    const auto [mfm_only, mfm_secs] = run_ablation(Ablation::MfmOnly, {});
    const auto [mfm_nas, nas_secs] = run_ablation(Ablation::MfmNas, {});
    const double ap_sparse = ap50(select_inference_model(sparse), val_set, grid, config.eval);
    const double ap_mfm = ap50(select_inference_model(mfm_only), val_set, grid, config.eval);
    const double ap_nas = ap50(select_inference_model(mfm_nas), val_set, grid, config.eval);
    const double tol = 1.0;
    const double full_pipeline = data_secs + pre_secs + full_secs;
    const bool c7 = ap_full >= ap_sparse + 5.0 && ap_sparse < ap_mfm && ap_mfm <= ap_nas + tol &&
                    ap_nas <= ap_full + tol && full_pipeline < 900.0;
    report(7, "end-to-end directional gain",
           {c7, fmt("AP@0.5 sparse-only %.2f < mfm-only %.2f <= mfm+nas %.2f <= full %.2f (tolerance %.1f); "
                    "full - sparse = %.2f (need >= 5.0); full run %.0f s (limit 900 s)",
                    ap_sparse, ap_mfm, ap_nas, ap_full, tol, ap_full - ap_sparse, full_pipeline)},
           failed);

    const auto [no_stt, no_stt_secs] = run_ablation(Ablation::NoStt, {});
    const double ap_no_stt = ap50(select_inference_model(no_stt), val_set, grid, config.eval);
    report(8, "staged-training ablation",
           {ap_no_stt <= ap_full, fmt("AP@0.5 two-phase %.2f vs end-to-end %.2f", ap_no_stt, ap_full)}, failed);
    std::printf("   timings: data %.0f s, pretrain %.0f s, runs full/sparse/mfm/nas/no-stt %.0f/%.0f/%.0f/%.0f/%.0f s\n",
                data_secs, pre_secs, full_secs, sparse_secs, mfm_secs, nas_secs, no_stt_secs);

    report(9, "determinism", pipeline_determinism(config_path), failed);

    const std::set<int> expected(known.begin(), known.end());
    std::printf("failed: %s; known failures: %s\n", join(failed).c_str(), join(expected).c_str());
    if (failed != expected) {
        std::printf("outcome differs from the known-failure list\n");
        return 1;
    }
    return 0;
}
