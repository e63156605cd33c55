#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "bevmine/app/commands.hpp"
#include "bevmine/app/config.hpp"
#include "bevmine/detector.hpp"
#include "bevmine/scenes.hpp"

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

void setup_logging() {
    auto logger = spdlog::stderr_color_mt("bevmine");
    logger->set_pattern("[%l] %v");
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::info);
    if (const char* level = std::getenv("BEVMINE_LOG_LEVEL")) {
        spdlog::set_level(spdlog::level::from_str(level));
    }
}

}  // namespace

int main(int argc, char** argv) {
    using namespace bevmine::app;
    setup_logging();

    CLI::App app{"Sparsely supervised collaborative 3-D detection on synthetic BEV scenes"};
    app.require_subcommand(1);

    GenDataOptions gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "Generate seeded train/val scene corpora and a manifest");
    gen_cmd->add_option("--config", gen.config, "Config file")->required();
    gen_cmd->add_option("--out", gen.out_dir, "Output directory")->capture_default_str();
    gen_cmd->add_option("--train-scenes", gen.train_scenes, "Override data.train_scenes");
    gen_cmd->add_option("--val-scenes", gen.val_scenes, "Override data.val_scenes");
    gen_cmd->add_option("--seed", gen.seed, "Override scenes.seed");

    TrainOptions tr;
    auto* train_cmd = app.add_subcommand("train", "Pretrain the static teacher (optional) and run staged training");
    train_cmd->add_option("--config", tr.config, "Config file")->required();
    train_cmd->add_option("--data", tr.data, "Training corpus (JSONL)")->capture_default_str();
    train_cmd->add_option("--run-dir", tr.run_dir, "Directory for checkpoints and the run log")
        ->capture_default_str();
    auto* pre = train_cmd->add_flag("--pretrain-static", tr.pretrain_static, "Train the static teacher first");
    train_cmd->add_option("--static", tr.static_checkpoint, "Static teacher checkpoint")->excludes(pre);
    train_cmd->add_option("--ablation", tr.ablation, "full, sparse-only, mfm-only, mfm-nas or no-stt");
    train_cmd->add_option("--i-max", tr.i_max, "Override trainer.i_max");
    train_cmd->add_option("--i-refine", tr.i_refine, "Override trainer.i_refine");
    train_cmd->add_option("--seed", tr.seed, "Override trainer.seed");

    MineOptions mine;
    auto* mine_cmd = app.add_subcommand("mine", "Dump mined labels and a threshold sweep summary");
    mine_cmd->add_option("--config", mine.config, "Config file")->required();
    mine_cmd->add_option("--data", mine.data, "Scene corpus (JSONL)")->capture_default_str();
    mine_cmd->add_option("--static", mine.static_checkpoint, "Static teacher checkpoint")->required();
    mine_cmd->add_option("--dynamic", mine.dynamic_checkpoint, "Dynamic teacher checkpoint (enables SFM)");
    mine_cmd->add_option("--out", mine.out, "Label dump (JSONL)")->capture_default_str();
    mine_cmd->add_option("--summary", mine.summary, "Summary JSON (default: <out>.summary.json)");
    mine_cmd->add_option("--sweep", mine.sweep, "Static-teacher thresholds to tabulate")->delimiter(',');

    EvalOptions ev;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint or re-score a label dump");
    eval_cmd->add_option("--config", ev.config, "Config file")->required();
    eval_cmd->add_option("--data", ev.data, "Evaluation corpus (JSONL)")->capture_default_str();
    eval_cmd->add_option("--checkpoint", ev.checkpoint, "Detector checkpoint");
    eval_cmd->add_flag("--oracle-gt", ev.oracle_gt, "Score the ground truth boxes themselves");
    eval_cmd->add_option("--labels", ev.labels, "Label dump written by `mine`");
    eval_cmd->add_option("--out", ev.out, "Metrics report (JSON)")->capture_default_str();
    eval_cmd->add_option("--csv", ev.csv, "Also write a one-row CSV table");
    eval_cmd->add_option("--row-label", ev.row_label, "Method name in the CSV row (default: trainer.ablation)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*gen_cmd) {
            cmd_gen_data(gen);
        } else if (*train_cmd) {
            cmd_train(tr);
        } else if (*mine_cmd) {
            cmd_mine(mine);
        } else if (*eval_cmd) {
            cmd_eval(ev);
        }
    } catch (const ConfigError& e) {
        spdlog::error("{}", e.what());
        return kUsage;
    } catch (const UsageError& e) {
        spdlog::error("{}", e.what());
        return kUsage;
    } catch (const bevmine::NumericError& e) {
        spdlog::error("numeric abort: {}", e.what());
        return kNumeric;
    } catch (const DataError& e) {
        spdlog::error("{}", e.what());
        return kData;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return kData;
    }
    return kOk;
}
