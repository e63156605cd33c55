#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace bevmine::app {

/// Missing or malformed input files; maps to exit code 2.
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& message) : std::runtime_error(message) {}
};

/// Bad flag combinations; maps to exit code 1.
class UsageError : public std::runtime_error {
public:
    explicit UsageError(const std::string& message) : std::runtime_error(message) {}
};

struct GenDataOptions {
    std::filesystem::path config;
    std::filesystem::path out_dir = "data";
    std::optional<int> train_scenes;
    std::optional<int> val_scenes;
    std::optional<std::uint64_t> seed;
};

struct TrainOptions {
    std::filesystem::path config;
    std::filesystem::path data = "data/train.jsonl";
    std::filesystem::path run_dir = "run";
    bool pretrain_static = false;
    std::optional<std::filesystem::path> static_checkpoint;
    std::optional<std::string> ablation;
    std::optional<int> i_max;
    std::optional<int> i_refine;
    std::optional<std::uint64_t> seed;
};

struct MineOptions {
    std::filesystem::path config;
    std::filesystem::path data = "data/train.jsonl";
    std::filesystem::path static_checkpoint;
    std::optional<std::filesystem::path> dynamic_checkpoint;
    std::filesystem::path out = "labels.jsonl";
    std::optional<std::filesystem::path> summary;
    std::optional<std::vector<double>> sweep;
};

struct EvalOptions {
    std::filesystem::path config;
    std::filesystem::path data = "data/val.jsonl";
    std::optional<std::filesystem::path> checkpoint;
    /// Score the ground truth itself instead of a detector.
    bool oracle_gt = false;
    /// Re-score a label dump written by `mine`.
    std::optional<std::filesystem::path> labels;
    std::filesystem::path out = "report.json";
    std::optional<std::filesystem::path> csv;
    std::optional<std::string> row_label;
};

void cmd_gen_data(const GenDataOptions& options);
void cmd_train(const TrainOptions& options);
void cmd_mine(const MineOptions& options);
void cmd_eval(const EvalOptions& options);

}  // namespace bevmine::app
