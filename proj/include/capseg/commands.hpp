#pragma once

#include <string>
#include <vector>

#include "capseg/checkpoint.hpp"
#include "capseg/config.hpp"
#include "capseg/metrics.hpp"
#include "capseg/optim.hpp"
#include "capseg/train.hpp"

namespace capseg {

// Thin command layer behind the CLI; each call writes its artifacts under
// `out_dir` and returns what tests need to assert on.

struct GenDataResult {
    std::string dir;
    int count = 0;
};

GenDataResult cmd_gen_data(const std::string& kind, std::uint64_t seed, int count,
                           std::int64_t size, int classes, const std::string& out_dir);

struct TrainCmdResult {
    std::string checkpoint_path;  // final checkpoint
    std::string csv_path;
    std::int64_t iterations = 0;
    double final_val_dice = 0.0;
    double baseline_dice = 0.0;  // all-background predictor on the validation split
};

TrainCmdResult cmd_train(const TrainConfig& config, const std::string& out_dir,
                         const std::string& resume_checkpoint = "");

TrainCmdResult cmd_pretrain(const TrainConfig& config, const std::string& out_dir);

struct EvalCmdResult {
    SegMetrics metrics;
    std::string csv_path;
    std::string csv_text;
};

EvalCmdResult cmd_eval(const TrainConfig& config, const std::string& checkpoint_path,
                       const std::string& dataset_dir, const std::string& out_dir);

struct RobustnessCmdResult {
    std::string csv_path;
    std::string csv_text;
    std::vector<std::string> rows;  // without header
};

RobustnessCmdResult cmd_robustness(const TrainConfig& config, const std::string& checkpoint_path,
                                   const std::string& dataset_dir,
                                   const std::vector<int>& angles,
                                   const std::vector<std::string>& axes,
                                   const std::string& out_dir);

struct SensitivityCmdResult {
    std::string csv_path;
    std::string csv_text;
    SensitivityReport mean;
};

SensitivityCmdResult cmd_sensitivity(const TrainConfig& config,
                                     const std::string& checkpoint_path,
                                     const std::string& dataset_dir,
                                     const std::string& out_dir);

// Gradient fidelity check over a small two-layer capsule network
// (8x8 spatial, two types per layer, K = 3) through the full loss stack.
GradcheckReport cmd_gradcheck(std::uint64_t seed, double eps, double tolerance);

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

}  // namespace capseg
