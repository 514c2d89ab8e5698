#pragma once

#include <functional>
#include <string>
#include <vector>

#include "capseg/config.hpp"
#include "capseg/data.hpp"
#include "capseg/losses.hpp"
#include "capseg/metrics.hpp"
#include "capseg/network.hpp"

namespace capseg {

// Deterministic CSV number formatting shared by every emitter.
std::string fmt_csv(double v);

NetworkSpec build_network(const TrainConfig& config);

// Deterministic seeded split (shuffle then cut) into train/validation.
std::pair<SegDataset, SegDataset> split_train_val(const SegDataset& dataset,
                                                  double val_fraction, std::uint64_t seed);

// Fold `k` of a deterministic k-fold partition (validation = fold k).
std::pair<SegDataset, SegDataset> split_fold(const SegDataset& dataset, int folds, int fold,
                                             std::uint64_t seed);

// Loss stack for one sample: margin on the final capsule lengths against the
// nearest-neighbor-reduced mask, weighted CE on the decoder logits,
// masked reconstruction.
LossBreakdown segmentation_loss(const NetworkSpec& spec, const ForwardResult& forward,
                                const SegSample& sample, const TrainConfig& config,
                                const std::vector<double>& class_weights);

struct EvalResult {
    SegMetrics metrics;
    double loss_total = 0.0;
    double loss_margin = 0.0;
    double loss_ce = 0.0;
    double loss_recon = 0.0;
};

EvalResult evaluate(const NetworkSpec& spec, ModelParams& params, const SegDataset& dataset,
                    const TrainConfig& config);

// One metrics-CSV row sink; the commands layer writes them to disk.
using CsvSink = std::function<void(const std::string& row)>;

extern const char* kMetricsCsvHeader;

struct TrainResult {
    std::int64_t iterations = 0;
    double final_val_dice = 0.0;
};

// hook(iteration) fires every checkpoint_interval iterations and at the end.
using CheckpointHook = std::function<void(std::int64_t iteration)>;

// The supervised loop: batches in seeded epoch order, Adam updates,
// periodic validation with lr decay on a stale dice, stop at
// min(max_iterations, early_stop_iterations).
TrainResult train_loop(const NetworkSpec& spec, ModelParams& params, AdamState& opt,
                       const SegDataset& train, const SegDataset& val,
                       const TrainConfig& config, std::int64_t start_iteration,
                       const CsvSink& csv, const CheckpointHook& checkpoint);

// Pretext loop: per step draw a sample and two transforms (independently,
// fresh seeds per application), minimize the feature-matching loss over the
// extractor parameters only.
TrainResult pretrain_loop(const NetworkSpec& spec, ModelParams& params, AdamState& opt,
                          const SegDataset& dataset, const std::vector<Transform>& transforms,
                          const TrainConfig& config, std::int64_t start_iteration,
                          const CsvSink& csv, const CheckpointHook& checkpoint);

// High-level wrappers.
ModelParams ssl_pretrain(const NetworkSpec& spec, const SegDataset& dataset,
                         const std::vector<Transform>& transforms, const TrainConfig& config);
ModelParams finetune(const NetworkSpec& spec, ModelParams init, const SegDataset& train,
                     const SegDataset& val, const TrainConfig& config,
                     double* final_dice = nullptr);

}  // namespace capseg
