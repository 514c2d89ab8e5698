#pragma once

#include <cstdint>
#include <string>

namespace capseg {

// Run configuration. File format: UTF-8 "key = value" lines, '#' comments,
// unknown keys rejected. CLI flags override file values.
struct TrainConfig {
    std::string arch = "segcaps2d";  // segcaps2d | ucaps3d
    std::string dataset;
    std::uint64_t seed = 0;
    int classes = 2;
    std::int64_t input_size = 64;  // per-axis extent (64 for 2d, 32 for 3d toys)
    std::int64_t batch_size = 1;
    std::int64_t max_iterations = 5000;
    double learning_rate = 0.0001;
    double lr_decay_factor = 0.05;
    std::int64_t patience_iterations = 500;
    std::int64_t early_stop_iterations = 5000;
    std::int64_t eval_interval = 100;
    std::int64_t checkpoint_interval = 1000;
    int routing_iterations = 3;
    double gamma = 0.001;
    double margin_m_plus = 0.9;
    double margin_m_minus = 0.1;
    double margin_lambda = 0.5;
    bool deterministic = true;
    double val_fraction = 0.2;
    bool multi_segcaps = false;
    std::int64_t base_channels = 16;
    std::int64_t capsule_dim = 8;
    std::int64_t schedule_divisor = 4;
    bool vote_bias = false;
    std::string init_extractor;  // pretrained extractor checkpoint, optional
    int folds = 0;               // > 1 enables k-fold cross-validation mode

    void validate() const;

    // Full canonical serialization (also the config-file format).
    std::string canonical_text() const;

    // Hash over the architecture-defining subset; stored in checkpoints so a
    // checkpoint refuses to load into a differently shaped network.
    std::uint64_t architecture_hash() const;
};

TrainConfig parse_config_file(const std::string& path);

// Applies one "key = value" assignment (shared by the file parser and the
// CLI override path). `where` names the source for error messages.
void apply_config_entry(TrainConfig& config, const std::string& key, const std::string& value,
                        const std::string& where);

}  // namespace capseg
