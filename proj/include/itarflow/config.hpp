#pragma once

// Run configuration: a line-oriented `key = value` file with # comments.
// Unknown keys are rejected and every numeric range is validated at parse
// time, with errors naming the key and line.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace itarflow {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainSettings {
    double t_min = 0.01;
    double t_max = 0.5;
    int64_t batch_size = 256;
    int64_t epochs = 4;
    int64_t steps_per_epoch = 500;
    double lr_min = 1e-6;
    double lr_peak = 1e-4;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double label_dropout = 0.1;
    int64_t checkpoint_every = 0;  // steps between checkpoints; 0 = final only

    int64_t total_steps() const { return epochs * steps_per_epoch; }
    int64_t warmup_steps() const { return steps_per_epoch; }  // the first epoch
};

struct RunConfig {
    std::string task;  // gmm1d | gmm2d | checkerboard2d | idx-file | image-dir
    std::string out_dir = "out";
    std::string data_path;
    std::string labels_path;

    std::string preset = "desk";       // desk | tiny | custom
    std::vector<int> block_layers;     // used when preset = custom
    int64_t width = 0;                 // 0 = preset default
    int heads = 4;
    int64_t time_dim = 32;
    int64_t seq_len = 4;               // tokens per sequence (procedural tasks)
    int64_t patch_size = 2;            // image tasks

    TrainSettings train;

    int64_t sample_count = 64;
    double cfg_scale = 1.0;
    int64_t ode_steps = 10;
    bool final_tweedie = true;
    bool cfg_mu_only = false;

    uint64_t seed = 1;
};

RunConfig parse_config(const std::string& path);
RunConfig parse_config_text(const std::string& text, const std::string& origin);
std::string serialize_config(const RunConfig& cfg);

}  // namespace itarflow
