#pragma once

// Noise-amortized maximum-likelihood training: patchification, noise draws
// over t ~ U[t_min, t_max], the gamma_t = t weighted per-dimension loss,
// decoupled-weight-decay adaptive-moment updates, and the warmup + cosine
// learning-rate schedule. The loop is deterministic given the run seed; every
// step derives its own RNG stream so resumed runs continue the exact sequence.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "itarflow/config.hpp"
#include "itarflow/flow.hpp"
#include "itarflow/tensor.hpp"

namespace itarflow {

class Dataset;

// ---------------------------------------------------------------------------
// architecture presets (deep-shallow layout: the last block is the deepest)

struct PresetShape {
    std::vector<int> block_layers;
    int64_t width;
    int heads;
};

PresetShape preset_shape(const std::string& name);
ArchSpec arch_from_config(const RunConfig& cfg, const Dataset& data);

// ---------------------------------------------------------------------------
// patchification

// (H, W, c) row-major channel-interleaved image -> (N, d) tokens with
// N = (H/p)(W/p), d = p*p*c; patches in raster order, channel-fastest.
std::vector<float> patchify(const std::vector<float>& image, int64_t h, int64_t w, int64_t c,
                            int64_t p);
std::vector<float> unpatchify(const std::vector<float>& tokens, int64_t h, int64_t w, int64_t c,
                              int64_t p);

// ---------------------------------------------------------------------------
// noise

struct NoiseSpec {
    double t_min;
    double t_max;
    void validate() const;
};

struct NoiseDraw {
    Tensor x_t;             // (B, N, d)
    std::vector<double> t;  // one level per example, shared across its tokens
};

// x_t = x + t eps with t ~ U[t_min, t_max] per example and eps iid standard
// normal per coordinate. Draw order per example: t, then its coordinates.
NoiseDraw noise_draw(const Tensor& x, const NoiseSpec& spec, std::mt19937_64& rng);

inline double gamma_weight(double t) { return t; }

// ---------------------------------------------------------------------------
// loss

// mean_i of -gamma_i * log p(x_t_i, t_i, y_i) / D; the graph-carrying scalar.
template <typename T>
TensorT<T> weighted_nll(const FlowStackT<T>& model, const TensorT<T>& x_t,
                        const Conditioning& cond, const std::vector<double>& gamma) {
    int64_t batch = x_t.shape()[0];
    if (static_cast<int64_t>(gamma.size()) != batch)
        throw std::invalid_argument("weighted_nll: gamma size mismatch");
    TensorT<T> lp = log_likelihood(model, x_t, cond);
    double d = static_cast<double>(model.arch.total_dim());
    std::vector<T> wv(batch);
    for (int64_t b = 0; b < batch; ++b) wv[b] = static_cast<T>(-gamma[b] / d);
    return mean(mul(lp, TensorT<T>::from_data({batch}, std::move(wv))));
}

struct LossResult {
    Tensor value;         // scalar, differentiable
    double nats_per_dim;  // unweighted -mean(log p)/D, for reporting
    double mean_t;
};

// noise_draw + label dropout + weighted_nll. Non-finite losses raise an error
// carrying the offending noise level.
LossResult loss(const FlowStack& model, const Tensor& x_clean, const std::vector<int64_t>& labels,
                const TrainSettings& train, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// schedule and optimizer

// Linear warmup lr_min -> lr_peak over warmup_steps, cosine decay back to
// lr_min at total_steps.
double lr_at(int64_t step, int64_t total_steps, int64_t warmup_steps, double lr_min,
             double lr_peak);

struct OptimizerState {
    int64_t step_count = 0;
    std::vector<std::vector<float>> m, v;
};

// Decoupled weight decay (param *= 1 - lr*wd) before the bias-corrected
// adaptive-moment update, beta = (beta1, beta2), eps = 1e-8.
void optimizer_step(std::vector<Tensor>& params, const std::vector<std::vector<float>>& grads,
                    OptimizerState& state, double lr, const TrainSettings& train);

// ---------------------------------------------------------------------------
// training loop

struct TrainResult {
    FlowStack model;
    OptimizerState opt;
    std::string final_checkpoint;
    std::vector<double> loss_history;
};

struct TrainingDiverged : std::runtime_error {
    using std::runtime_error::runtime_error;
};

TrainResult train(const RunConfig& cfg, Dataset& data, std::ostream* progress = nullptr,
                  const std::string& resume_path = "");

}  // namespace itarflow
