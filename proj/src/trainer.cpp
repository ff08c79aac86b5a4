#include "itarflow/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>

#include "itarflow/checkpoint.hpp"
#include "itarflow/dataset.hpp"
#include "itarflow/rng.hpp"

namespace itarflow {

PresetShape preset_shape(const std::string& name) {
    if (name == "desk") return {{1, 1, 1, 3}, 64, 4};
    if (name == "tiny") return {{1, 1}, 16, 2};
    throw std::invalid_argument("unknown architecture preset '" + name + "'");
}

ArchSpec arch_from_config(const RunConfig& cfg, const Dataset& data) {
    ArchSpec arch;
    if (cfg.preset == "custom") {
        arch.block_layers = cfg.block_layers;
        arch.width = cfg.width > 0 ? cfg.width : 64;
        arch.heads = cfg.heads;
    } else {
        PresetShape p = preset_shape(cfg.preset);
        arch.block_layers = p.block_layers;
        arch.width = cfg.width > 0 ? cfg.width : p.width;
        arch.heads = p.heads;
    }
    arch.time_dim = cfg.time_dim;
    arch.num_tokens = data.seq_len();
    arch.token_dim = data.token_dim();
    arch.num_classes = data.num_classes();
    arch.validate();
    return arch;
}

// ---------------------------------------------------------------------------
// patchify

std::vector<float> patchify(const std::vector<float>& image, int64_t h, int64_t w, int64_t c,
                            int64_t p) {
    if (p <= 0 || h % p != 0 || w % p != 0)
        throw std::invalid_argument("patchify: patch size " + std::to_string(p) +
                                    " does not divide " + std::to_string(h) + "x" +
                                    std::to_string(w));
    if (static_cast<int64_t>(image.size()) != h * w * c)
        throw std::invalid_argument("patchify: image buffer size mismatch");
    int64_t gh = h / p, gw = w / p;
    std::vector<float> tokens(h * w * c);
    int64_t d = p * p * c;
    for (int64_t gy = 0; gy < gh; ++gy)
        for (int64_t gx = 0; gx < gw; ++gx) {
            int64_t tok = gy * gw + gx;
            for (int64_t py = 0; py < p; ++py)
                for (int64_t px = 0; px < p; ++px)
                    for (int64_t ch = 0; ch < c; ++ch)
                        tokens[tok * d + (py * p + px) * c + ch] =
                            image[((gy * p + py) * w + gx * p + px) * c + ch];
        }
    return tokens;
}

std::vector<float> unpatchify(const std::vector<float>& tokens, int64_t h, int64_t w, int64_t c,
                              int64_t p) {
    if (p <= 0 || h % p != 0 || w % p != 0)
        throw std::invalid_argument("unpatchify: patch size does not divide image dims");
    if (static_cast<int64_t>(tokens.size()) != h * w * c)
        throw std::invalid_argument("unpatchify: token buffer size mismatch");
    int64_t gh = h / p, gw = w / p;
    std::vector<float> image(h * w * c);
    int64_t d = p * p * c;
    for (int64_t gy = 0; gy < gh; ++gy)
        for (int64_t gx = 0; gx < gw; ++gx) {
            int64_t tok = gy * gw + gx;
            for (int64_t py = 0; py < p; ++py)
                for (int64_t px = 0; px < p; ++px)
                    for (int64_t ch = 0; ch < c; ++ch)
                        image[((gy * p + py) * w + gx * p + px) * c + ch] =
                            tokens[tok * d + (py * p + px) * c + ch];
        }
    return image;
}

// ---------------------------------------------------------------------------
// noise

void NoiseSpec::validate() const {
    if (!(t_min > 0.0) || !(t_min <= t_max))
        throw std::invalid_argument("noise spec: need 0 < t_min <= t_max, got [" +
                                    std::to_string(t_min) + ", " + std::to_string(t_max) + "]");
}

NoiseDraw noise_draw(const Tensor& x, const NoiseSpec& spec, std::mt19937_64& rng) {
    spec.validate();
    const Shape& s = x.shape();
    int64_t batch = s[0];
    int64_t per = x.numel() / batch;
    std::uniform_real_distribution<double> ut(spec.t_min, spec.t_max);
    std::normal_distribution<double> eps(0.0, 1.0);
    std::vector<float> xt = x.values();
    std::vector<double> t(batch);
    for (int64_t b = 0; b < batch; ++b) {
        t[b] = ut(rng);
        for (int64_t i = 0; i < per; ++i)
            xt[b * per + i] += static_cast<float>(t[b] * eps(rng));
    }
    return {Tensor::from_data(s, std::move(xt)), std::move(t)};
}

// ---------------------------------------------------------------------------
// loss

LossResult loss(const FlowStack& model, const Tensor& x_clean, const std::vector<int64_t>& labels,
                const TrainSettings& train, std::mt19937_64& rng) {
    int64_t batch = x_clean.shape()[0];
    if (batch == 0 || static_cast<int64_t>(labels.size()) != batch)
        throw std::invalid_argument("loss: batch must be non-empty with one label per example");
    NoiseDraw nd = noise_draw(x_clean, {train.t_min, train.t_max}, rng);

    std::uniform_real_distribution<double> u01(0.0, 1.0);
    Conditioning cond;
    cond.t = nd.t;
    cond.label.resize(batch);
    for (int64_t b = 0; b < batch; ++b) {
        bool drop = u01(rng) < train.label_dropout;
        cond.label[b] = drop ? model.arch.null_class() : labels[b];
    }

    std::vector<double> gamma(batch);
    for (int64_t b = 0; b < batch; ++b) gamma[b] = gamma_weight(nd.t[b]);

    Tensor lp = log_likelihood(model, nd.x_t, cond);
    double d = static_cast<double>(model.arch.total_dim());
    double nats = 0.0, mean_t = 0.0;
    for (int64_t b = 0; b < batch; ++b) {
        if (!std::isfinite(lp.values()[b]))
            throw TrainingDiverged("loss: non-finite log-likelihood at t = " +
                                   std::to_string(nd.t[b]));
        nats += -static_cast<double>(lp.values()[b]) / d;
        mean_t += nd.t[b];
    }
    std::vector<float> wv(batch);
    for (int64_t b = 0; b < batch; ++b) wv[b] = static_cast<float>(-gamma[b] / d);
    Tensor value = mean(mul(lp, Tensor::from_data({batch}, std::move(wv))));
    return {value, nats / batch, mean_t / batch};
}

// ---------------------------------------------------------------------------
// schedule and optimizer

double lr_at(int64_t step, int64_t total_steps, int64_t warmup_steps, double lr_min,
             double lr_peak) {
    if (step < 0 || step > total_steps)
        throw std::invalid_argument("lr_at: step out of [0, total_steps]");
    if (warmup_steps > 0 && step <= warmup_steps)
        return lr_min + (lr_peak - lr_min) * static_cast<double>(step) / warmup_steps;
    double span = static_cast<double>(total_steps - warmup_steps);
    double progress = span > 0 ? static_cast<double>(step - warmup_steps) / span : 1.0;
    return lr_min + (lr_peak - lr_min) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

void optimizer_step(std::vector<Tensor>& params, const std::vector<std::vector<float>>& grads,
                    OptimizerState& state, double lr, const TrainSettings& train) {
    if (grads.size() != params.size())
        throw std::invalid_argument("optimizer_step: gradient count mismatch");
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].numel(), 0.0f);
            state.v[i].assign(params[i].numel(), 0.0f);
        }
    }
    ++state.step_count;
    const double b1 = train.beta1, b2 = train.beta2, eps = 1e-8;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
    const float decay = static_cast<float>(1.0 - lr * train.weight_decay);
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i].data();
        const auto& g = grads[i];
        if (g.size() != p.size())
            throw std::invalid_argument("optimizer_step: gradient shape mismatch for parameter " +
                                        std::to_string(i));
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (size_t j = 0; j < p.size(); ++j) {
            p[j] *= decay;
            m[j] = static_cast<float>(b1 * m[j] + (1.0 - b1) * g[j]);
            v[j] = static_cast<float>(b2 * v[j] + (1.0 - b2) * static_cast<double>(g[j]) * g[j]);
            double mhat = m[j] / bc1;
            double vhat = v[j] / bc2;
            p[j] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
        }
    }
}

// ---------------------------------------------------------------------------
// training loop

namespace {

// Stream ids for per-step RNG derivation; init streams use the block index.
constexpr uint64_t kStepStreamBase = 1u << 20;

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

}  // namespace

TrainResult train(const RunConfig& cfg, Dataset& data, std::ostream* progress,
                  const std::string& resume_path) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);

    FlowStack model = FlowStack::init(arch_from_config(cfg, data), cfg.seed);
    OptimizerState state;
    int64_t start_step = 0;
    if (!resume_path.empty()) {
        LoadedCheckpoint ck = checkpoint_load(resume_path);
        model = std::move(ck.model);
        state = std::move(ck.state);
        start_step = ck.step;
    }
    auto params = model.parameters();

    int64_t total = cfg.train.total_steps();
    int64_t warmup = cfg.train.warmup_steps();
    std::ofstream metrics;
    std::string metrics_path = cfg.out_dir + "/metrics.csv";
    metrics.open(metrics_path, start_step == 0 ? std::ios::trunc : std::ios::app);
    if (!metrics) throw std::runtime_error(metrics_path + ": cannot open metrics file");
    if (start_step == 0) metrics << "step,epoch,loss,nats_per_dim,lr,mean_t,wallclock_ms\n";

    std::vector<double> loss_history;
    auto run_start = std::chrono::steady_clock::now();
    for (int64_t step = start_step; step < total; ++step) {
        auto rng = make_rng(cfg.seed, kStepStreamBase + static_cast<uint64_t>(step));
        Batch batch = data.batch(cfg.train.batch_size, rng);
        double lr = lr_at(step, total, warmup, cfg.train.lr_min, cfg.train.lr_peak);

        LossResult lres;
        try {
            lres = loss(model, batch.x, batch.labels, cfg.train, rng);
        } catch (const TrainingDiverged& e) {
            throw TrainingDiverged(std::string(e.what()) + " (step " + std::to_string(step) +
                                   ", lr " + format_double(lr) + ")");
        }
        auto grads = gradient(lres.value, params);
        optimizer_step(params, grads, state, lr, cfg.train);

        int64_t epoch = step / cfg.train.steps_per_epoch;
        auto now = std::chrono::steady_clock::now();
        int64_t wall_ms =
            std::chrono::duration_cast<std::chrono::milliseconds>(now - run_start).count();
        metrics << step << "," << epoch << "," << format_double(lres.value.item()) << ","
                << format_double(lres.nats_per_dim) << "," << format_double(lr) << ","
                << format_double(lres.mean_t) << "," << wall_ms << "\n";
        loss_history.push_back(lres.value.item());

        if (progress && (step % 50 == 0 || step + 1 == total))
            *progress << "step " << step + 1 << "/" << total << " loss "
                      << format_double(lres.value.item()) << " nats/dim "
                      << format_double(lres.nats_per_dim) << " lr " << format_double(lr) << "\n";

        if (cfg.train.checkpoint_every > 0 && (step + 1) % cfg.train.checkpoint_every == 0 &&
            step + 1 < total) {
            char name[64];
            std::snprintf(name, sizeof(name), "/ckpt_%06lld.itar",
                          static_cast<long long>(step + 1));
            checkpoint_save(model, state, cfg, cfg.out_dir + name);
        }
    }
    metrics.flush();

    std::string final_path = cfg.out_dir + "/final.itar";
    checkpoint_save(model, state, cfg, final_path);
    return {std::move(model), std::move(state), final_path, std::move(loss_history)};
}

}  // namespace itarflow
