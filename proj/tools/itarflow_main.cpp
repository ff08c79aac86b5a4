// Command-line shell: train / sample / denoise / verify / eval.
//
// All randomness is seeded from the config or --seed, so every subcommand is
// reproducible. ITARFLOW_THREADS caps engine parallelism (0 = auto).

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "itarflow/checkpoint.hpp"
#include "itarflow/config.hpp"
#include "itarflow/dataset.hpp"
#include "itarflow/flow.hpp"
#include "itarflow/image_io.hpp"
#include "itarflow/oracle.hpp"
#include "itarflow/rng.hpp"
#include "itarflow/sampler.hpp"
#include "itarflow/trainer.hpp"

using namespace itarflow;

namespace {

namespace fs = std::filesystem;

bool is_image_task(const RunConfig& cfg) {
    return cfg.task == "idx-file" || cfg.task == "image-dir";
}

void write_samples_csv(const Tensor& samples, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error(path + ": cannot write");
    const Shape& s = samples.shape();
    int64_t batch = s[0], d = s[1] * s[2];
    char buf[32];
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t i = 0; i < d; ++i) {
            std::snprintf(buf, sizeof(buf), "%.9g", samples.values()[b * d + i]);
            out << (i ? "," : "") << buf;
        }
        out << "\n";
    }
}

Tensor read_samples_csv(const std::string& path, int64_t n, int64_t d) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(path + ": cannot open");
    std::vector<float> vals;
    std::string line;
    int64_t rows = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        int64_t cols = 0;
        while (std::getline(ss, cell, ',')) {
            vals.push_back(std::stof(cell));
            ++cols;
        }
        if (cols != n * d)
            throw std::runtime_error(path + ": row " + std::to_string(rows + 1) + " has " +
                                     std::to_string(cols) + " values, expected " +
                                     std::to_string(n * d));
        ++rows;
    }
    if (rows == 0) throw std::runtime_error(path + ": no samples");
    return Tensor::from_data({rows, n, d}, std::move(vals));
}

struct GridGeometry {
    int64_t rows, cols;
};

GridGeometry grid_for(int64_t count) {
    int64_t cols = static_cast<int64_t>(std::ceil(std::sqrt(static_cast<double>(count))));
    int64_t rows = (count + cols - 1) / cols;
    return {rows, cols};
}

void emit_token_grid(const Tensor& tokens, const RunConfig& cfg, const Dataset& data,
                     const std::string& path) {
    int64_t h = data.image_h(), w = data.image_w(), c = data.image_c(), p = data.patch_size();
    int64_t count = tokens.shape()[0];
    int64_t per = tokens.numel() / count;
    std::vector<std::vector<float>> images(count);
    for (int64_t b = 0; b < count; ++b) {
        std::vector<float> tok(tokens.values().begin() + b * per,
                               tokens.values().begin() + (b + 1) * per);
        images[b] = unpatchify(tok, h, w, c, p);
    }
    GridGeometry g = grid_for(count);
    emit_image_grid(images, h, w, c, g.rows, g.cols, path);
    (void)cfg;
}

// Splits a gutter-framed grid raster back into per-sample token sequences.
Tensor read_token_grid(const std::string& path, int64_t h, int64_t w, int64_t c, int64_t p) {
    RasterImage img = read_raster(path);
    if (img.c != c) throw std::runtime_error(path + ": channel count does not match the model");
    const int64_t gutter = 2;
    int64_t rows = (img.h - gutter) / (h + gutter);
    int64_t cols = (img.w - gutter) / (w + gutter);
    if (rows < 1 || cols < 1 || rows * (h + gutter) + gutter != img.h ||
        cols * (w + gutter) + gutter != img.w)
        throw std::runtime_error(path + ": raster is not a grid of " + std::to_string(h) + "x" +
                                 std::to_string(w) + " tiles");
    std::vector<float> all;
    for (int64_t gr = 0; gr < rows; ++gr)
        for (int64_t gc = 0; gc < cols; ++gc) {
            std::vector<float> image(h * w * c);
            int64_t top = gutter + gr * (h + gutter), left = gutter + gc * (w + gutter);
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x)
                    for (int64_t ch = 0; ch < c; ++ch)
                        image[(y * w + x) * c + ch] =
                            img.pixels[((top + y) * img.w + left + x) * c + ch] / 127.5f - 1.0f;
            auto tok = patchify(image, h, w, c, p);
            all.insert(all.end(), tok.begin(), tok.end());
        }
    int64_t n = (h / p) * (w / p), d = p * p * c;
    return Tensor::from_data({rows * cols, n, d}, std::move(all));
}

// ---------------------------------------------------------------------------

int cmd_train(const std::string& config_path, const std::string& resume,
              std::optional<uint64_t> seed) {
    RunConfig cfg = parse_config(config_path);
    if (seed) cfg.seed = *seed;
    auto data = make_dataset(cfg);
    TrainResult r = train(cfg, *data, &std::cerr, resume);
    std::cout << "final checkpoint: " << r.final_checkpoint << "\n";
    std::cout << "metrics: " << cfg.out_dir << "/metrics.csv\n";
    return 0;
}

int cmd_sample(const std::string& ckpt, int64_t count, std::optional<int64_t> class_id,
               std::optional<double> cfg_scale, std::optional<int64_t> steps,
               std::optional<double> tmax, std::optional<double> tmin, bool no_final_tweedie,
               std::optional<uint64_t> seed, const std::string& out_dir) {
    LoadedCheckpoint ck = checkpoint_load(ckpt);
    RunConfig& cfg = ck.config;

    SampleRequest req;
    req.count = count > 0 ? count : cfg.sample_count;
    req.class_id = class_id;
    req.cfg_scale = cfg_scale.value_or(cfg.cfg_scale);
    req.ode_steps = steps.value_or(cfg.ode_steps);
    req.t_max = tmax.value_or(cfg.train.t_max);
    req.t_min = tmin.value_or(cfg.train.t_min);
    req.final_tweedie = no_final_tweedie ? false : cfg.final_tweedie;
    req.cfg_mu_only = cfg.cfg_mu_only;
    req.seed = seed.value_or(cfg.seed);

    fs::create_directories(out_dir);
    Tensor noisy = ar_generate(ck.model, req);
    Tensor clean = denoise_ode(ck.model, noisy, req);

    if (is_image_task(cfg)) {
        auto data = make_dataset(cfg);
        emit_token_grid(noisy, cfg, *data, out_dir + "/grid_noisy" +
                                               (data->image_c() == 3 ? ".ppm" : ".pgm"));
        emit_token_grid(clean, cfg, *data, out_dir + "/grid_denoised" +
                                               (data->image_c() == 3 ? ".ppm" : ".pgm"));
        std::cout << "wrote " << out_dir << "/grid_noisy and grid_denoised\n";
    } else {
        write_samples_csv(noisy, out_dir + "/samples_noisy.csv");
        write_samples_csv(clean, out_dir + "/samples_denoised.csv");
        std::cout << "wrote " << out_dir << "/samples_noisy.csv and samples_denoised.csv\n";
    }
    return 0;
}

int cmd_denoise(const std::string& ckpt, const std::string& in_path, double t, int64_t steps,
                std::optional<int64_t> class_id, const std::string& out_path) {
    LoadedCheckpoint ck = checkpoint_load(ckpt);
    RunConfig& cfg = ck.config;
    const ArchSpec& arch = ck.model.arch;

    bool grid_input = in_path.size() > 4 && (in_path.substr(in_path.size() - 4) == ".pgm" ||
                                             in_path.substr(in_path.size() - 4) == ".ppm");
    Tensor x;
    std::unique_ptr<Dataset> data;
    if (grid_input) {
        data = make_dataset(cfg);
        x = read_token_grid(in_path, data->image_h(), data->image_w(), data->image_c(),
                            data->patch_size());
    } else {
        x = read_samples_csv(in_path, arch.num_tokens, arch.token_dim);
    }

    SampleRequest req;
    req.count = x.shape()[0];
    req.class_id = class_id;
    req.ode_steps = steps;
    req.t_max = t;
    req.t_min = cfg.train.t_min;
    req.final_tweedie = cfg.final_tweedie;
    Tensor out = denoise_ode(ck.model, x, req);

    if (grid_input) {
        emit_token_grid(out, cfg, *data, out_path);
    } else {
        write_samples_csv(out, out_path);
    }
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// verify: the invariant suite, measured tolerances printed per check

struct CheckReporter {
    int failures = 0;
    void report(const std::string& name, bool pass, const std::string& detail) {
        std::cout << (pass ? "[PASS] " : "[FAIL] ") << name << ": " << detail << "\n";
        if (!pass) ++failures;
    }
};

int cmd_verify(const std::string& ckpt, int trials, uint64_t seed) {
    LoadedCheckpoint ck = checkpoint_load(ckpt);
    FlowStack& model = ck.model;
    const ArchSpec& arch = model.arch;
    double t_mid = 0.5 * (ck.config.train.t_min + ck.config.train.t_max);
    CheckReporter rep;

    // invertibility
    {
        float worst = 0.0f;
        for (int i = 0; i < trials; ++i) {
            auto rng = make_rng(seed, 100 + i);
            Tensor x = Tensor::randn({2, arch.num_tokens, arch.token_dim}, rng);
            Conditioning cond = Conditioning::uniform(t_mid, i % (arch.num_classes + 1), 2);
            auto f = stack_forward(model, x, cond);
            Tensor back = stack_inverse(model, f.z, cond);
            for (size_t j = 0; j < x.values().size(); ++j)
                worst = std::max(worst, std::abs(back.values()[j] - x.values()[j]));
        }
        rep.report("invertibility", worst < 1e-3f,
                   "max |x - f_inv(f(x))| = " + std::to_string(worst) + " (tol 1e-3, " +
                       std::to_string(trials) + " trials)");
    }

    // exact likelihood vs brute-force Jacobian (double precision)
    if (arch.total_dim() <= 12) {
        auto dmodel = model.cast<double>();
        auto rng = make_rng(seed, 200);
        double worst = 0.0, logdet_seen = 0.0;
        for (int i = 0; i < std::min(trials, 5); ++i) {
            DTensor x = DTensor::randn({1, arch.num_tokens, arch.token_dim}, rng);
            Conditioning cond = Conditioning::uniform(t_mid, i % (arch.num_classes + 1), 1);
            auto f = stack_forward(dmodel, x, cond);
            auto map = [&](const DTensor& v) {
                return stack_forward(dmodel, reshape(v, x.shape()), cond).z;
            };
            double brute = oracle::brute_jacobian_logdet(map, reshape(x, {arch.total_dim()}));
            worst = std::max(worst, std::abs(f.log_det.values()[0] - brute));
            logdet_seen = f.log_det.values()[0];
        }
        rep.report("exact-likelihood", worst < 1e-5,
                   "max |log_det - brute| = " + std::to_string(worst) +
                       " (tol 1e-5), last log_det = " + std::to_string(logdet_seen));
    } else {
        std::cout << "[SKIP] exact-likelihood: D = " << arch.total_dim()
                  << " exceeds the brute-force guard (12)\n";
    }

    // causality (bitwise, every block, every position)
    {
        bool ok = true;
        auto rng = make_rng(seed, 300);
        Tensor x = Tensor::randn({1, arch.num_tokens, arch.token_dim}, rng);
        Conditioning cond = Conditioning::uniform(t_mid, 0, 1);
        for (size_t bi = 0; bi < model.blocks.size() && ok; ++bi) {
            auto base = model.blocks[bi].affine_params(x, cond);
            for (int64_t m = 0; m < arch.num_tokens && ok; ++m) {
                Tensor xp = Tensor::from_data(x.shape(), x.values());
                for (int64_t j = 0; j < arch.token_dim; ++j)
                    xp.data()[m * arch.token_dim + j] += 1.0f;
                auto pert = model.blocks[bi].affine_params(xp, cond);
                for (int64_t n = 0; n <= m && ok; ++n)
                    for (int64_t j = 0; j < arch.token_dim; ++j) {
                        int64_t idx = n * arch.token_dim + j;
                        if (pert.mu.values()[idx] != base.mu.values()[idx] ||
                            pert.log_sigma.values()[idx] != base.log_sigma.values()[idx])
                            ok = false;
                    }
            }
        }
        rep.report("causality", ok, ok ? "affine params at n <= m bitwise invariant" : "violated");
    }

    // score vs central differences of the log-likelihood (double precision)
    {
        auto dmodel = model.cast<double>();
        auto rng = make_rng(seed, 400);
        double worst = 0.0;
        Tensor x = Tensor::randn({1, arch.num_tokens, arch.token_dim}, rng);
        Conditioning cond = Conditioning::uniform(t_mid, 0, 1);
        Tensor s = score(model, x, cond);
        NoGradGuard ng;
        double h = 1e-3;
        for (size_t i = 0; i < x.values().size(); ++i) {
            std::vector<double> xp(x.values().begin(), x.values().end());
            std::vector<double> xm = xp;
            xp[i] += h;
            xm[i] -= h;
            double lp =
                log_likelihood(dmodel, DTensor::from_data(x.shape(), std::move(xp)), cond).values()[0];
            double lm =
                log_likelihood(dmodel, DTensor::from_data(x.shape(), std::move(xm)), cond).values()[0];
            double fd = (lp - lm) / (2 * h);
            worst = std::max(worst, std::abs(s.values()[i] - fd) / (std::abs(fd) + 1e-8));
        }
        rep.report("score", worst < 1e-3,
                   "max rel err vs finite differences = " + std::to_string(worst) + " (tol 1e-3)");
    }

    // permutation neutrality: an extra flip pair changes nothing
    {
        auto rng = make_rng(seed, 500);
        Tensor x = Tensor::randn({1, arch.num_tokens, arch.token_dim}, rng);
        Conditioning cond = Conditioning::uniform(t_mid, 0, 1);
        NoGradGuard ng;
        auto ref = stack_forward(model, x, cond);
        double worst = 0.0;
        for (size_t at = 0; at < model.blocks.size(); ++at) {
            Tensor z = x;
            Tensor log_det;
            for (size_t l = 0; l < model.blocks.size(); ++l) {
                auto r = block_forward(model.blocks[l], z, cond);
                z = r.z;
                log_det = l == 0 ? r.neg_log_sigma_sum : add(log_det, r.neg_log_sigma_sum);
                if (l == at) z = permute(permute(z));
                if (l + 1 < model.blocks.size()) z = permute(z);
            }
            worst = std::max(worst,
                             static_cast<double>(std::abs(log_det.values()[0] - ref.log_det.values()[0])));
            for (size_t j = 0; j < z.values().size(); ++j)
                worst = std::max(worst,
                                 static_cast<double>(std::abs(z.values()[j] - ref.z.values()[j])));
        }
        rep.report("permutation-neutrality", worst < 1e-6,
                   "max deviation with inserted flip pairs = " + std::to_string(worst) +
                       " (tol 1e-6)");
    }

    // CFG neutrality at w = 1 (bitwise)
    {
        SampleRequest req;
        req.count = 2;
        req.class_id = 0;
        req.cfg_scale = 1.0;
        req.t_max = ck.config.train.t_max;
        req.t_min = ck.config.train.t_min;
        req.seed = seed;
        Tensor guided = ar_generate(model, req);
        auto rng = make_rng(req.seed);
        Tensor z = Tensor::randn({2, arch.num_tokens, arch.token_dim}, rng);
        Tensor ref = stack_inverse(model, z, Conditioning::uniform(req.t_max, 0, 2));
        rep.report("cfg-neutrality", guided.values() == ref.values(),
                   "w = 1 sampling vs plain conditional inversion (bitwise)");
    }

    std::cout << (rep.failures == 0 ? "verify: all checks passed\n"
                                    : "verify: " + std::to_string(rep.failures) + " check(s) failed\n");
    return rep.failures == 0 ? 0 : 1;
}

// ---------------------------------------------------------------------------
// eval: NLL vs oracle and energy-distance report for analytic tasks

int cmd_eval(const std::string& ckpt, const std::string& task_override, int64_t samples,
             uint64_t seed) {
    LoadedCheckpoint ck = checkpoint_load(ckpt);
    RunConfig cfg = ck.config;
    if (!task_override.empty()) cfg.task = task_override;
    auto data = make_dataset(cfg);
    FlowStack& model = ck.model;
    const ArchSpec& arch = model.arch;
    double d = static_cast<double>(arch.total_dim());
    const oracle::GaussianMixture* gmm = data->analytic_gmm();

    // mean NLL over t ~ U[t_min, t_max] vs the closed form
    {
        auto rng = make_rng(seed, 1);
        int64_t batch = std::min<int64_t>(samples, 4096);
        Batch b = data->batch(batch, rng);
        NoiseDraw nd = noise_draw(b.x, {cfg.train.t_min, cfg.train.t_max}, rng);
        Conditioning cond;
        cond.t = nd.t;
        cond.label.assign(batch, arch.null_class());
        NoGradGuard ng;
        auto lp = log_likelihood(model, nd.x_t, cond).values();
        double model_nats = 0.0;
        for (int64_t i = 0; i < batch; ++i) model_nats += -lp[i] / d;
        model_nats /= batch;
        std::printf("model nll: %.4f nats/dim (%lld sequences)\n", model_nats,
                    static_cast<long long>(batch));
        if (gmm) {
            double oracle_nats = 0.0;
            for (int64_t i = 0; i < batch; ++i) {
                for (int64_t j = 0; j < arch.num_tokens; ++j) {
                    std::vector<double> tok(gmm->dim);
                    for (int k = 0; k < gmm->dim; ++k)
                        tok[k] = nd.x_t.values()[(i * arch.num_tokens + j) * gmm->dim + k];
                    oracle_nats += -oracle::gmm_logpdf_noised(tok, nd.t[i], *gmm) / d;
                }
            }
            oracle_nats /= batch;
            std::printf("oracle nll: %.4f nats/dim, gap %.4f\n", oracle_nats,
                        model_nats - oracle_nats);
        }
    }

    // score alignment at a few noise levels
    if (gmm) {
        for (double t : {0.1, 0.3, 0.5}) {
            if (t < cfg.train.t_min || t > cfg.train.t_max) continue;
            auto rng = make_rng(seed, 2 + static_cast<uint64_t>(t * 100));
            int64_t batch = std::min<int64_t>(samples, 1024);
            Batch b = data->batch(batch, rng);
            NoiseDraw nd = noise_draw(b.x, {t, t + 1e-12}, rng);
            Conditioning cond = Conditioning::uniform(t, arch.null_class(), batch);
            Tensor s = score(model, nd.x_t, cond);
            double dot = 0.0, nm = 0.0, no = 0.0;
            for (int64_t i = 0; i < batch; ++i)
                for (int64_t j = 0; j < arch.num_tokens; ++j) {
                    std::vector<double> tok(gmm->dim);
                    for (int k = 0; k < gmm->dim; ++k)
                        tok[k] = nd.x_t.values()[(i * arch.num_tokens + j) * gmm->dim + k];
                    auto os = oracle::gmm_score_noised(tok, t, *gmm);
                    for (int k = 0; k < gmm->dim; ++k) {
                        double ms = s.values()[(i * arch.num_tokens + j) * gmm->dim + k];
                        dot += ms * os[k];
                        nm += ms * ms;
                        no += os[k] * os[k];
                    }
                }
            std::printf("score cosine vs oracle at t = %.2f: %.4f\n", t,
                        dot / (std::sqrt(nm) * std::sqrt(no) + 1e-300));
        }
    }

    // generative quality: energy distance of sampled-and-denoised vs clean
    {
        int64_t want = samples;
        int64_t seqs = (want + arch.num_tokens - 1) / arch.num_tokens;
        SampleRequest req;
        req.count = seqs;
        req.ode_steps = cfg.ode_steps;
        req.t_max = cfg.train.t_max;
        req.t_min = cfg.train.t_min;
        req.final_tweedie = cfg.final_tweedie;
        req.seed = mix_seed(seed, 3);
        Tensor noisy = ar_generate(model, req);
        Tensor clean = denoise_ode(model, noisy, req);

        auto rng = make_rng(seed, 4);
        Batch ref = data->batch(seqs, rng);
        std::vector<double> gen(clean.values().begin(), clean.values().end());
        std::vector<double> dat(ref.x.values().begin(), ref.x.values().end());
        auto ed = oracle::energy_distance(gen, dat, static_cast<int>(arch.token_dim));
        std::printf("energy distance (K = %lld): %.5f +- %.5f (%zu points)\n",
                    static_cast<long long>(req.ode_steps), ed.value, ed.std_error,
                    gen.size() / arch.token_dim);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"invertible causal-transformer autoregressive flow"};
    app.require_subcommand(1);

    // train
    std::string config_path, resume;
    std::optional<uint64_t> seed_override;
    auto* train_cmd = app.add_subcommand("train", "train a model from a config file");
    train_cmd->add_option("--config", config_path, "run configuration file")->required();
    train_cmd->add_option("--resume", resume, "checkpoint to resume from");
    train_cmd->add_option("--seed", seed_override, "override the config seed");

    // sample
    std::string ckpt, out_dir;
    int64_t count = 0;
    std::optional<int64_t> class_id;
    std::optional<double> cfg_scale, tmax, tmin;
    std::optional<int64_t> steps;
    bool no_final_tweedie = false;
    std::optional<uint64_t> sample_seed;
    auto* sample_cmd = app.add_subcommand("sample", "generate and denoise samples");
    sample_cmd->add_option("--ckpt", ckpt, "checkpoint path")->required();
    sample_cmd->add_option("--count", count, "number of samples");
    sample_cmd->add_option("--class", class_id, "class id (omit for unconditional)");
    sample_cmd->add_option("--cfg", cfg_scale, "guidance scale w >= 1");
    sample_cmd->add_option("--steps", steps, "denoising steps K");
    sample_cmd->add_option("--tmax", tmax, "starting noise level");
    sample_cmd->add_option("--tmin", tmin, "terminal noise level");
    sample_cmd->add_flag("--no-final-tweedie", no_final_tweedie, "skip the terminal hop");
    sample_cmd->add_option("--seed", sample_seed, "sampling seed");
    sample_cmd->add_option("--out", out_dir, "output directory")->required();

    // denoise
    std::string in_path, out_path;
    double dt = 0.3;
    int64_t dsteps = 10;
    std::optional<int64_t> dclass;
    auto* denoise_cmd = app.add_subcommand("denoise", "denoise external samples");
    denoise_cmd->add_option("--ckpt", ckpt, "checkpoint path")->required();
    denoise_cmd->add_option("--in", in_path, "input grid (.pgm/.ppm) or .csv")->required();
    denoise_cmd->add_option("--t", dt, "noise level of the input")->required();
    denoise_cmd->add_option("--steps", dsteps, "denoising steps K");
    denoise_cmd->add_option("--class", dclass, "class id (omit for unconditional)");
    denoise_cmd->add_option("--out", out_path, "output path")->required();

    // verify
    int trials = 20;
    uint64_t vseed = 1;
    auto* verify_cmd = app.add_subcommand("verify", "run the invariant suite on a checkpoint");
    verify_cmd->add_option("--ckpt", ckpt, "checkpoint path")->required();
    verify_cmd->add_option("--trials", trials, "round-trip trials");
    verify_cmd->add_option("--seed", vseed, "probe seed");

    // eval
    std::string task_override;
    int64_t eval_samples = 10000;
    uint64_t eseed = 1;
    auto* eval_cmd = app.add_subcommand("eval", "report NLL and energy distance vs the oracle");
    eval_cmd->add_option("--ckpt", ckpt, "checkpoint path")->required();
    eval_cmd->add_option("--task", task_override, "task name (defaults to the checkpoint's)");
    eval_cmd->add_option("--samples", eval_samples, "sample budget");
    eval_cmd->add_option("--seed", eseed, "evaluation seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand(train_cmd))
            return cmd_train(config_path, resume, seed_override);
        if (app.got_subcommand(sample_cmd))
            return cmd_sample(ckpt, count, class_id, cfg_scale, steps, tmax, tmin,
                              no_final_tweedie, sample_seed, out_dir);
        if (app.got_subcommand(denoise_cmd))
            return cmd_denoise(ckpt, in_path, dt, dsteps, dclass, out_path);
        if (app.got_subcommand(verify_cmd)) return cmd_verify(ckpt, trials, vseed);
        if (app.got_subcommand(eval_cmd)) return cmd_eval(ckpt, task_override, eval_samples, eseed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
