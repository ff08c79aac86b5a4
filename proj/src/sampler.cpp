#include "itarflow/sampler.hpp"

#include <cmath>

#include "itarflow/rng.hpp"

namespace itarflow {

namespace {

// Parameter gradients are irrelevant while sampling; switching them off keeps
// the score's reverse pass on the input path only.
struct ParamGradsOff {
    const FlowStack& model;
    explicit ParamGradsOff(const FlowStack& m) : model(m) {
        const_cast<FlowStack&>(model).set_param_grads(false);
    }
    ~ParamGradsOff() { const_cast<FlowStack&>(model).set_param_grads(true); }
};

// Inversion of one block with patch-wise guidance: conditional and
// unconditional caches advance in lockstep on the guided tokens.
Tensor guided_block_inverse(const CausalBlockT<float>& block, const Tensor& z,
                            const Conditioning& cond, const Conditioning& uncond, double w,
                            bool mu_only) {
    NoGradGuard ng;
    int64_t n = z.shape()[1];
    BlockCacheT<float> cache_c, cache_u;
    std::optional<Tensor> prev;
    std::vector<Tensor> xs;
    for (int64_t i = 0; i < n; ++i) {
        AffineParamsT<float> pc = block.affine_step(prev, i, cond, cache_c);
        AffineParamsT<float> pu = block.affine_step(prev, i, uncond, cache_u);
        AffineParamsT<float> g = cfg_combine(pc, pu, w, mu_only);
        Tensor zi = slice(z, 1, i, 1);
        Tensor xi = add(g.mu, mul(itarflow::exp(g.log_sigma), zi));
        for (float v : xi.values())
            if (!std::isfinite(v))
                throw std::runtime_error("ar_generate: non-finite token at position " +
                                         std::to_string(i));
        xs.push_back(xi);
        prev = xi;
    }
    return n == 1 ? xs[0] : concat(xs, 1);
}

}  // namespace

Tensor ar_generate(const FlowStack& model, const SampleRequest& req) {
    req.validate();
    NoGradGuard ng;
    const ArchSpec& arch = model.arch;
    auto rng = make_rng(req.seed);
    Tensor z = Tensor::randn({req.count, arch.num_tokens, arch.token_dim}, rng);

    int64_t label = req.class_id.value_or(arch.null_class());
    Conditioning cond = Conditioning::uniform(req.t_max, label, req.count);
    bool guided = req.class_id.has_value() && req.cfg_scale != 1.0;
    Conditioning uncond = cond.with_label(arch.null_class());

    Tensor x = z;
    for (int64_t l = static_cast<int64_t>(model.blocks.size()) - 1; l >= 0; --l) {
        if (l == 0 && guided)
            x = guided_block_inverse(model.blocks[0], x, cond, uncond, req.cfg_scale,
                                     req.cfg_mu_only);
        else
            x = block_inverse(model.blocks[l], x, cond);
        if (l > 0) x = permute(x);
    }
    return x;
}

DenoisedEstimate tweedie_denoise(const FlowStack& model, const Tensor& x_t, double t,
                                 std::optional<int64_t> class_id) {
    ParamGradsOff guard(model);
    int64_t batch = x_t.shape()[0];
    Conditioning cond =
        Conditioning::uniform(t, class_id.value_or(model.arch.null_class()), batch);
    Tensor s = score(model, x_t, cond);
    NoGradGuard ng;
    return {add(x_t, mul(s, static_cast<float>(t * t))), t};
}

Tensor denoise_ode(const Tensor& x_at_tmax, const SampleRequest& req, const ScoreFn& score_fn) {
    req.validate();
    NoGradGuard ng;
    int64_t k_steps = req.ode_steps;
    double span = req.t_max - req.t_min;
    Tensor x = x_at_tmax;
    for (int64_t k = 0; k < k_steps; ++k) {
        double t_k = req.t_max - span * static_cast<double>(k) / k_steps;
        double t_next = k + 1 == k_steps ? req.t_min
                                         : req.t_max - span * static_cast<double>(k + 1) / k_steps;
        Tensor s = score_fn(x, t_k);
        x = add(x, mul(s, static_cast<float>((t_k - t_next) * t_k)));
        for (float v : x.values())
            if (!std::isfinite(v))
                throw std::runtime_error("denoise_ode: non-finite state at step " +
                                         std::to_string(k));
    }
    if (req.final_tweedie) {
        Tensor s = score_fn(x, req.t_min);
        x = add(x, mul(s, static_cast<float>(req.t_min * req.t_min)));
    }
    return x;
}

Tensor denoise_ode(const FlowStack& model, const Tensor& x_at_tmax, const SampleRequest& req) {
    ParamGradsOff guard(model);
    int64_t batch = x_at_tmax.shape()[0];
    int64_t label = req.class_id.value_or(model.arch.null_class());
    // no guidance during denoising
    ScoreFn fn = [&](const Tensor& x, double t) {
        return score(model, x, Conditioning::uniform(t, label, batch));
    };
    return denoise_ode(x_at_tmax, req, fn);
}

}  // namespace itarflow
