#pragma once

// Two-phase generation. Phase one draws from the Gaussian prior and inverts
// the stack autoregressively at t_max, applying patch-wise classifier-free
// guidance only while inverting the first block (the last one applied, nearest
// the data side). Phase two integrates dx = -t grad log p dt from t_max down
// to t_min with explicit Euler on a linear grid, optionally finishing with a
// single posterior-mean (Tweedie) hop at t_min.

#include <cstdint>
#include <functional>
#include <optional>

#include "itarflow/flow.hpp"
#include "itarflow/tensor.hpp"

namespace itarflow {

struct SampleRequest {
    int64_t count = 1;
    std::optional<int64_t> class_id;  // nullopt samples unconditionally
    double cfg_scale = 1.0;           // w >= 1
    int64_t ode_steps = 10;           // K >= 1
    double t_max = 0.5;
    double t_min = 0.01;
    bool final_tweedie = true;
    bool cfg_mu_only = false;  // extrapolate mu only, keep the conditional scale
    uint64_t seed = 1;

    void validate() const {
        if (count < 1) throw std::invalid_argument("sample request: count must be >= 1");
        if (cfg_scale < 1.0) throw std::invalid_argument("sample request: cfg scale must be >= 1");
        if (ode_steps < 1) throw std::invalid_argument("sample request: ode steps must be >= 1");
        if (!(t_min > 0.0) || !(t_min < t_max))
            throw std::invalid_argument("sample request: need 0 < t_min < t_max");
    }
};

// Guided affine parameters: mu and log sigma extrapolate from unconditional
// toward conditional with scale w. w == 1 returns the conditional parameters
// unchanged, bitwise.
template <typename T>
AffineParamsT<T> cfg_combine(const AffineParamsT<T>& cond, const AffineParamsT<T>& uncond,
                             double w, bool mu_only = false) {
    if (w < 1.0) throw std::invalid_argument("cfg_combine: w must be >= 1");
    if (w == 1.0) return cond;
    T wt = static_cast<T>(w);
    AffineParamsT<T> out;
    out.mu = add(uncond.mu, mul(sub(cond.mu, uncond.mu), wt));
    out.log_sigma = mu_only ? cond.log_sigma
                            : add(uncond.log_sigma, mul(sub(cond.log_sigma, uncond.log_sigma), wt));
    return out;
}

// Prior draw + autoregressive inversion; returns tokens at noise level t_max.
Tensor ar_generate(const FlowStack& model, const SampleRequest& req);

struct DenoisedEstimate {
    Tensor x_hat;
    double t;
};

// Single-step posterior mean: x_hat = x_t + t^2 * score(x_t, t, y).
DenoisedEstimate tweedie_denoise(const FlowStack& model, const Tensor& x_t, double t,
                                 std::optional<int64_t> class_id);

using ScoreFn = std::function<Tensor(const Tensor& x, double t)>;

// Euler integration of the denoising ODE on a linear t-grid with K intervals;
// the model (or stub) is only ever queried inside [t_min, t_max].
Tensor denoise_ode(const Tensor& x_at_tmax, const SampleRequest& req, const ScoreFn& score_fn);
Tensor denoise_ode(const FlowStack& model, const Tensor& x_at_tmax, const SampleRequest& req);

}  // namespace itarflow
