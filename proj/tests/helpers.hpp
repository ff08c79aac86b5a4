#pragma once

// Shared test utilities: quadrature oracles, random model builders, naive
// reference implementations kept independent of the library code paths they
// check.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "itarflow/flow.hpp"
#include "itarflow/oracle.hpp"
#include "itarflow/tensor.hpp"

namespace testutil {

// Composite Simpson on [lo, hi]; n must be even.
inline double simpson(const std::function<double(double)>& f, double lo, double hi, int n = 20000) {
    double h = (hi - lo) / n;
    double acc = f(lo) + f(hi);
    for (int i = 1; i < n; ++i) acc += f(lo + i * h) * (i % 2 ? 4.0 : 2.0);
    return acc * h / 3.0;
}

inline double normal_pdf(double x, double mean, double sigma) {
    double z = (x - mean) / sigma;
    return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * M_PI));
}

// Flow stack with non-trivial affine heads (init zeroes them).
template <typename T = float>
itarflow::FlowStackT<T> random_stack(const itarflow::ArchSpec& arch, uint64_t seed,
                                     double head_scale = 0.05) {
    auto stack = itarflow::FlowStackT<T>::init(arch, seed);
    std::mt19937_64 rng(itarflow::mix_seed(seed, 777));
    std::normal_distribution<double> n(0.0, head_scale);
    for (auto& block : stack.blocks) {
        for (auto& v : block.w_out.data()) v = static_cast<T>(n(rng));
        for (auto& v : block.b_out.data()) v = static_cast<T>(n(rng));
    }
    return stack;
}

// O(N^2) reference inverse: re-runs the full parallel pass for every token.
template <typename T>
itarflow::TensorT<T> naive_block_inverse(const itarflow::CausalBlockT<T>& block,
                                         const itarflow::TensorT<T>& z,
                                         const itarflow::Conditioning& cond) {
    using namespace itarflow;
    NoGradGuard ng;
    const Shape& s = z.shape();
    int64_t batch = s[0], n = s[1], d = s[2];
    TensorT<T> x = TensorT<T>::zeros({batch, n, d});
    for (int64_t i = 0; i < n; ++i) {
        TensorT<T> prefix = slice(x, 1, 0, i + 1);  // token i is a placeholder
        auto p = block.affine_params(prefix, cond);
        TensorT<T> mu = slice(p.mu, 1, i, 1);
        TensorT<T> ls = slice(p.log_sigma, 1, i, 1);
        TensorT<T> xi = add(mu, mul(itarflow::exp(ls), slice(z, 1, i, 1)));
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t j = 0; j < d; ++j)
                x.data()[(b * n + i) * d + j] = xi.values()[b * d + j];
    }
    return x;
}

inline itarflow::oracle::GaussianMixture two_mode_gmm() {
    itarflow::oracle::GaussianMixture g;
    g.weights = {0.5, 0.5};
    g.means = {{-1.0}, {1.0}};
    g.sigmas = {0.3, 0.3};
    g.dim = 1;
    g.validate();
    return g;
}

}  // namespace testutil
