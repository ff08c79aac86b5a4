#pragma once

// Invertible causal-transformer autoregressive flow.
//
// A stack of L causal transformer blocks maps token sequences to a standard
// normal latent. Each block predicts per-token affine parameters from the
// strictly-preceding tokens (inputs are shifted right by one position), so the
// Jacobian is triangular and the log-determinant is -sum(log sigma). A token
// flip is applied between consecutive blocks to alternate the conditioning
// direction. Noise-level and class conditioning are added to every block's
// embedding stream.
//
// Tensors are batched (B, N, d). The sequential inverse keeps per-layer
// key/value caches so a full inversion costs O(N) transformer token
// evaluations and is bitwise identical to re-running the parallel pass.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "itarflow/rng.hpp"
#include "itarflow/tensor.hpp"

namespace itarflow {

constexpr double kLog2Pi = 1.8378770664093454836;

// [sin(w_k log t), ..., cos(w_k log t), ...] with w_k log-spaced in [1, 1000].
inline std::vector<double> fourier_time_embedding(double t, int dim) {
    if (t <= 0.0) throw std::domain_error("fourier_time_embedding: t must be positive");
    if (dim <= 0 || dim % 2 != 0)
        throw std::invalid_argument("fourier_time_embedding: dim must be even and positive");
    int half = dim / 2;
    std::vector<double> out(dim);
    double lt = std::log(t);
    for (int k = 0; k < half; ++k) {
        double w = half == 1 ? 1.0 : std::exp(std::log(1000.0) * k / (half - 1));
        out[k] = std::sin(w * lt);
        out[half + k] = std::cos(w * lt);
    }
    return out;
}

struct ArchSpec {
    int64_t num_tokens = 1;              // N
    int64_t token_dim = 1;               // d
    std::vector<int> block_layers{1};    // attention layers per block; L = size()
    int64_t width = 64;                  // channel width
    int heads = 4;
    int64_t time_dim = 32;               // fourier embedding size, even
    int64_t num_classes = 1;             // embedding table gets one extra null row

    int64_t total_dim() const { return num_tokens * token_dim; }
    int64_t num_blocks() const { return static_cast<int64_t>(block_layers.size()); }
    int64_t null_class() const { return num_classes; }

    void validate() const {
        if (num_tokens < 1 || token_dim < 1) throw std::invalid_argument("arch: N and d must be >= 1");
        if (block_layers.empty()) throw std::invalid_argument("arch: need at least one block");
        if (width % heads != 0) throw std::invalid_argument("arch: width must be divisible by heads");
        if (time_dim <= 0 || time_dim % 2 != 0)
            throw std::invalid_argument("arch: time_dim must be even and positive");
        if (num_classes < 1) throw std::invalid_argument("arch: num_classes must be >= 1");
    }
};

// Per-example conditioning: one noise level and one class id per sequence.
// `label` entries equal to ArchSpec::null_class() select the null embedding.
struct Conditioning {
    std::vector<double> t;
    std::vector<int64_t> label;

    static Conditioning uniform(double t, int64_t label, int64_t batch) {
        Conditioning c;
        c.t.assign(batch, t);
        c.label.assign(batch, label);
        return c;
    }
    Conditioning with_label(int64_t l) const {
        Conditioning c = *this;
        c.label.assign(c.label.size(), l);
        return c;
    }
};

template <typename T>
struct AffineParamsT {
    TensorT<T> mu;         // (B, N, d)
    TensorT<T> log_sigma;  // (B, N, d), smooth-clamped to (-7, 7)
};

template <typename T>
struct AttentionLayerT {
    TensorT<T> ln1_g, ln1_b, wqkv, bqkv, wproj, bproj;
    TensorT<T> ln2_g, ln2_b, wfc1, bfc1, wfc2, bfc2;
};

// Incremental inversion state: cached keys/values per attention layer.
template <typename T>
struct BlockCacheT {
    std::vector<TensorT<T>> k, v;  // (B, heads, filled, head_dim)
    int64_t filled = 0;
};

template <typename T>
struct CausalBlockT {
    ArchSpec arch;
    int layer_count = 0;

    TensorT<T> w_in, b_in;              // token embedding d -> width
    TensorT<T> pos;                     // (N, width)
    TensorT<T> w_t1, b_t1, w_t2, b_t2;  // time MLP on the fourier features
    TensorT<T> class_embed;             // (num_classes + 1, width)
    std::vector<AttentionLayerT<T>> layers;
    TensorT<T> ln_out_g, ln_out_b;
    TensorT<T> w_out, b_out;            // head width -> 2d, zero-initialized

    static CausalBlockT init(const ArchSpec& arch, int layer_count, std::mt19937_64& rng) {
        CausalBlockT b;
        b.arch = arch;
        b.layer_count = layer_count;
        int64_t w = arch.width;
        auto lin = [&](int64_t in, int64_t out) {
            return TensorT<T>::randn({in, out}, rng, static_cast<T>(1.0 / std::sqrt((double)in)), true);
        };
        b.w_in = lin(arch.token_dim, w);
        b.b_in = TensorT<T>::zeros({w}, true);
        b.pos = TensorT<T>::randn({arch.num_tokens, w}, rng, T(0.02), true);
        b.w_t1 = lin(arch.time_dim, w);
        b.b_t1 = TensorT<T>::zeros({w}, true);
        b.w_t2 = lin(w, w);
        b.b_t2 = TensorT<T>::zeros({w}, true);
        b.class_embed = TensorT<T>::randn({arch.num_classes + 1, w}, rng, T(0.02), true);
        for (int l = 0; l < layer_count; ++l) {
            AttentionLayerT<T> a;
            a.ln1_g = TensorT<T>::full({w}, T(1), true);
            a.ln1_b = TensorT<T>::zeros({w}, true);
            a.wqkv = lin(w, 3 * w);
            a.bqkv = TensorT<T>::zeros({3 * w}, true);
            a.wproj = lin(w, w);
            a.bproj = TensorT<T>::zeros({w}, true);
            a.ln2_g = TensorT<T>::full({w}, T(1), true);
            a.ln2_b = TensorT<T>::zeros({w}, true);
            a.wfc1 = lin(w, 4 * w);
            a.bfc1 = TensorT<T>::zeros({4 * w}, true);
            a.wfc2 = lin(4 * w, w);
            a.bfc2 = TensorT<T>::zeros({w}, true);
            b.layers.push_back(std::move(a));
        }
        b.ln_out_g = TensorT<T>::full({w}, T(1), true);
        b.ln_out_b = TensorT<T>::zeros({w}, true);
        // zero head: the block starts as the identity map (mu = 0, sigma = 1)
        b.w_out = TensorT<T>::zeros({w, 2 * arch.token_dim}, true);
        b.b_out = TensorT<T>::zeros({2 * arch.token_dim}, true);
        return b;
    }

    // Conditioning stream (B, 1, width): time MLP on fourier(log t) plus the
    // class embedding row.
    TensorT<T> conditioning_stream(const Conditioning& cond) const {
        int64_t batch = static_cast<int64_t>(cond.t.size());
        std::vector<T> temb(batch * arch.time_dim);
        for (int64_t i = 0; i < batch; ++i) {
            auto e = fourier_time_embedding(cond.t[i], static_cast<int>(arch.time_dim));
            for (int64_t j = 0; j < arch.time_dim; ++j) temb[i * arch.time_dim + j] = static_cast<T>(e[j]);
        }
        TensorT<T> te = TensorT<T>::from_data({batch, arch.time_dim}, std::move(temb));
        TensorT<T> th = add(matmul(gelu(add(matmul(te, w_t1), b_t1)), w_t2), b_t2);
        TensorT<T> ce = gather_rows(class_embed, cond.label);
        return reshape(add(th, ce), {batch, 1, arch.width});
    }

    TensorT<T> attention(const AttentionLayerT<T>& a, const TensorT<T>& h,
                         const TensorT<T>* mask) const {
        int64_t batch = h.shape()[0], n = h.shape()[1], w = arch.width;
        int64_t hd = w / arch.heads;
        TensorT<T> qkv = add(matmul(layer_norm(h, a.ln1_g, a.ln1_b), a.wqkv), a.bqkv);
        auto split_heads = [&](int64_t off) {
            return transpose(reshape(slice(qkv, 2, off, w), {batch, n, arch.heads, hd}),
                             {0, 2, 1, 3});
        };
        TensorT<T> q = split_heads(0), k = split_heads(w), v = split_heads(2 * w);
        TensorT<T> scores = mul(matmul(q, transpose_last2(k)),
                                static_cast<T>(1.0 / std::sqrt((double)hd)));
        if (mask) scores = add(scores, *mask);
        TensorT<T> ctx = matmul(softmax(scores, -1), v);
        ctx = reshape(transpose(ctx, {0, 2, 1, 3}), {batch, n, w});
        return add(h, add(matmul(ctx, a.wproj), a.bproj));
    }

    TensorT<T> mlp(const AttentionLayerT<T>& a, const TensorT<T>& h) const {
        TensorT<T> f = add(matmul(gelu(add(matmul(layer_norm(h, a.ln2_g, a.ln2_b), a.wfc1), a.bfc1)),
                           a.wfc2), a.bfc2);
        return add(h, f);
    }

    // Parallel pass. Affine parameters at position n depend only on tokens
    // strictly before n: inputs are shifted right by one, with a zero start
    // token, under a causal attention mask. Accepts prefixes (n <= N).
    AffineParamsT<T> affine_params(const TensorT<T>& x, const Conditioning& cond) const {
        const Shape& s = x.shape();
        if (s.size() != 3 || s[2] != arch.token_dim || s[1] > arch.num_tokens)
            shape_error("affine_params", "expected (B, n<=" + std::to_string(arch.num_tokens) +
                                             ", " + std::to_string(arch.token_dim) + "), got " +
                                             shape_str(s));
        int64_t batch = s[0], n = s[1];
        if (static_cast<int64_t>(cond.t.size()) != batch ||
            static_cast<int64_t>(cond.label.size()) != batch)
            shape_error("affine_params", "conditioning batch " + std::to_string(cond.t.size()) +
                                             " does not match input batch " + std::to_string(batch));
        TensorT<T> shifted =
            n == 1 ? TensorT<T>::zeros({batch, 1, arch.token_dim})
                   : concat(std::vector<TensorT<T>>{TensorT<T>::zeros({batch, 1, arch.token_dim}),
                                                    slice(x, 1, 0, n - 1)},
                            1);
        TensorT<T> h = embed(shifted, 0, n, cond);
        TensorT<T> mask = causal_mask(n);
        for (const auto& a : layers) h = mlp(a, attention(a, h, &mask));
        return head(h);
    }

    // One token of the sequential inverse. `prev` is the already-reconstructed
    // token at position - 1 (absent at position 0). Extends the cache.
    AffineParamsT<T> affine_step(const std::optional<TensorT<T>>& prev, int64_t position,
                                 const Conditioning& cond, BlockCacheT<T>& cache) const {
        int64_t batch = static_cast<int64_t>(cond.t.size());
        if (cache.filled != position)
            throw std::logic_error("affine_step: cache holds " + std::to_string(cache.filled) +
                                   " positions, expected " + std::to_string(position));
        TensorT<T> tok = prev ? *prev : TensorT<T>::zeros({batch, 1, arch.token_dim});
        TensorT<T> h = embed(tok, position, 1, cond);
        if (cache.k.empty()) {
            cache.k.resize(layers.size());
            cache.v.resize(layers.size());
        }
        int64_t w = arch.width, hd = w / arch.heads;
        for (size_t l = 0; l < layers.size(); ++l) {
            const auto& a = layers[l];
            TensorT<T> qkv = add(matmul(layer_norm(h, a.ln1_g, a.ln1_b), a.wqkv), a.bqkv);
            auto split_heads = [&](int64_t off) {
                return transpose(reshape(slice(qkv, 2, off, w), {batch, 1, arch.heads, hd}),
                                 {0, 2, 1, 3});
            };
            TensorT<T> q = split_heads(0), k = split_heads(w), v = split_heads(2 * w);
            cache.k[l] = position == 0 ? k : concat(std::vector<TensorT<T>>{cache.k[l], k}, 2);
            cache.v[l] = position == 0 ? v : concat(std::vector<TensorT<T>>{cache.v[l], v}, 2);
            TensorT<T> scores = mul(matmul(q, transpose_last2(cache.k[l])),
                                    static_cast<T>(1.0 / std::sqrt((double)hd)));
            TensorT<T> ctx = matmul(softmax(scores, -1), cache.v[l]);
            ctx = reshape(transpose(ctx, {0, 2, 1, 3}), {batch, 1, w});
            h = add(h, add(matmul(ctx, a.wproj), a.bproj));
            h = mlp(a, h);
        }
        cache.filled = position + 1;
        return head(h);
    }

    std::vector<std::pair<std::string, TensorT<T>>> named_parameters(const std::string& prefix) const {
        std::vector<std::pair<std::string, TensorT<T>>> out;
        auto put = [&](const std::string& name, const TensorT<T>& t) {
            out.emplace_back(prefix + "." + name, t);
        };
        put("w_in", w_in);
        put("b_in", b_in);
        put("pos", pos);
        put("w_t1", w_t1);
        put("b_t1", b_t1);
        put("w_t2", w_t2);
        put("b_t2", b_t2);
        put("class_embed", class_embed);
        for (size_t l = 0; l < layers.size(); ++l) {
            const auto& a = layers[l];
            std::string lp = "layer" + std::to_string(l);
            put(lp + ".ln1_g", a.ln1_g);
            put(lp + ".ln1_b", a.ln1_b);
            put(lp + ".wqkv", a.wqkv);
            put(lp + ".bqkv", a.bqkv);
            put(lp + ".wproj", a.wproj);
            put(lp + ".bproj", a.bproj);
            put(lp + ".ln2_g", a.ln2_g);
            put(lp + ".ln2_b", a.ln2_b);
            put(lp + ".wfc1", a.wfc1);
            put(lp + ".bfc1", a.bfc1);
            put(lp + ".wfc2", a.wfc2);
            put(lp + ".bfc2", a.bfc2);
        }
        put("ln_out_g", ln_out_g);
        put("ln_out_b", ln_out_b);
        put("w_out", w_out);
        put("b_out", b_out);
        return out;
    }

private:
    TensorT<T> embed(const TensorT<T>& tokens, int64_t position, int64_t n,
                     const Conditioning& cond) const {
        TensorT<T> e = add(matmul(tokens, w_in), b_in);
        TensorT<T> p = n == arch.num_tokens && position == 0 ? pos : slice(pos, 0, position, n);
        e = add(e, p);
        return add(e, conditioning_stream(cond));
    }

    TensorT<T> causal_mask(int64_t n) const {
        std::vector<T> m(n * n, T(0));
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = i + 1; j < n; ++j) m[i * n + j] = -std::numeric_limits<T>::infinity();
        return TensorT<T>::from_data({1, 1, n, n}, std::move(m));
    }

    AffineParamsT<T> head(const TensorT<T>& h) const {
        TensorT<T> out = add(matmul(layer_norm(h, ln_out_g, ln_out_b), w_out), b_out);
        int64_t d = arch.token_dim;
        AffineParamsT<T> p;
        p.mu = slice(out, 2, 0, d);
        // smooth clamp of the raw log-scale into (-7, 7)
        p.log_sigma = mul(itarflow::tanh(mul(slice(out, 2, d, d), static_cast<T>(1.0 / 7.0))), T(7));
        return p;
    }
};

template <typename T>
struct BlockForwardResultT {
    TensorT<T> z;                  // (B, N, d)
    TensorT<T> neg_log_sigma_sum;  // (B,), this block's log-det contribution
};

namespace detail {

template <typename T>
void check_finite(const TensorT<T>& t, const std::string& where) {
    for (T v : t.values())
        if (!std::isfinite(v)) throw std::runtime_error(where + ": non-finite value");
}

}  // namespace detail

// z_n = (x_n - mu(x_{<n})) / sigma(x_{<n}); one parallel transformer pass.
template <typename T>
BlockForwardResultT<T> block_forward(const CausalBlockT<T>& block, const TensorT<T>& x,
                                     const Conditioning& cond, int block_index = -1) {
    AffineParamsT<T> p = block.affine_params(x, cond);
    TensorT<T> z = mul(sub(x, p.mu), itarflow::exp(neg(p.log_sigma)));
    TensorT<T> nls = neg(sum(p.log_sigma, {1, 2}));
    if (block_index >= 0) detail::check_finite(z, "block " + std::to_string(block_index));
    return {z, nls};
}

// x_n = mu(x_{<n}) + sigma(x_{<n}) z_n, sequential over tokens with a KV cache.
template <typename T>
TensorT<T> block_inverse(const CausalBlockT<T>& block, const TensorT<T>& z,
                         const Conditioning& cond) {
    NoGradGuard ng;
    const Shape& s = z.shape();
    int64_t n = s[1];
    BlockCacheT<T> cache;
    std::optional<TensorT<T>> prev;
    std::vector<TensorT<T>> xs;
    for (int64_t i = 0; i < n; ++i) {
        AffineParamsT<T> p = block.affine_step(prev, i, cond, cache);
        TensorT<T> zi = slice(z, 1, i, 1);
        TensorT<T> xi = add(p.mu, mul(itarflow::exp(p.log_sigma), zi));
        for (T v : xi.values())
            if (!std::isfinite(v))
                throw std::runtime_error("block_inverse: non-finite token at position " +
                                         std::to_string(i));
        xs.push_back(xi);
        prev = xi;
    }
    return n == 1 ? xs[0] : concat(xs, 1);
}

// Token order reversal; volume preserving, contents untouched.
template <typename T>
TensorT<T> permute(const TensorT<T>& x) {
    return flip(x, static_cast<int>(x.dim()) - 2);
}

template <typename T>
struct FlowStackT {
    ArchSpec arch;
    std::vector<CausalBlockT<T>> blocks;

    static FlowStackT init(const ArchSpec& arch, uint64_t seed) {
        arch.validate();
        FlowStackT f;
        f.arch = arch;
        for (size_t l = 0; l < arch.block_layers.size(); ++l) {
            auto rng = make_rng(seed, l);
            f.blocks.push_back(CausalBlockT<T>::init(arch, arch.block_layers[l], rng));
        }
        return f;
    }

    std::vector<std::pair<std::string, TensorT<T>>> named_parameters() const {
        std::vector<std::pair<std::string, TensorT<T>>> out;
        for (size_t l = 0; l < blocks.size(); ++l) {
            auto bp = blocks[l].named_parameters("block" + std::to_string(l));
            out.insert(out.end(), bp.begin(), bp.end());
        }
        return out;
    }

    std::vector<TensorT<T>> parameters() const {
        std::vector<TensorT<T>> out;
        for (auto& [name, t] : named_parameters()) out.push_back(t);
        return out;
    }

    void set_param_grads(bool enabled) {
        for (auto& p : parameters()) p.node()->requires_grad = enabled;
    }

    template <typename U>
    FlowStackT<U> cast() const {
        FlowStackT<U> out = FlowStackT<U>::init(arch, 0);
        auto src = named_parameters();
        auto dst = out.named_parameters();
        for (size_t i = 0; i < src.size(); ++i) {
            auto& d = dst[i].second.node()->value;
            const auto& s = src[i].second.values();
            for (size_t j = 0; j < s.size(); ++j) d[j] = static_cast<U>(s[j]);
        }
        return out;
    }
};

using FlowStack = FlowStackT<float>;

template <typename T>
struct StackForwardResultT {
    TensorT<T> z;        // (B, N, d)
    TensorT<T> log_det;  // (B,)
};

// Blocks alternate with token flips (block, flip, block, ..., block); flips
// contribute nothing to the log-determinant.
template <typename T>
StackForwardResultT<T> stack_forward(const FlowStackT<T>& stack, const TensorT<T>& x,
                                     const Conditioning& cond) {
    TensorT<T> z = x;
    TensorT<T> log_det;
    for (size_t l = 0; l < stack.blocks.size(); ++l) {
        auto r = block_forward(stack.blocks[l], z, cond, static_cast<int>(l));
        z = r.z;
        log_det = l == 0 ? r.neg_log_sigma_sum : add(log_det, r.neg_log_sigma_sum);
        if (l + 1 < stack.blocks.size()) z = permute(z);
    }
    return {z, log_det};
}

template <typename T>
TensorT<T> stack_inverse(const FlowStackT<T>& stack, const TensorT<T>& z,
                         const Conditioning& cond) {
    NoGradGuard ng;
    TensorT<T> x = z;
    for (int64_t l = static_cast<int64_t>(stack.blocks.size()) - 1; l >= 0; --l) {
        x = block_inverse(stack.blocks[l], x, cond);
        if (l > 0) x = permute(x);
    }
    return x;
}

// Exact log-likelihood per example under the standard-normal prior, Gaussian
// constant included: -||z||^2 / 2 - (D/2) log(2 pi) + log_det.
template <typename T>
TensorT<T> log_likelihood(const FlowStackT<T>& stack, const TensorT<T>& x,
                          const Conditioning& cond) {
    auto r = stack_forward(stack, x, cond);
    TensorT<T> sq = sum(mul(r.z, r.z), {1, 2});
    T c = static_cast<T>(-0.5 * static_cast<double>(stack.arch.total_dim()) * kLog2Pi);
    return add(add(mul(sq, T(-0.5)), c), r.log_det);
}

// d log p / d x via one reverse pass; parameter gradients are not touched.
// Forces graph recording on so it also works inside no-grad sampling loops.
template <typename T>
TensorT<T> score(const FlowStackT<T>& stack, const TensorT<T>& x, const Conditioning& cond) {
    GradModeGuard grad_on(true);
    TensorT<T> xg = TensorT<T>::from_data(x.shape(), x.values(), true);
    TensorT<T> total = sum(log_likelihood(stack, xg, cond));
    auto g = gradient(total, std::vector<TensorT<T>>{xg});
    return TensorT<T>::from_data(x.shape(), std::move(g[0]));
}

}  // namespace itarflow
