#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "itarflow/flow.hpp"
#include "itarflow/oracle.hpp"

using namespace itarflow;

namespace {

ArchSpec small_arch(int64_t n, int64_t d, std::vector<int> layers = {1, 1}, int64_t width = 16) {
    ArchSpec a;
    a.num_tokens = n;
    a.token_dim = d;
    a.block_layers = std::move(layers);
    a.width = width;
    a.heads = 2;
    a.time_dim = 8;
    a.num_classes = 3;
    return a;
}

float max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
    float m = 0.0f;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("fourier time embedding") {
    auto e = fourier_time_embedding(1.0, 8);
    CHECK(e.size() == 8);
    for (int k = 0; k < 4; ++k) {
        CHECK(e[k] == doctest::Approx(0.0));      // sin components
        CHECK(e[4 + k] == doctest::Approx(1.0));  // cos components
    }

    auto lo = fourier_time_embedding(0.01, 16);
    auto hi = fourier_time_embedding(0.5, 16);
    double best = 0.0;
    for (size_t i = 0; i < lo.size(); ++i) best = std::max(best, std::abs(lo[i] - hi[i]));
    CHECK(best > 0.1);

    CHECK_THROWS_AS(fourier_time_embedding(0.0, 8), std::domain_error);
    CHECK_THROWS_AS(fourier_time_embedding(-1.0, 8), std::domain_error);
    CHECK_THROWS_AS(fourier_time_embedding(1.0, 7), std::invalid_argument);
}

TEST_CASE("identity initialization") {
    ArchSpec arch = small_arch(4, 2);
    auto stack = FlowStack::init(arch, 11);
    std::mt19937_64 rng(1);
    Tensor x = Tensor::randn({2, 4, 2}, rng);
    Conditioning cond = Conditioning::uniform(0.3, 1, 2);

    // a fresh block is the identity map with zero log-det
    auto r = block_forward(stack.blocks[0], x, cond);
    CHECK(r.z.values() == x.values());
    for (float v : r.neg_log_sigma_sum.values()) CHECK(v == 0.0f);

    // the stack applies only the interleaved flips
    auto sr = stack_forward(stack, x, cond);
    Tensor flipped = permute(x);  // L = 2: one flip
    CHECK(sr.z.values() == flipped.values());
    for (float v : sr.log_det.values()) CHECK(v == 0.0f);

    // block_inverse is the identity too
    Tensor xi = block_inverse(stack.blocks[0], x, cond);
    CHECK(xi.values() == x.values());

    // log-likelihood at the origin equals the standard-normal log-pdf (D = 4)
    auto stack4 = FlowStack::init(small_arch(2, 2), 21);
    Tensor z0 = Tensor::zeros({1, 2, 2});
    Conditioning c1 = Conditioning::uniform(0.3, 0, 1);
    CHECK(log_likelihood(stack4, z0, c1).values()[0] ==
          doctest::Approx(-2.0 * kLog2Pi).epsilon(1e-6));
}

TEST_CASE("identity stack matches the exact standard normal") {
    auto stack = FlowStack::init(small_arch(3, 2), 5);
    std::mt19937_64 rng(2);
    Conditioning cond = Conditioning::uniform(0.2, 0, 4);
    Tensor x = Tensor::randn({4, 3, 2}, rng);
    Tensor lp = log_likelihood(stack, x, cond);
    for (int64_t b = 0; b < 4; ++b) {
        double expect = -0.5 * 6.0 * kLog2Pi;
        for (int64_t i = 0; i < 6; ++i) {
            double v = x.values()[b * 6 + i];
            expect -= 0.5 * v * v;
        }
        CHECK(lp.values()[b] == doctest::Approx(expect).epsilon(1e-5));
    }
}

TEST_CASE("block round trip") {
    ArchSpec arch = small_arch(5, 3);
    auto stack = testutil::random_stack(arch, 31);
    std::mt19937_64 rng(3);
    Tensor x = Tensor::randn({2, 5, 3}, rng);
    Conditioning cond = Conditioning::uniform(0.25, 2, 2);
    auto fwd = block_forward(stack.blocks[0], x, cond);
    Tensor back = block_inverse(stack.blocks[0], fwd.z, cond);
    CHECK(max_abs_diff(back.values(), x.values()) < 1e-4f);
}

TEST_CASE("cached inverse equals naive re-evaluation bitwise") {
    ArchSpec arch = small_arch(6, 2, {2}, 16);
    auto stack = testutil::random_stack(arch, 41, 0.1);
    std::mt19937_64 rng(4);
    Tensor z = Tensor::randn({3, 6, 2}, rng);
    Conditioning cond = Conditioning::uniform(0.4, 1, 3);
    Tensor cached = block_inverse(stack.blocks[0], z, cond);
    Tensor naive = testutil::naive_block_inverse(stack.blocks[0], z, cond);
    CHECK(cached.values() == naive.values());
}

TEST_CASE("block log-det matches brute-force Jacobian") {
    // N = 3, d = 2 random weights, double precision, 1e-6
    ArchSpec arch = small_arch(3, 2, {1}, 16);
    auto stack = testutil::random_stack<double>(arch, 51, 0.1);
    Conditioning cond = Conditioning::uniform(0.3, 0, 1);
    std::mt19937_64 rng(5);
    DTensor x = DTensor::randn({1, 3, 2}, rng);

    auto r = block_forward(stack.blocks[0], x, cond);
    auto map = [&](const DTensor& v) {
        return block_forward(stack.blocks[0], reshape(v, {1, 3, 2}), cond).z;
    };
    double brute = oracle::brute_jacobian_logdet(map, reshape(x, {6}));
    CHECK(r.neg_log_sigma_sum.values()[0] == doctest::Approx(brute).epsilon(1e-6));
}

TEST_CASE("stack forward round trip and log-det") {
    // L = 4 random blocks, single precision round trip within 1e-3
    ArchSpec arch = small_arch(4, 2, {1, 1, 1, 1}, 16);
    auto stack = testutil::random_stack(arch, 61);
    std::mt19937_64 rng(6);
    Tensor x = Tensor::randn({2, 4, 2}, rng);
    Conditioning cond = Conditioning::uniform(0.2, 1, 2);
    auto fwd = stack_forward(stack, x, cond);
    Tensor back = stack_inverse(stack, fwd.z, cond);
    CHECK(max_abs_diff(back.values(), x.values()) < 1e-3f);

    // L = 2, N = 3, d = 2: whole-stack log-det vs brute force within 1e-5
    ArchSpec arch2 = small_arch(3, 2, {1, 1}, 16);
    auto dstack = testutil::random_stack<double>(arch2, 71, 0.1);
    DTensor dx = DTensor::randn({1, 3, 2}, rng);
    Conditioning c1 = Conditioning::uniform(0.35, 2, 1);
    auto sr = stack_forward(dstack, dx, c1);
    auto map = [&](const DTensor& v) {
        return stack_forward(dstack, reshape(v, {1, 3, 2}), c1).z;
    };
    double brute = oracle::brute_jacobian_logdet(map, reshape(dx, {6}));
    CHECK(sr.log_det.values()[0] == doctest::Approx(brute).epsilon(1e-5));
}

TEST_CASE("permute") {
    Tensor s = Tensor::from_data({1, 3, 2}, {1, 2, 3, 4, 5, 6});
    Tensor p = permute(s);
    CHECK(p.values() == std::vector<float>{5, 6, 3, 4, 1, 2});
    CHECK(permute(p).values() == s.values());
    Tensor one = Tensor::from_data({1, 1, 2}, {7, 8});
    CHECK(permute(one).values() == one.values());
}

TEST_CASE("inserting a flip pair leaves the likelihood unchanged") {
    ArchSpec arch = small_arch(4, 2, {1, 1, 1}, 16);
    auto stack = testutil::random_stack(arch, 81);
    std::mt19937_64 rng(7);
    Tensor x = Tensor::randn({2, 4, 2}, rng);
    Conditioning cond = Conditioning::uniform(0.3, 1, 2);
    auto ref = stack_forward(stack, x, cond);

    // re-run the composition by hand with a double flip inserted at each seam
    for (size_t insert_at = 0; insert_at < stack.blocks.size(); ++insert_at) {
        Tensor z = x;
        Tensor log_det;
        for (size_t l = 0; l < stack.blocks.size(); ++l) {
            auto r = block_forward(stack.blocks[l], z, cond);
            z = r.z;
            log_det = l == 0 ? r.neg_log_sigma_sum : add(log_det, r.neg_log_sigma_sum);
            if (l == insert_at) z = permute(permute(z));
            if (l + 1 < stack.blocks.size()) z = permute(z);
        }
        CHECK(max_abs_diff(z.values(), ref.z.values()) == 0.0f);
        for (int64_t b = 0; b < 2; ++b)
            CHECK(std::abs(log_det.values()[b] - ref.log_det.values()[b]) < 1e-6f);
    }
}

TEST_CASE("score of the identity stack is -x") {
    auto stack = FlowStack::init(small_arch(3, 2), 91);
    std::mt19937_64 rng(8);
    Tensor x = Tensor::randn({2, 3, 2}, rng);
    Conditioning cond = Conditioning::uniform(0.5, 0, 2);
    Tensor s = score(stack, x, cond);
    for (size_t i = 0; i < s.values().size(); ++i) CHECK(s.values()[i] == -x.values()[i]);
}

TEST_CASE("score matches finite differences of the log-likelihood") {
    ArchSpec arch = small_arch(3, 2, {1, 1}, 16);
    auto fstack = testutil::random_stack(arch, 101);
    auto dstack = fstack.cast<double>();
    Conditioning cond = Conditioning::uniform(0.3, 1, 1);
    std::mt19937_64 rng(9);
    Tensor x = Tensor::randn({1, 3, 2}, rng);
    Tensor s = score(fstack, x, cond);

    double h = 1e-3;
    NoGradGuard ng;
    double worst = 0.0;
    for (size_t i = 0; i < x.values().size(); ++i) {
        auto xp = x.values(), xm = x.values();
        xp[i] += static_cast<float>(h);
        xm[i] -= static_cast<float>(h);
        std::vector<double> xpd(xp.begin(), xp.end()), xmd(xm.begin(), xm.end());
        double lp = log_likelihood(dstack, DTensor::from_data({1, 3, 2}, xpd), cond).values()[0];
        double lm = log_likelihood(dstack, DTensor::from_data({1, 3, 2}, xmd), cond).values()[0];
        double fd = (lp - lm) / (xpd[i] - xmd[i]);
        worst = std::max(worst, std::abs(s.values()[i] - fd) / (std::abs(fd) + 1e-8));
    }
    CHECK(worst < 1e-3);
}

TEST_CASE("causality: affine params at n <= m ignore token m") {
    ArchSpec arch = small_arch(8, 2, {2}, 16);
    auto stack = testutil::random_stack(arch, 111, 0.1);
    std::mt19937_64 rng(10);
    Tensor x = Tensor::randn({1, 8, 2}, rng);
    Conditioning cond = Conditioning::uniform(0.2, 1, 1);
    auto base = stack.blocks[0].affine_params(x, cond);

    for (int64_t m = 0; m < 8; ++m) {
        Tensor xp = Tensor::from_data(x.shape(), x.values());
        for (int64_t j = 0; j < 2; ++j) xp.data()[m * 2 + j] += 3.0f;
        auto pert = stack.blocks[0].affine_params(xp, cond);
        // positions 0..m (inclusive) depend only on tokens before m
        for (int64_t n = 0; n <= m; ++n)
            for (int64_t j = 0; j < 2; ++j) {
                CHECK(pert.mu.values()[n * 2 + j] == base.mu.values()[n * 2 + j]);
                CHECK(pert.log_sigma.values()[n * 2 + j] == base.log_sigma.values()[n * 2 + j]);
            }
        // and position m+1 must actually react
        if (m + 1 < 8) {
            bool changed = false;
            for (int64_t j = 0; j < 2; ++j)
                changed = changed ||
                          pert.mu.values()[(m + 1) * 2 + j] != base.mu.values()[(m + 1) * 2 + j];
            CHECK(changed);
        }
    }
}

TEST_CASE("class conditioning changes the likelihood") {
    ArchSpec arch = small_arch(4, 2, {1, 1}, 16);
    auto stack = testutil::random_stack(arch, 121);
    std::mt19937_64 rng(11);
    int differs = 0, probes = 100;
    for (int p = 0; p < probes; ++p) {
        Tensor x = Tensor::randn({1, 4, 2}, rng);
        Conditioning c0 = Conditioning::uniform(0.3, p % 3, 1);
        Conditioning c1 = Conditioning::uniform(0.3, (p + 1) % 3, 1);
        float a = log_likelihood(stack, x, c0).values()[0];
        float b = log_likelihood(stack, x, c1).values()[0];
        if (a != b) ++differs;
    }
    CHECK(differs >= 99);
}

TEST_CASE("non-finite inputs are reported with the block index") {
    auto stack = FlowStack::init(small_arch(3, 2), 131);
    Tensor x = Tensor::from_data({1, 3, 2},
                                 {0.1f, 0.2f, std::numeric_limits<float>::quiet_NaN(), 0.4f, 0.5f,
                                  0.6f});
    Conditioning cond = Conditioning::uniform(0.3, 0, 1);
    CHECK_THROWS_WITH_AS(stack_forward(stack, x, cond), doctest::Contains("block 0"),
                         std::runtime_error);
}

TEST_CASE("conditioning batch must match input batch") {
    auto stack = FlowStack::init(small_arch(3, 2), 141);
    std::mt19937_64 rng(12);
    Tensor x = Tensor::randn({2, 3, 2}, rng);
    Conditioning cond = Conditioning::uniform(0.3, 0, 3);
    CHECK_THROWS_AS(stack_forward(stack, x, cond), std::invalid_argument);
}
