#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "itarflow/oracle.hpp"

using namespace itarflow;
using namespace itarflow::oracle;
using testutil::normal_pdf;
using testutil::simpson;

TEST_CASE("noised gmm logpdf basics") {
    GaussianMixture g;
    g.weights = {1.0};
    g.means = {{0.0}};
    g.sigmas = {1.0};
    g.dim = 1;
    g.validate();
    CHECK(gmm_logpdf_noised({0.0}, 0.0, g) == doctest::Approx(-0.5 * std::log(2.0 * M_PI)));

    // convolution with N(0, t^2) adds exactly t^2 of variance
    GaussianMixture mix = testutil::two_mode_gmm();
    for (double t : {0.0, 0.25, 0.7}) {
        double second = simpson(
            [&](double x) { return x * x * std::exp(gmm_logpdf_noised({x}, t, mix)); }, -12, 12);
        double mean = simpson(
            [&](double x) { return x * std::exp(gmm_logpdf_noised({x}, t, mix)); }, -12, 12);
        CHECK(second - mean * mean ==
              doctest::Approx(mix.noised_scalar_variance(t)).epsilon(1e-8));
    }
}

TEST_CASE("noised gmm logpdf matches quadrature convolution") {
    GaussianMixture mix = testutil::two_mode_gmm();
    double t = 0.4;
    auto clean_pdf = [&](double x) {
        return 0.5 * normal_pdf(x, -1.0, 0.3) + 0.5 * normal_pdf(x, 1.0, 0.3);
    };
    for (double x = -2.5; x <= 2.5; x += 0.25) {
        double conv = simpson(
            [&](double eps) { return clean_pdf(x - t * eps) * normal_pdf(eps, 0.0, 1.0); }, -14,
            14, 40000);
        CHECK(gmm_logpdf_noised({x}, t, mix) == doctest::Approx(std::log(conv)).epsilon(1e-8));
    }
}

TEST_CASE("noised gmm score") {
    GaussianMixture g;
    g.weights = {1.0};
    g.means = {{0.0}};
    g.sigmas = {0.8};
    g.dim = 1;
    g.validate();
    double t = 0.5;
    double v = 0.8 * 0.8 + t * t;
    for (double x : {-1.3, 0.2, 2.0})
        CHECK(gmm_score_noised({x}, t, g)[0] == doctest::Approx(-x / v));

    // finite differences of the log-density
    GaussianMixture mix = testutil::two_mode_gmm();
    double h = 1e-6;
    for (double x : {-1.7, -0.4, 0.0, 0.9, 2.2}) {
        double fd =
            (gmm_logpdf_noised({x + h}, 0.3, mix) - gmm_logpdf_noised({x - h}, 0.3, mix)) / (2 * h);
        CHECK(gmm_score_noised({x}, 0.3, mix)[0] == doctest::Approx(fd).epsilon(1e-8));
    }

    // symmetric mixture: score vanishes at the midpoint
    CHECK(gmm_score_noised({0.0}, 0.2, mix)[0] == doctest::Approx(0.0));

    // 2-d score against finite differences
    GaussianMixture g2;
    g2.weights = {0.3, 0.7};
    g2.means = {{-1.0, 0.5}, {1.0, -0.5}};
    g2.sigmas = {0.4, 0.6};
    g2.dim = 2;
    g2.validate();
    std::vector<double> x2{0.3, -0.2};
    auto s2 = gmm_score_noised(x2, 0.25, g2);
    for (int i = 0; i < 2; ++i) {
        auto xp = x2, xm = x2;
        xp[i] += h;
        xm[i] -= h;
        double fd =
            (gmm_logpdf_noised(xp, 0.25, g2) - gmm_logpdf_noised(xm, 0.25, g2)) / (2 * h);
        CHECK(s2[i] == doctest::Approx(fd).epsilon(1e-8));
    }
}

TEST_CASE("brute jacobian logdet") {
    // identity
    auto id = [](const DTensor& x) { return x; };
    CHECK(brute_jacobian_logdet(id, DTensor::from_data({3}, {0.1, -0.5, 2.0})) ==
          doctest::Approx(0.0));

    // diagonal scaling by (2, 4) -> log 8
    auto diag = [](const DTensor& x) {
        return mul(x, DTensor::from_data({2}, {2.0, 4.0}));
    };
    CHECK(brute_jacobian_logdet(diag, DTensor::from_data({2}, {1.0, 1.0})) ==
          doctest::Approx(std::log(8.0)));

    // triangular composition with a known determinant
    auto tri = [](const DTensor& x) {
        // y0 = 3 x0; y1 = x0^2 - 0.5 x1; y2 = tanh(x0) + x1 x2
        DTensor x0 = slice(x, 0, 0, 1), x1 = slice(x, 0, 1, 1), x2 = slice(x, 0, 2, 1);
        DTensor y0 = mul(x0, 3.0);
        DTensor y1 = sub(mul(x0, x0), mul(x1, 0.5));
        DTensor y2 = add(itarflow::tanh(x0), mul(x1, x2));
        return concat(std::vector<DTensor>{y0, y1, y2}, 0);
    };
    DTensor at = DTensor::from_data({3}, {0.4, -1.2, 0.7});
    double expect = std::log(3.0 * 0.5 * 1.2);  // |3 * (-0.5) * x1|
    CHECK(brute_jacobian_logdet(tri, at) == doctest::Approx(expect).epsilon(1e-10));

    // nonlinear map cross-checked against central differences of the map
    std::mt19937_64 rng(3);
    DTensor w = DTensor::randn({4, 4}, rng, 0.6);
    auto nl = [&](const DTensor& x) {
        return add(itarflow::tanh(reshape(matmul(reshape(x, {1, 4}), w), {4})), x);
    };
    DTensor x4 = DTensor::randn({4}, rng);
    double lib = brute_jacobian_logdet(nl, x4);
    // finite-difference Jacobian + LU through the same decomposition algebra
    std::vector<double> jac(16);
    double h = 1e-6;
    for (int j = 0; j < 4; ++j) {
        auto xp = x4.values(), xm = x4.values();
        xp[j] += h;
        xm[j] -= h;
        NoGradGuard ng;
        auto yp = nl(DTensor::from_data({4}, xp)).values();
        auto ym = nl(DTensor::from_data({4}, xm)).values();
        for (int i = 0; i < 4; ++i) jac[i * 4 + j] = (yp[i] - ym[i]) / (2 * h);
    }
    double det = jac[0] * (jac[5] * (jac[10] * jac[15] - jac[11] * jac[14]) -
                           jac[6] * (jac[9] * jac[15] - jac[11] * jac[13]) +
                           jac[7] * (jac[9] * jac[14] - jac[10] * jac[13])) -
                 jac[1] * (jac[4] * (jac[10] * jac[15] - jac[11] * jac[14]) -
                           jac[6] * (jac[8] * jac[15] - jac[11] * jac[12]) +
                           jac[7] * (jac[8] * jac[14] - jac[10] * jac[12])) +
                 jac[2] * (jac[4] * (jac[9] * jac[15] - jac[11] * jac[13]) -
                           jac[5] * (jac[8] * jac[15] - jac[11] * jac[12]) +
                           jac[7] * (jac[8] * jac[13] - jac[9] * jac[12])) -
                 jac[3] * (jac[4] * (jac[9] * jac[14] - jac[10] * jac[13]) -
                           jac[5] * (jac[8] * jac[14] - jac[10] * jac[12]) +
                           jac[6] * (jac[8] * jac[13] - jac[9] * jac[12]));
    CHECK(lib == doctest::Approx(std::log(std::abs(det))).epsilon(1e-6));

    // guards
    CHECK_THROWS_AS(brute_jacobian_logdet(id, DTensor::zeros({17})), std::invalid_argument);
    auto collapse = [](const DTensor& x) {
        DTensor x0 = slice(x, 0, 0, 1);
        return concat(std::vector<DTensor>{x0, x0}, 0);
    };
    CHECK_THROWS(brute_jacobian_logdet(collapse, DTensor::from_data({2}, {1.0, 2.0})));
}

TEST_CASE("closed-form gaussian ode") {
    CHECK(ode_closed_form_gaussian(1.3, 0.8, 0.5, 0.5) == doctest::Approx(1.3));
    CHECK(ode_closed_form_gaussian(0.0, 1.0, 1.0, 0.01) == doctest::Approx(0.0));
    CHECK(ode_closed_form_gaussian(1.0, 1.0, 1.0, 1e-9) ==
          doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-9));
    CHECK_THROWS_AS(ode_closed_form_gaussian(1.0, 0.0, 1.0, 0.01), std::invalid_argument);

    // high-resolution RK4 on dx/dt = t x / (s^2 + t^2), integrated downward
    double s = 0.7, t_max = 0.9, t_min = 0.02, x = 1.4;
    int steps = 20000;
    double dt = (t_min - t_max) / steps;
    double t = t_max;
    auto f = [&](double tt, double xx) { return tt * xx / (s * s + tt * tt); };
    for (int i = 0; i < steps; ++i) {
        double k1 = f(t, x);
        double k2 = f(t + dt / 2, x + dt / 2 * k1);
        double k3 = f(t + dt / 2, x + dt / 2 * k2);
        double k4 = f(t + dt, x + dt * k3);
        x += dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
        t += dt;
    }
    CHECK(x == doctest::Approx(ode_closed_form_gaussian(1.4, s, t_max, t_min)).epsilon(1e-10));
}

TEST_CASE("energy distance") {
    // identical sample sets
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<double> a(500);
    for (auto& v : a) v = n01(rng);
    // the unbiased within-set U-statistic dips below zero on duplicates
    auto same = energy_distance(a, a, 1);
    CHECK(same.value < 1e-10);

    // same distribution: zero within 3 standard errors
    std::vector<double> b(10000), c(10000);
    for (auto& v : b) v = n01(rng);
    for (auto& v : c) v = n01(rng);
    auto zero = energy_distance(b, c, 1);
    CHECK(std::abs(zero.value) <= 3.0 * zero.std_error);

    // N(0,1) vs N(2,1): compare against the quadrature value
    std::vector<double> d(10000);
    for (auto& v : d) v = n01(rng) + 2.0;
    auto shifted = energy_distance(b, d, 1);
    double e_ab = simpson(
        [&](double z) { return std::abs(z) * normal_pdf(z, -2.0, std::sqrt(2.0)); }, -2 - 14,
        -2 + 14, 40000);
    double e_aa = simpson(
        [&](double z) { return std::abs(z) * normal_pdf(z, 0.0, std::sqrt(2.0)); }, -14, 14,
        40000);
    double expect = 2.0 * e_ab - 2.0 * e_aa;
    CHECK(shifted.value == doctest::Approx(expect).epsilon(0.05));
    CHECK(std::abs(shifted.value - expect) <= 4.0 * shifted.std_error);

    CHECK_THROWS_AS(energy_distance({}, a, 1), std::invalid_argument);
    CHECK_THROWS_AS(energy_distance(a, b, 3), std::invalid_argument);
}

TEST_CASE("gmm validation") {
    GaussianMixture g;
    g.weights = {0.5, 0.6};
    g.means = {{0.0}, {1.0}};
    g.sigmas = {1.0, 1.0};
    g.dim = 1;
    CHECK_THROWS_AS(g.validate(), std::invalid_argument);
    g.weights = {0.5, 0.5};
    g.sigmas = {1.0, -1.0};
    CHECK_THROWS_AS(g.validate(), std::invalid_argument);
}
