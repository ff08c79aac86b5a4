#pragma once

// Analytic ground truth and two-sample metrics, all in double precision.
// Everything here is deterministic and side-effect-free; these are the
// independent references the model implementation is checked against.

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "itarflow/tensor.hpp"

namespace itarflow::oracle {

// Isotropic Gaussian mixture. Convolving with N(0, t^2 I) keeps it a mixture
// with component variances sigma_i^2 + t^2, so the noised density and score
// stay closed-form.
struct GaussianMixture {
    std::vector<double> weights;
    std::vector<std::vector<double>> means;
    std::vector<double> sigmas;  // per-component isotropic stddev
    int dim = 1;

    void validate() const;
    size_t components() const { return weights.size(); }

    std::vector<double> sample(std::mt19937_64& rng) const;
    int sample_component(std::mt19937_64& rng) const;
    std::vector<double> sample_from_component(int k, std::mt19937_64& rng) const;

    // Mean / variance (per coordinate, averaged) of the t-noised mixture.
    std::vector<double> noised_mean(double t) const;
    double noised_scalar_variance(double t) const;  // dim 1 only
};

double gmm_logpdf_noised(const std::vector<double>& x, double t, const GaussianMixture& gmm);
std::vector<double> gmm_score_noised(const std::vector<double>& x, double t,
                                     const GaussianMixture& gmm);

// log |det dF/dx| for a square map, built from one reverse-mode pass per
// output coordinate and a pivoted LU factorization. D <= 16.
double brute_jacobian_logdet(const std::function<DTensor(const DTensor&)>& map, const DTensor& x);

// Exact terminal state of dx/dt = t x / (s^2 + t^2) integrated from t_max
// down to t_min (the likelihood-gradient ODE specialized to N(0, s^2) data).
double ode_closed_form_gaussian(double x0, double s, double t_max, double t_min);

struct EnergyDistanceResult {
    double value;
    double std_error;  // two-sample delete-one jackknife
};

// 2 E||a-b|| - E||a-a'|| - E||b-b'|| with unbiased U-statistics for the
// within terms. Samples are row-major (count x dim) flat arrays.
EnergyDistanceResult energy_distance(const std::vector<double>& a, const std::vector<double>& b,
                                     int dim);

}  // namespace itarflow::oracle
