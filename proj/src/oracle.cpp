#include "itarflow/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "itarflow/flow.hpp"
#include "itarflow/parallel.hpp"

namespace itarflow::oracle {

void GaussianMixture::validate() const {
    if (weights.empty() || means.size() != weights.size() || sigmas.size() != weights.size())
        throw std::invalid_argument("gmm: weights/means/sigmas must be non-empty and aligned");
    double total = 0.0;
    for (double w : weights) {
        if (w <= 0.0) throw std::invalid_argument("gmm: weights must be positive");
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-12)
        throw std::invalid_argument("gmm: weights must sum to 1 within 1e-12");
    for (const auto& m : means)
        if (static_cast<int>(m.size()) != dim)
            throw std::invalid_argument("gmm: mean dimension mismatch");
    for (double s : sigmas)
        if (s <= 0.0) throw std::invalid_argument("gmm: sigmas must be positive");
}

int GaussianMixture::sample_component(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double r = u(rng);
    double acc = 0.0;
    for (size_t k = 0; k < weights.size(); ++k) {
        acc += weights[k];
        if (r <= acc) return static_cast<int>(k);
    }
    return static_cast<int>(weights.size()) - 1;
}

std::vector<double> GaussianMixture::sample_from_component(int k, std::mt19937_64& rng) const {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> x(dim);
    for (int i = 0; i < dim; ++i) x[i] = means[k][i] + sigmas[k] * n(rng);
    return x;
}

std::vector<double> GaussianMixture::sample(std::mt19937_64& rng) const {
    return sample_from_component(sample_component(rng), rng);
}

std::vector<double> GaussianMixture::noised_mean(double) const {
    std::vector<double> m(dim, 0.0);
    for (size_t k = 0; k < weights.size(); ++k)
        for (int i = 0; i < dim; ++i) m[i] += weights[k] * means[k][i];
    return m;
}

double GaussianMixture::noised_scalar_variance(double t) const {
    if (dim != 1) throw std::invalid_argument("gmm: scalar variance needs dim == 1");
    double mean = noised_mean(t)[0];
    double second = 0.0;
    for (size_t k = 0; k < weights.size(); ++k) {
        double v = sigmas[k] * sigmas[k] + t * t;
        second += weights[k] * (v + means[k][0] * means[k][0]);
    }
    return second - mean * mean;
}

namespace {

// per-component log w_k + log N(x; m_k, (s_k^2 + t^2) I)
std::vector<double> component_logs(const std::vector<double>& x, double t,
                                   const GaussianMixture& gmm) {
    std::vector<double> lg(gmm.components());
    for (size_t k = 0; k < gmm.components(); ++k) {
        double v = gmm.sigmas[k] * gmm.sigmas[k] + t * t;
        double sq = 0.0;
        for (int i = 0; i < gmm.dim; ++i) {
            double d = x[i] - gmm.means[k][i];
            sq += d * d;
        }
        lg[k] = std::log(gmm.weights[k]) -
                0.5 * gmm.dim * std::log(2.0 * M_PI * v) - 0.5 * sq / v;
    }
    return lg;
}

}  // namespace

double gmm_logpdf_noised(const std::vector<double>& x, double t, const GaussianMixture& gmm) {
    if (t < 0.0) throw std::invalid_argument("gmm_logpdf_noised: t must be non-negative");
    if (static_cast<int>(x.size()) != gmm.dim)
        throw std::invalid_argument("gmm_logpdf_noised: dimension mismatch");
    std::vector<double> lg = component_logs(x, t, gmm);
    double m = *std::max_element(lg.begin(), lg.end());
    double z = 0.0;
    for (double v : lg) z += std::exp(v - m);
    return m + std::log(z);
}

std::vector<double> gmm_score_noised(const std::vector<double>& x, double t,
                                     const GaussianMixture& gmm) {
    if (t < 0.0) throw std::invalid_argument("gmm_score_noised: t must be non-negative");
    std::vector<double> lg = component_logs(x, t, gmm);
    double m = *std::max_element(lg.begin(), lg.end());
    double z = 0.0;
    for (double v : lg) z += std::exp(v - m);
    std::vector<double> score(gmm.dim, 0.0);
    for (size_t k = 0; k < gmm.components(); ++k) {
        double r = std::exp(lg[k] - m) / z;  // responsibility
        double v = gmm.sigmas[k] * gmm.sigmas[k] + t * t;
        for (int i = 0; i < gmm.dim; ++i) score[i] += r * (gmm.means[k][i] - x[i]) / v;
    }
    return score;
}

double brute_jacobian_logdet(const std::function<DTensor(const DTensor&)>& map, const DTensor& x) {
    int64_t d = x.numel();
    if (d > 16)
        throw std::invalid_argument("brute_jacobian_logdet: dimension " + std::to_string(d) +
                                    " exceeds the cost guard (16)");
    DTensor xg = DTensor::from_data(x.shape(), x.values(), true);
    DTensor y = map(xg);
    if (y.numel() != d)
        throw std::invalid_argument("brute_jacobian_logdet: map is not square (" +
                                    std::to_string(y.numel()) + " outputs for " +
                                    std::to_string(d) + " inputs)");
    DTensor yflat = reshape(y, {d});
    std::vector<double> jac(d * d);
    for (int64_t i = 0; i < d; ++i) {
        std::vector<double> onehot(d, 0.0);
        onehot[i] = 1.0;
        DTensor yi = sum(mul(yflat, DTensor::from_data({d}, std::move(onehot))));
        auto g = gradient(yi, std::vector<DTensor>{xg});
        std::copy(g[0].begin(), g[0].end(), jac.begin() + i * d);
    }

    // pivoted LU, log |det| = sum log |u_ii|
    std::vector<int64_t> piv(d);
    double logdet = 0.0;
    for (int64_t c = 0; c < d; ++c) {
        int64_t p = c;
        for (int64_t r = c + 1; r < d; ++r)
            if (std::abs(jac[r * d + c]) > std::abs(jac[p * d + c])) p = r;
        piv[c] = p;
        if (p != c)
            for (int64_t j = 0; j < d; ++j) std::swap(jac[c * d + j], jac[p * d + j]);
        double pivot = jac[c * d + c];
        if (pivot == 0.0) throw std::runtime_error("brute_jacobian_logdet: singular Jacobian");
        logdet += std::log(std::abs(pivot));
        for (int64_t r = c + 1; r < d; ++r) {
            double f = jac[r * d + c] / pivot;
            jac[r * d + c] = f;
            for (int64_t j = c + 1; j < d; ++j) jac[r * d + j] -= f * jac[c * d + j];
        }
    }
    if (logdet < std::log(1e-300))
        throw std::runtime_error("brute_jacobian_logdet: singular Jacobian (|det| < 1e-300)");
    return logdet;
}

double ode_closed_form_gaussian(double x0, double s, double t_max, double t_min) {
    if (s <= 0.0) throw std::invalid_argument("ode_closed_form_gaussian: s must be positive");
    return x0 * std::sqrt((s * s + t_min * t_min) / (s * s + t_max * t_max));
}

namespace {

double euclid(const double* a, const double* b, int dim) {
    double sq = 0.0;
    for (int i = 0; i < dim; ++i) {
        double d = a[i] - b[i];
        sq += d * d;
    }
    return std::sqrt(sq);
}

}  // namespace

EnergyDistanceResult energy_distance(const std::vector<double>& a, const std::vector<double>& b,
                                     int dim) {
    if (dim <= 0) throw std::invalid_argument("energy_distance: dim must be positive");
    if (a.empty() || b.empty() || a.size() % dim != 0 || b.size() % dim != 0)
        throw std::invalid_argument("energy_distance: sample sets must be non-empty (n x dim)");
    int64_t na = static_cast<int64_t>(a.size()) / dim;
    int64_t nb = static_cast<int64_t>(b.size()) / dim;

    // Row sums of the three distance blocks; rows are independent, so the
    // parallel split cannot change any value.
    std::vector<double> ra(na, 0.0);   // sum_j d(a_i, b_j)
    std::vector<double> raa(na, 0.0);  // sum_{j != i} d(a_i, a_j)
    std::vector<double> rbb(nb, 0.0);
    auto& pool = ThreadPool::instance();
    pool.parallel_for(0, na, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            const double* ai = a.data() + i * dim;
            double s = 0.0;
            for (int64_t j = 0; j < nb; ++j) s += euclid(ai, b.data() + j * dim, dim);
            ra[i] = s;
            double saa = 0.0;
            for (int64_t j = 0; j < na; ++j)
                if (j != i) saa += euclid(ai, a.data() + j * dim, dim);
            raa[i] = saa;
        }
    });
    pool.parallel_for(0, nb, [&](int64_t lo, int64_t hi) {
        for (int64_t j = lo; j < hi; ++j) {
            const double* bj = b.data() + j * dim;
            double s = 0.0;
            for (int64_t k = 0; k < nb; ++k)
                if (k != j) s += euclid(bj, b.data() + k * dim, dim);
            rbb[j] = s;
        }
    });
    std::vector<double> rb(nb, 0.0);  // sum_i d(a_i, b_j)
    pool.parallel_for(0, nb, [&](int64_t lo, int64_t hi) {
        for (int64_t j = lo; j < hi; ++j) {
            const double* bj = b.data() + j * dim;
            double s = 0.0;
            for (int64_t i = 0; i < na; ++i) s += euclid(a.data() + i * dim, bj, dim);
            rb[j] = s;
        }
    });

    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (double v : ra) sab += v;
    for (double v : raa) saa += v;
    for (double v : rbb) sbb += v;

    auto ed = [](double sab_, double saa_, double sbb_, int64_t na_, int64_t nb_) {
        double cross = 2.0 * sab_ / (static_cast<double>(na_) * nb_);
        double within_a = na_ > 1 ? saa_ / (static_cast<double>(na_) * (na_ - 1)) : 0.0;
        double within_b = nb_ > 1 ? sbb_ / (static_cast<double>(nb_) * (nb_ - 1)) : 0.0;
        return cross - within_a - within_b;
    };
    double value = ed(sab, saa, sbb, na, nb);

    // delete-one jackknife over both samples
    double se = 0.0;
    if (na > 2 && nb > 2) {
        std::vector<double> la(na), lb(nb);
        double mean_a = 0.0, mean_b = 0.0;
        for (int64_t i = 0; i < na; ++i) {
            la[i] = ed(sab - ra[i], saa - 2.0 * raa[i], sbb, na - 1, nb);
            mean_a += la[i];
        }
        for (int64_t j = 0; j < nb; ++j) {
            lb[j] = ed(sab - rb[j], saa, sbb - 2.0 * rbb[j], na, nb - 1);
            mean_b += lb[j];
        }
        mean_a /= na;
        mean_b /= nb;
        double var = 0.0;
        for (int64_t i = 0; i < na; ++i) var += (la[i] - mean_a) * (la[i] - mean_a);
        var *= static_cast<double>(na - 1) / na;
        double vb = 0.0;
        for (int64_t j = 0; j < nb; ++j) vb += (lb[j] - mean_b) * (lb[j] - mean_b);
        var += vb * static_cast<double>(nb - 1) / nb;
        se = std::sqrt(var);
    }
    return {value, se};
}

}  // namespace itarflow::oracle
