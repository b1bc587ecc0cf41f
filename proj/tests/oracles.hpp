// ============================================================================
// oracles.hpp - Independent reference implementations used only by tests
// ============================================================================
//
// Every function here recomputes a quantity the library also computes, but
// by a different route (dense grid scans, primal KKT systems, closed-form
// moment recursions).  Tests compare library output against these oracles;
// none of this code calls into the library.
// ============================================================================
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <vector>

namespace oracles {

// KL(q || p) computed directly (no log-space tricks).
inline double kl(const std::vector<double>& q, const std::vector<double>& p) {
    double s = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
        if (q[i] > 0.0) {
            if (p[i] <= 0.0) return std::numeric_limits<double>::infinity();
            s += q[i] * std::log(q[i] / p[i]);
        }
    }
    return s;
}

// Exponentially tilted pmf q_i(alpha) proportional to p_i exp(-alpha s_i),
// computed in plain arithmetic (tests keep alpha*spread moderate).
inline std::vector<double> tilt_pmf(const std::vector<double>& p,
                                    const std::vector<double>& s, double alpha) {
    std::vector<double> q(p.size());
    double zsum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        q[i] = p[i] * std::exp(-alpha * s[i]);
        zsum += q[i];
    }
    for (double& v : q) v /= zsum;
    return q;
}

// Smallest achievable mean sum_i q_i s_i over the KL ball of radius delta,
// found by expanding the tilt magnitude and refining with nested grid scans
// (KL is increasing in alpha).  Assumes delta is below the saturation level.
inline double tilt_min_mean(const std::vector<double>& p, const std::vector<double>& s,
                            double delta) {
    auto kl_at = [&](double a) { return kl(tilt_pmf(p, s, a), p); };
    double lo = 0.0, hi = 1.0;
    while (kl_at(hi) < delta) {
        lo = hi;
        hi *= 2.0;
        if (hi > 1e9) throw std::runtime_error("tilt_min_mean: saturation reached");
    }
    for (int round = 0; round < 14; ++round) {
        const int grid = 32;
        double new_lo = lo, new_hi = hi;
        for (int i = 0; i <= grid; ++i) {
            const double a = lo + (hi - lo) * i / grid;
            if (kl_at(a) < delta)
                new_lo = std::max(new_lo, a);
            else
                new_hi = std::min(new_hi, a);
        }
        lo = new_lo;
        hi = new_hi;
    }
    const std::vector<double> q = tilt_pmf(p, s, 0.5 * (lo + hi));
    double mean = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) mean += q[i] * s[i];
    return mean;
}

// sup_{lambda > 0} { -lambda delta - lambda log sum_i p_i exp(-z_i/lambda) }
// by dense scan over a log-spaced lambda grid with one refinement pass.
// The lambda -> 0 limit (min z over the support) is compared explicitly.
inline double kl_dual_grid(const std::vector<double>& p, const std::vector<double>& z,
                           double delta) {
    double mean = 0.0, zmin = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        mean += p[i] * z[i];
        zmin = std::min(zmin, z[i]);
    }
    if (delta == 0.0) return mean;
    if (!(mean > zmin)) return zmin;

    auto f = [&](double lambda) {
        double msum = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i)
            if (p[i] > 0.0) msum += p[i] * std::exp(-(z[i] - zmin) / lambda);
        // factor exp(zmin/lambda) out of the sum for stability
        return -lambda * delta - lambda * std::log(msum) + zmin;
    };

    double best = zmin, best_lambda = 0.0;
    const double lam_lo = 1e-9, lam_hi = 2.0 * (mean - zmin) / delta;
    const int n_grid = 20000;
    for (int i = 0; i <= n_grid; ++i) {
        const double lam =
            lam_lo * std::pow(lam_hi / lam_lo, static_cast<double>(i) / n_grid);
        const double v = f(lam);
        if (v > best) {
            best = v;
            best_lambda = lam;
        }
    }
    if (best_lambda > 0.0) {
        const double a = best_lambda * 0.99, b = best_lambda * 1.01;
        for (int i = 0; i <= 4000; ++i) best = std::max(best, f(a + (b - a) * i / 4000.0));
    }
    return best;
}

// Primal worst case over the chi-square (order-2 Cressie-Read) ball:
//     min { sum q_i z_i : sum p_i (q_i/p_i - 1)^2 / 2 <= delta }.
// KKT: q_i = p_i max(0, 1 + (eta - z_i)/lambda); eta matches sum q = 1,
// lambda matches the divergence.  Solved by two nested bisections.
inline double chi2_primal_min(const std::vector<double>& p, const std::vector<double>& z,
                              double delta) {
    const std::size_t n = p.size();
    auto q_of = [&](double lambda, double eta) {
        std::vector<double> q(n);
        for (std::size_t i = 0; i < n; ++i)
            q[i] = p[i] * std::max(0.0, 1.0 + (eta - z[i]) / lambda);
        return q;
    };
    auto eta_for = [&](double lambda) {
        double lo = *std::min_element(z.begin(), z.end()) - lambda;
        double hi = *std::max_element(z.begin(), z.end()) + lambda;
        for (int it = 0; it < 200; ++it) {
            const double mid = 0.5 * (lo + hi);
            double mass = 0.0;
            for (double qi : q_of(lambda, mid)) mass += qi;
            (mass < 1.0 ? lo : hi) = mid;
        }
        return 0.5 * (lo + hi);
    };
    auto div_of = [&](double lambda) {
        const std::vector<double> q = q_of(lambda, eta_for(lambda));
        double d = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double t = q[i] / p[i] - 1.0;
            d += p[i] * t * t * 0.5;
        }
        return d;
    };
    // divergence decreases in lambda; bracket then bisect on div - delta
    double lam_hi = 1.0;
    while (div_of(lam_hi) > delta) lam_hi *= 2.0;
    double lam_lo = lam_hi;
    while (div_of(lam_lo) < delta) {
        lam_lo /= 2.0;
        if (lam_lo < 1e-14) throw std::runtime_error("chi2_primal_min: saturated");
    }
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lam_lo + lam_hi);
        (div_of(mid) > delta ? lam_lo : lam_hi) = mid;
    }
    const double lambda = 0.5 * (lam_lo + lam_hi);
    const std::vector<double> q = q_of(lambda, eta_for(lambda));
    double value = 0.0;
    for (std::size_t i = 0; i < n; ++i) value += q[i] * z[i];
    return value;
}

// Exact first and second moments of the Euler scheme
//     x_{k+1} = x_k (1 + mu dt + sigma dW_k),   dW_k ~ N(0, dt) i.i.d.
// E[x_{k+1}]   = E[x_k] (1 + mu dt)
// E[x_{k+1}^2] = E[x_k^2] ((1 + mu dt)^2 + sigma^2 dt)
inline double euler_wealth_mean(double x0, double mu, double dt, int steps) {
    return x0 * std::pow(1.0 + mu * dt, steps);
}
inline double euler_wealth_second_moment(double x0, double mu, double sigma, double dt,
                                         int steps) {
    const double g = (1.0 + mu * dt) * (1.0 + mu * dt) + sigma * sigma * dt;
    return x0 * x0 * std::pow(g, steps);
}

}  // namespace oracles
