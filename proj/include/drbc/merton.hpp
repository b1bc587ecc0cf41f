// ============================================================================
// merton.hpp - Bayesian power-utility portfolio machinery
// ============================================================================
//
// A single risky asset dS = S (b dt + sigma dW) with unknown drift b carrying
// a prior, a riskless rate r, and CRRA utility u(x) = x^alpha / alpha.  The
// posterior enters every formula through the likelihood-ratio mixture
//
//     F(t, y) = sum_i p_i exp(nu_i y - nu_i^2 t / 2),  nu_i = (b_i - r)/sigma,
//
// evaluated along the observation process Y_t = (b - r)/sigma t + W_t.
//
// Provided here:
//   - QuadratureRule:   Gauss-Hermite nodes/weights for integrals against a
//                       centred Gaussian density of any variance
//   - f_mixture:        F and its y-derivative
//   - bayes_fraction:   the closed-form optimal investment fraction for a
//                       finite prior (posterior-weighted Merton ratio)
//   - bayes_value:      the optimal expected utility under a finite prior
//   - drc_fraction:     the constant robust fraction built from the
//                       worst-case tilted prior mean
//   - drbc_finite_learn:the penalized prior re-weighting loop (central
//                       finite differences + softmax projection)
//   - closed_form_terminal_wealth / closed_form_conditional_utility:
//                       the Gaussian-prior closed forms used as references
//   - sharpe_and_utility: terminal-wealth performance metrics
//   - FractionTable:    a (t, y) lookup table over any fraction policy
//   - FractionPolicy:   tagged policy wrapper with JSON snapshots
// ============================================================================
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "drbc/common.hpp"
#include "drbc/priors.hpp"
#include "drbc/sde.hpp"

namespace drbc {

// ----------------------------------------------------------------------------
// Market constants
// ----------------------------------------------------------------------------
struct MertonMarket {
    double r = 0.05;     // riskless rate
    double sigma = 0.4;  // volatility, > 0
    double T = 1.0;      // horizon, > 0
    double x0 = 1.0;     // initial wealth, > 0
    double alpha = 0.5;  // utility exponent, in (0, 1)

    void validate() const;
    // market price of risk for a drift atom
    double nu(double b) const { return (b - r) / sigma; }
};

// ----------------------------------------------------------------------------
// Gaussian quadrature
// ----------------------------------------------------------------------------
// Gauss-Hermite rule recentred for integrals against the N(0, s) density:
//     integral f(z) phi_s(z) dz  ~=  sum_i weight[i] * f(sqrt(2 s) node[i]),
// with the weights normalized to sum to one.  Nodes/weights come from the
// symmetric tridiagonal Jacobi matrix (Golub-Welsch), so the rule is exact
// on polynomials of degree <= 2 n - 1.
class QuadratureRule {
public:
    explicit QuadratureRule(int n = 64);

    int size() const { return static_cast<int>(nodes_.size()); }
    const std::vector<double>& nodes() const { return nodes_; }
    const std::vector<double>& weights() const { return weights_; }

    // integral of f against the N(0, s) density; s = 0 collapses to f(0)
    double integrate(const std::function<double(double)>& f, double s) const;

private:
    std::vector<double> nodes_;    // Hermite nodes (ascending)
    std::vector<double> weights_;  // normalized weights, sum to 1
};

// ----------------------------------------------------------------------------
// Posterior mixture
// ----------------------------------------------------------------------------
struct FMixture {
    double f = 0.0;   // F(t, y)
    double df = 0.0;  // dF/dy (t, y)
};

// Log-space representation: F = exp(log_f), dF = exp(log_f) * nu_mean where
// nu_mean is the posterior mean of nu at (t, y).
struct LogFMixture {
    double log_f = 0.0;
    double nu_mean = 0.0;
};

LogFMixture log_f_mixture(double t, double y, const FinitePrior& prior,
                          const MertonMarket& market);
FMixture f_mixture(double t, double y, const FinitePrior& prior, const MertonMarket& market);

// ----------------------------------------------------------------------------
// Bayesian closed forms (finite prior)
// ----------------------------------------------------------------------------
// Optimal fraction of wealth in the risky asset at state (t, y), t < T:
//     [ int dF(T, z+y) F(T, z+y)^{a/(1-a)} phi_{T-t}(z) dz ]
//     ------------------------------------------------------- .
//     [ (1-a) sigma int F(T, z+y)^{1/(1-a)} phi_{T-t}(z) dz ]
// Evaluated entirely in log space; the common exponential scale cancels
// between numerator and denominator.
double bayes_fraction(double t, double y, const FinitePrior& prior,
                      const MertonMarket& market, const QuadratureRule& quad);

// Optimal expected utility value at time zero:
//     (x0 e^{rT})^a / a * ( int F(T, z)^{1/(1-a)} phi_T(z) dz )^{1-a}.
double bayes_value(const FinitePrior& prior, const MertonMarket& market,
                   const QuadratureRule& quad);

// Same value for an arbitrary nonnegative weighting of the prior atoms (the
// weights need not sum to one); used by the finite-difference learner.
double bayes_value_weights(const std::vector<double>& weights, const FinitePrior& prior,
                           const MertonMarket& market, const QuadratureRule& quad);

// ----------------------------------------------------------------------------
// Robust baselines and prior re-weighting
// ----------------------------------------------------------------------------
// Constant robust-control fraction: tilt the prior over its atom values to
// the worst-case (smallest) mean b_w within KL radius delta and invest the
// Merton ratio (b_w - r) / ((1-a) sigma^2).  Negative fractions (shorting)
// are permitted.
double drc_fraction(const FinitePrior& prior, const MertonMarket& market, double delta);

struct LearnSchedule {
    double h = 1e-6;          // central-difference half step
    double alpha_k = 1e-5;    // constant learning rate
    double tol = 1e-5;        // stop when ||q_k - q_{k-1}||^2 < tol
    int max_iters = 2000;     // iteration budget
    bool allow_partial = false;  // return the last iterate instead of
                                 // throwing when the budget is exhausted
};

struct LearnResult {
    FinitePrior q_star;   // best-objective re-weighted prior (same atoms)
    FinitePrior final_q;  // iterate the update rule itself settled on
    double value = 0.0;   // penalized objective V(q*) + lambda KL(q*||p)
    int iterations = 0;
    bool converged = false;
};

// Minimizes V(q) + lambda sum_i q_i log(q_i / p_i) over pmfs q on the prior
// atoms.  Gradient entries are central finite differences of the value in
// the raw weights plus the penalty derivative lambda (log(q_i/p_i) + 1); the
// iterate update is q <- softmax(q - alpha_k * gradient).  q_star is the
// best-objective iterate visited (the initialization q = p included), so it
// never does worse than the prior itself; final_q is the iterate the update
// rule itself converged to, which the batch experiments consume as the
// re-weighted prior.  `converged` reports the step-size stopping criterion.
// Throws NoConvergence after max_iters unless allow_partial is set.
LearnResult drbc_finite_learn(const FinitePrior& prior, const MertonMarket& market,
                              double delta, double lambda, const LearnSchedule& schedule,
                              const QuadratureRule& quad);

// ----------------------------------------------------------------------------
// Gaussian-prior closed forms
// ----------------------------------------------------------------------------
struct PhiParams {
    double gamma = 0.5;   // curvature parameter, in (0, 1)
    double sigma0 = 2.0;  // prior standard deviation, > 0
    double b0 = 0.1;      // prior center
    double mu0 = 0.1;     // prior mean used by Monte Carlo reference draws
};

// Exponent coefficients (p, q, c) of the closed-form optimal terminal
// wealth; p is the smaller root of
//     (sigma0^2 + gamma) p^2 - (1/(1-a) + sigma0^2) p + a/(1-a) = 0.
struct WealthCoefficients {
    double p = 0.0;
    double q = 0.0;
    double c = 0.0;
};
WealthCoefficients closed_form_coefficients(const MertonMarket& market,
                                            const PhiParams& params);

// X*_T = exp((1/a)(p/(2T) D^2 + q D + c)) with D = w_T + (b - b0)/sigma.
double closed_form_terminal_wealth(double w_T, double b, const MertonMarket& market,
                                   const PhiParams& params);

// E^{Q^b}[u(X*_T)] = 1/(a sqrt(1-p)) exp(pT/(2(1-p)) nu_b^2
//                    - qT/(1-p) nu_b + q^2 T/(2(1-p)) + c),  nu_b = (b0-b)/sigma.
double closed_form_conditional_utility(double b, const MertonMarket& market,
                                       const PhiParams& params);

// ----------------------------------------------------------------------------
// Performance metrics
// ----------------------------------------------------------------------------
struct PerformanceSummary {
    double sharpe = 0.0;
    double mean_utility = 0.0;
};

// sharpe  = mean(X_T/x0 - e^{rT}) / std(X_T/x0)
// utility = mean(X_T^a / a)
PerformanceSummary sharpe_and_utility(const std::vector<double>& terminals,
                                      const MertonMarket& market);

// ----------------------------------------------------------------------------
// Tabulated policies
// ----------------------------------------------------------------------------
// Precomputes fraction(t, y) on a rectangular grid and answers queries by
// bilinear interpolation (clamped at the edges).  Used where a policy is
// evaluated millions of times along simulated paths.
class FractionTable {
public:
    FractionTable(const FractionFn& fraction, double t_max, int n_t, double y_lo,
                  double y_hi, int n_y);

    double operator()(double t, double y) const;
    FractionFn as_fn() const;

private:
    double t_max_, y_lo_, y_hi_;
    int n_t_, n_y_;
    std::vector<double> values_;  // row-major (t index major)
};

// ----------------------------------------------------------------------------
// Tagged policy wrapper
// ----------------------------------------------------------------------------
struct FractionPolicy {
    enum class Kind { Bayesian, Drc, Drbc, Constant, TimeVarying };

    Kind kind = Kind::Constant;
    FractionFn fn;
    std::string params_json = "{}";  // snapshot of the defining parameters
};

FractionPolicy make_bayes_policy(const FinitePrior& prior, const MertonMarket& market,
                                 const QuadratureRule& quad);
FractionPolicy make_drc_policy(const FinitePrior& prior, const MertonMarket& market,
                               double delta);
FractionPolicy make_drbc_policy(const FinitePrior& q_star, const MertonMarket& market,
                                const QuadratureRule& quad);
FractionPolicy make_constant_policy(double fraction);
FractionPolicy make_time_varying_policy(const std::function<double(double)>& fraction_of_t);

// {"type": ..., "params": {...}}
std::string to_json_string(const FractionPolicy& policy);

}  // namespace drbc
