// ============================================================================
// dual.hpp - Robust policy evaluation via KL strong duality and rMLMC
// ============================================================================
//
// The robust value of a policy with reward functional Z over a KL ball of
// radius delta around the prior mu is
//
//     R_delta = sup_{lambda >= 0} { -lambda delta - lambda log M(lambda) },
//     M(lambda) = E_{b~mu}[ exp(-Z(b)/lambda) ],
//
// extended at lambda = 0 by the essential infimum of Z.  M(lambda) is a
// nested expectation; it is estimated without nested-loop bias by a
// randomized multilevel scheme: draw a level N = n0 + Ntilde with
// Ntilde ~ Geometric(R), pmf p(n0 + j) = R (1-R)^j for j >= 0 and
// R in (1/2, 3/4) strictly; generate 2^(N+1) i.i.d. inner samples with
// conditional mean Z(b); form the full, odd-index and even-index partial-sum
// averages; and return
//
//     E_b = Phi(base) + [Phi(fine) - (Phi(odd) + Phi(even))/2] / p(N),
//
// where Phi_lambda(x) = exp(-x/lambda), base is the average of the first
// 2^n0 samples, fine the average of all 2^(N+1).  The same coupled draw
// yields an unbiased derivative estimate in lambda by replacing Phi with
// A_lambda(x) = (x/lambda^2) exp(-x/lambda).
//
// Draws are stored as their four partial-sum averages plus the level, so the
// estimator (and its lambda-derivative) can be re-evaluated at any lambda
// without re-simulation; the lambda search rides on cached batches.
//
// evaluate_policy_kl runs the stochastic ascent on lambda: fresh outer
// batches per iteration (or one fixed batch on request), step size
// alpha_k = alpha0 / (1 + k/50), ascent direction
// g = -delta - log m - lambda m'/m, projection of lambda into
// [lambda_floor, lambda_upper_bound] each step, and a delta-method standard
// error lambda * sqrt(var/n) / m for the final plug-in value.
// ============================================================================
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "drbc/common.hpp"
#include "drbc/priors.hpp"

namespace drbc {

// ----------------------------------------------------------------------------
// Inner simulator contract
// ----------------------------------------------------------------------------
// open(b, seed) returns a generator of i.i.d. samples whose mean is Z(b);
// the stream must be fully determined by (b, seed).  lower_bound, when set,
// declares a deterministic lower bound on the samples (hence on Z).
using InnerStream = std::function<double()>;

struct InnerSimulator {
    std::function<InnerStream(const Eigen::VectorXd& b, std::uint64_t seed)> open;
    std::optional<double> lower_bound;
};

// Inner simulator with zero conditional variance: every sample equals z_of(b).
InnerSimulator make_exact_inner(std::function<double(const Eigen::VectorXd&)> z_of);

// ----------------------------------------------------------------------------
// Randomized multilevel estimator
// ----------------------------------------------------------------------------
struct RmlmcParams {
    int n0 = 3;          // base level
    double r_geo = 0.65; // geometric success probability, strictly in (1/2, 3/4)

    void validate() const;
};

// One coupled draw, reduced to the statistics the estimator needs.  The
// transform can be re-applied at any lambda.
struct RmlmcDraw {
    int level = 0;         // N = n0 + Ntilde
    double p_level = 1.0;  // pmf of the drawn level
    double base_avg = 0.0; // average of the first 2^n0 samples
    double fine_avg = 0.0; // average of all 2^(N+1) samples
    double odd_avg = 0.0;  // average of the 2^N odd-indexed samples
    double even_avg = 0.0; // average of the 2^N even-indexed samples
};

RmlmcDraw rmlmc_draw(const InnerSimulator& inner, const Eigen::VectorXd& b,
                     const RmlmcParams& params, std::uint64_t seed);

// exp(-x/lambda) and its lambda-derivative (x/lambda^2) exp(-x/lambda).
double phi_transform(double x, double lambda);
double phi_transform_dlambda(double x, double lambda);

// Single-draw estimate of M(lambda) given b, and its lambda-derivative,
// evaluated from a cached draw.
double rmlmc_apply(const RmlmcDraw& draw, double lambda);
double rmlmc_apply_dlambda(const RmlmcDraw& draw, double lambda);

// Single-sample estimator in one call (draw + transform).
double rmlmc_single(const InnerSimulator& inner, const Eigen::VectorXd& b, double lambda,
                    const RmlmcParams& params, std::uint64_t seed);

// A batch of outer draws b_i with their coupled inner statistics.
struct RmlmcBatch {
    std::vector<RmlmcDraw> draws;

    std::size_t size() const { return draws.size(); }
    // Mean of the unbiased per-draw Z estimates (the fine averages).
    double mean_z() const;
    double min_z() const;
};

// Draws one batch: outer parameters from `outer`, inner streams seeded per
// index.  Deterministic for any worker count.
using OuterSampler = std::function<std::vector<Eigen::VectorXd>(std::size_t n, std::uint64_t seed)>;

RmlmcBatch rmlmc_batch(const InnerSimulator& inner, const OuterSampler& outer, std::size_t n,
                       const RmlmcParams& params, std::uint64_t seed, int workers = 1);

// Sample statistics of the estimator at a given lambda.
struct MEstimate {
    double m = 0.0;    // mean of the per-draw estimates
    double var = 0.0;  // sample variance of the per-draw estimates
    std::size_t n = 0;
};

MEstimate rmlmc_estimate_M(const RmlmcBatch& batch, double lambda);
MEstimate rmlmc_derivative(const RmlmcBatch& batch, double lambda);

// Convenience overloads that draw a fresh batch internally.
MEstimate rmlmc_estimate_M(const InnerSimulator& inner, const OuterSampler& outer,
                           std::size_t n, double lambda, const RmlmcParams& params,
                           std::uint64_t seed, int workers = 1);
MEstimate rmlmc_derivative(const InnerSimulator& inner, const OuterSampler& outer,
                           std::size_t n, double lambda, const RmlmcParams& params,
                           std::uint64_t seed, int workers = 1);

// ----------------------------------------------------------------------------
// Dual objective and lambda bounds
// ----------------------------------------------------------------------------
// -lambda delta - lambda log(m); throws NonPositiveM when m <= 0.
double kl_dual_objective(double lambda, double delta, double m);

// Upper bound (mean_z - ess_inf_z) / delta on the optimal lambda; +inf when
// delta == 0, 0 when the spread is non-positive.
double lambda_upper_bound(double mean_z, double ess_inf_z, double delta);

// Floor keeping lambda strictly positive: 1e-6 * max(1, |mean_z|).
double lambda_floor(double mean_z);

// Exact dual value for a finite prior with known conditional values z_i
// (computed in log space; golden-section over the concave objective, with
// the lambda -> 0 extension ess-inf compared explicitly).
struct DualValue {
    double value = 0.0;
    double lambda_star = 0.0;
};
DualValue kl_dual_value_finite(const FinitePrior& prior, const std::vector<double>& z,
                               double delta);

// ----------------------------------------------------------------------------
// Stochastic-ascent policy evaluation
// ----------------------------------------------------------------------------
struct AscentConfig {
    std::size_t n_outer = 1000;  // outer draws per batch
    int max_iters = 50;          // ascent iteration cap
    double alpha0 = 0.01;        // base step size, decayed as alpha0/(1 + k/50)
    double tol_lambda = 1e-3;    // stop when |lambda_{k+1} - lambda_k| < tol
    bool fixed_batch = false;    // reuse the first batch for every iteration
    std::uint64_t seed = 0;
    int workers = 1;
    std::optional<double> lambda_init;  // default: plug-in maximizer on batch 0
};

struct DualEvalResult {
    double robust_value = 0.0;
    double lambda_star = 0.0;
    double std_err = 0.0;
    std::size_t n_outer = 0;
    int iterations = 0;
};

DualEvalResult evaluate_policy_kl(const InnerSimulator& inner, const OuterSampler& outer,
                                  double delta, const RmlmcParams& params,
                                  const AscentConfig& cfg);
DualEvalResult evaluate_policy_kl(const InnerSimulator& inner, const FinitePrior& prior,
                                  double delta, const RmlmcParams& params,
                                  const AscentConfig& cfg);
DualEvalResult evaluate_policy_kl(const InnerSimulator& inner, const GaussianPrior& prior,
                                  double delta, const RmlmcParams& params,
                                  const AscentConfig& cfg);

// {"robust_value":..., "lambda_star":..., "std_err":..., "n_outer":...,
//  "iterations":...}; lambda_star is null when infinite.
std::string to_json_string(const DualEvalResult& result);

// ----------------------------------------------------------------------------
// Cressie-Read dual
// ----------------------------------------------------------------------------
// Robust value over the Cressie-Read divergence ball of order k > 1:
//     inf { sum q_i z_i : sum p_i phi_k(q_i/p_i) <= delta }
//       = sup_beta { beta - c_k(delta) (sum_i w_i ((beta - z_i)_+)^{k*})^{1/k*} },
// with phi_k(t) = (t^k - k t + k - 1)/(k (k-1)), k* = k/(k-1) and
// c_k(delta) = (1 + k(k-1) delta)^{1/k}.  Solved by golden section in beta;
// the bracket upper end (c_k max z - min z)/(c_k - 1) is where the objective
// derivative is provably negative, which covers the small-delta regime where
// the maximizer exceeds max z.
struct CressieReadResult {
    double value = 0.0;
    double beta_star = 0.0;
    double c_k = 1.0;
};
CressieReadResult cressie_read_dual(const std::vector<double>& z,
                                    const std::vector<double>& weights, double k,
                                    double delta);

}  // namespace drbc
