// ============================================================================
// priors.hpp - Priors over the latent market/model parameter
// ============================================================================
//
// FinitePrior: atoms b_i (scalar or vector valued) with probabilities p_i.
// GaussianPrior: isotropic normal N(mu0, sigma0^2 I).
// RadiusSpec: radius delta of a KL ambiguity ball around the prior.
//
// Operations:
//  - kl_finite:        KL(q || p) between two pmfs on a shared support
//  - tilt_worst_mean:  exponential tilt q_i(a) ~ p_i exp(-+a score_i) whose
//                      KL distance from p equals delta (bisection on a), with
//                      saturation onto the extreme-score atoms for large delta
//  - primal_inner_inf: exact inner problem  inf { sum q_i z_i : KL(q||p)<=delta }
//                      solved by the tilting route (oracle for dual checks)
//  - sample_prior:     deterministic draws given a seed
//  - JSON (de)serialization in the documented schemas
// ============================================================================
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "drbc/common.hpp"

namespace drbc {

struct FinitePrior {
    std::vector<Eigen::VectorXd> atoms;  // atom values b_i (all same dimension)
    std::vector<double> probs;           // probabilities, nonnegative, sum to 1

    std::size_t size() const { return atoms.size(); }
    int dim() const { return atoms.empty() ? 0 : static_cast<int>(atoms.front().size()); }

    // Scalar-valued atom accessor; requires dim() == 1.
    double scalar_atom(std::size_t i) const;

    // Throws std::invalid_argument on empty support, negative probabilities,
    // probabilities not summing to 1 (1e-9 tolerance), or ragged atom dims.
    void validate() const;

    // Convenience constructor for scalar supports.
    static FinitePrior from_scalars(const std::vector<double>& values,
                                    const std::vector<double>& probs);
};

struct GaussianPrior {
    Eigen::VectorXd mu0;  // mean
    double sigma0 = 1.0;  // isotropic standard deviation, > 0

    int dim() const { return static_cast<int>(mu0.size()); }
    void validate() const;
};

struct RadiusSpec {
    double delta = 0.0;  // KL ball radius, >= 0

    void validate() const;
};

// Result of an exponential tilt matched to a KL radius.
struct TiltResult {
    std::vector<double> q;   // tilted pmf
    double alpha = 0.0;      // tilt magnitude (inf when saturated)
    double tilted_mean = 0;  // sum_i q_i score_i
    double kl = 0.0;         // achieved KL(q || p)
    bool saturated = false;  // true if delta >= KL(point mass on extreme set)
};

enum class TiltSense { Min, Max };

// KL(q || p) for pmfs on the same index set.  Conventions: 0 log(0/p) = 0;
// q_i > 0 with p_i = 0 yields +infinity.  Throws SupportMismatch when the
// lengths differ and std::invalid_argument on negative entries.
double kl_finite(const std::vector<double>& q, const std::vector<double>& p);

// Worst-case (sense = Min) or best-case (sense = Max) mean of `scores` over
// the KL ball of radius delta around `prior`, realized by the exponential
// tilt q_i(a) ~ p_i exp(-a score_i) (sense Min; exp(+a score_i) for Max)
// with a >= 0 chosen by bisection so that KL(q(a) || p) = delta, to
// |KL - delta| <= 1e-10 or 200 bisection iterations.  When delta reaches the
// KL of the limiting point mass on the extreme-score atoms, returns that
// limit with saturated = true.  Throws DegenerateScores when all scores are
// equal (no tilt can move the mean).
TiltResult tilt_worst_mean(const FinitePrior& prior, const std::vector<double>& scores,
                           double delta, TiltSense sense = TiltSense::Min);

// Exact value (and argmin pmf) of the inner problem
//     inf { sum_i q_i z_i  :  KL(q || p) <= delta }
// for a finite prior, via the tilting route.  Handles the degenerate case of
// equal z (value is that constant) and saturation (value is the minimum z).
struct InnerInfResult {
    double value = 0.0;
    std::vector<double> q;
};
InnerInfResult primal_inner_inf(const FinitePrior& prior, const std::vector<double>& z,
                                double delta);

// n deterministic draws from the prior (seeded; independent of any global
// state).  Finite priors use inverse-CDF sampling.
std::vector<Eigen::VectorXd> sample_prior(const FinitePrior& prior, std::size_t n,
                                          std::uint64_t seed);
std::vector<Eigen::VectorXd> sample_prior(const GaussianPrior& prior, std::size_t n,
                                          std::uint64_t seed);

// JSON schemas:
//   FinitePrior:   {"atoms": [{"b": <number|array>, "p": <number>}, ...]}
//   GaussianPrior: {"gaussian": {"mu0": <number|array>, "sigma0": <number>}}
std::string to_json_string(const FinitePrior& prior);
std::string to_json_string(const GaussianPrior& prior);
FinitePrior finite_prior_from_json(const std::string& text);
GaussianPrior gaussian_prior_from_json(const std::string& text);

}  // namespace drbc
