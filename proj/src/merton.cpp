#include "drbc/merton.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <sstream>

namespace drbc {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_scalar_prior(const FinitePrior& prior) {
    prior.validate();
    if (prior.dim() != 1) {
        throw Error("merton: prior atoms must be scalar drifts");
    }
}

}  // namespace

// ----------------------------------------------------------------------------
// MertonMarket
// ----------------------------------------------------------------------------
void MertonMarket::validate() const {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) {
        throw std::invalid_argument("MertonMarket: sigma must be positive");
    }
    if (!(T > 0.0) || !std::isfinite(T)) {
        throw std::invalid_argument("MertonMarket: T must be positive");
    }
    if (!(x0 > 0.0) || !std::isfinite(x0)) {
        throw std::invalid_argument("MertonMarket: x0 must be positive");
    }
    if (!(alpha > 0.0) || !(alpha < 1.0)) {
        throw std::invalid_argument("MertonMarket: alpha must lie in (0, 1)");
    }
    if (!std::isfinite(r)) {
        throw std::invalid_argument("MertonMarket: r must be finite");
    }
}

// ----------------------------------------------------------------------------
// QuadratureRule
// ----------------------------------------------------------------------------
QuadratureRule::QuadratureRule(int n) {
    if (n < 1) {
        throw std::invalid_argument("QuadratureRule: order must be >= 1");
    }
    if (n == 1) {
        nodes_ = {0.0};
        weights_ = {1.0};
        return;
    }
    // Jacobi matrix of the (physicists') Hermite recurrence: zero diagonal,
    // off-diagonal entries sqrt(k/2).  Eigenvalues are the nodes; the squared
    // first components of the orthonormal eigenvectors are the weights
    // relative to total mass, hence they already sum to one.
    Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
    for (int k = 1; k < n; ++k) {
        const double off = std::sqrt(0.5 * static_cast<double>(k));
        jacobi(k, k - 1) = off;
        jacobi(k - 1, k) = off;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(jacobi);
    if (solver.info() != Eigen::Success) {
        throw Error("QuadratureRule: eigen decomposition failed");
    }
    nodes_.resize(n);
    weights_.resize(n);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        nodes_[i] = solver.eigenvalues()(i);  // ascending
        const double v0 = solver.eigenvectors()(0, i);
        weights_[i] = v0 * v0;
        total += weights_[i];
    }
    // Orthonormality makes the sum 1 up to rounding; normalize exactly.
    for (double& w : weights_) {
        w /= total;
    }
}

double QuadratureRule::integrate(const std::function<double(double)>& f, double s) const {
    if (!(s >= 0.0)) {
        throw std::invalid_argument("QuadratureRule: variance must be >= 0");
    }
    if (s == 0.0) {
        return f(0.0);
    }
    const double scale = std::sqrt(2.0 * s);
    double acc = 0.0;
    for (int i = 0; i < size(); ++i) {
        acc += weights_[i] * f(scale * nodes_[i]);
    }
    return acc;
}

// ----------------------------------------------------------------------------
// Posterior mixture
// ----------------------------------------------------------------------------
LogFMixture log_f_mixture(double t, double y, const FinitePrior& prior,
                          const MertonMarket& market) {
    require_scalar_prior(prior);
    market.validate();
    if (t < 0.0) {
        throw std::invalid_argument("log_f_mixture: t must be >= 0");
    }
    // Terms log p_i + nu_i y - nu_i^2 t / 2 for the positive-mass atoms.
    double max_term = -kInf;
    std::vector<double> terms;
    std::vector<double> nus;
    terms.reserve(prior.size());
    nus.reserve(prior.size());
    for (std::size_t i = 0; i < prior.size(); ++i) {
        const double p = prior.probs[i];
        if (p <= 0.0) {
            continue;
        }
        const double nu = market.nu(prior.scalar_atom(i));
        const double term = std::log(p) + nu * y - 0.5 * nu * nu * t;
        terms.push_back(term);
        nus.push_back(nu);
        max_term = std::max(max_term, term);
    }
    double den = 0.0;
    double num = 0.0;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        const double w = std::exp(terms[i] - max_term);
        den += w;
        num += w * nus[i];
    }
    LogFMixture out;
    out.log_f = max_term + std::log(den);
    out.nu_mean = num / den;
    return out;
}

FMixture f_mixture(double t, double y, const FinitePrior& prior, const MertonMarket& market) {
    const LogFMixture lf = log_f_mixture(t, y, prior, market);
    FMixture out;
    out.f = std::exp(lf.log_f);
    out.df = out.f * lf.nu_mean;
    return out;
}

// ----------------------------------------------------------------------------
// Bayesian closed forms
// ----------------------------------------------------------------------------
double bayes_fraction(double t, double y, const FinitePrior& prior,
                      const MertonMarket& market, const QuadratureRule& quad) {
    market.validate();
    if (!(t >= 0.0) || !(t < market.T)) {
        throw std::invalid_argument("bayes_fraction: requires 0 <= t < T");
    }
    const double s = market.T - t;
    const double inv_one_minus_a = 1.0 / (1.0 - market.alpha);
    const double scale = std::sqrt(2.0 * s);

    // Over the quadrature nodes z_j, both integrands share the factor
    // F(T, y+z)^{1/(1-a)}; the numerator carries one extra factor, the
    // posterior mean of nu.  Work with m_j = log w_j + log F_j / (1-a) and
    // factor the max so the largest term is exactly 1.
    const int n = quad.size();
    std::vector<double> m(n);
    std::vector<double> nu_mean(n);
    double max_m = -kInf;
    for (int j = 0; j < n; ++j) {
        const double z = scale * quad.nodes()[j];
        const LogFMixture lf = log_f_mixture(market.T, y + z, prior, market);
        m[j] = std::log(quad.weights()[j]) + inv_one_minus_a * lf.log_f;
        nu_mean[j] = lf.nu_mean;
        max_m = std::max(max_m, m[j]);
    }
    if (!std::isfinite(max_m)) {
        throw QuadratureUnderflow("bayes_fraction: integrand vanished at every node");
    }
    double den = 0.0;
    double num = 0.0;
    for (int j = 0; j < n; ++j) {
        const double w = std::exp(m[j] - max_m);
        den += w;
        num += w * nu_mean[j];
    }
    if (!(den > 0.0) || !std::isfinite(den)) {
        throw QuadratureUnderflow("bayes_fraction: denominator integral underflowed");
    }
    return num / ((1.0 - market.alpha) * market.sigma * den);
}

double bayes_value_weights(const std::vector<double>& weights, const FinitePrior& prior,
                           const MertonMarket& market, const QuadratureRule& quad) {
    require_scalar_prior(prior);
    market.validate();
    if (weights.size() != prior.size()) {
        throw SupportMismatch("bayes_value_weights: weight/atom length mismatch");
    }
    const double a = market.alpha;
    const double inv_one_minus_a = 1.0 / (1.0 - a);
    const double scale = std::sqrt(2.0 * market.T);

    std::vector<double> nus(prior.size());
    for (std::size_t i = 0; i < prior.size(); ++i) {
        nus[i] = market.nu(prior.scalar_atom(i));
    }

    // log integral of F_w(T, z)^{1/(1-a)} against phi_T.  The mixture weights
    // may be slightly perturbed (finite differences), so handle signed
    // coefficients by factoring the largest atom exponent.
    std::vector<double> g(quad.size());
    for (int j = 0; j < quad.size(); ++j) {
        const double z = scale * quad.nodes()[j];
        double max_l = -kInf;
        for (std::size_t i = 0; i < prior.size(); ++i) {
            max_l = std::max(max_l, nus[i] * z - 0.5 * nus[i] * nus[i] * market.T);
        }
        double scaled = 0.0;
        for (std::size_t i = 0; i < prior.size(); ++i) {
            const double l = nus[i] * z - 0.5 * nus[i] * nus[i] * market.T;
            scaled += weights[i] * std::exp(l - max_l);
        }
        if (!(scaled > 0.0)) {
            throw Error("bayes_value_weights: mixture is not positive at a node");
        }
        const double log_f = max_l + std::log(scaled);
        g[j] = std::log(quad.weights()[j]) + inv_one_minus_a * log_f;
    }
    const double log_integral = logsumexp(g);
    const double factor = std::pow(market.x0 * std::exp(market.r * market.T), a) / a;
    return factor * std::exp((1.0 - a) * log_integral);
}

double bayes_value(const FinitePrior& prior, const MertonMarket& market,
                   const QuadratureRule& quad) {
    require_scalar_prior(prior);
    return bayes_value_weights(prior.probs, prior, market, quad);
}

// ----------------------------------------------------------------------------
// Robust baselines
// ----------------------------------------------------------------------------
double drc_fraction(const FinitePrior& prior, const MertonMarket& market, double delta) {
    require_scalar_prior(prior);
    market.validate();
    if (!(delta >= 0.0)) {
        throw std::invalid_argument("drc_fraction: delta must be >= 0");
    }
    std::vector<double> atoms(prior.size());
    for (std::size_t i = 0; i < prior.size(); ++i) {
        atoms[i] = prior.scalar_atom(i);
    }
    const bool all_equal =
        std::all_of(atoms.begin(), atoms.end(), [&](double b) { return b == atoms.front(); });
    double worst_mean;
    if (delta == 0.0 || all_equal) {
        worst_mean = 0.0;
        for (std::size_t i = 0; i < prior.size(); ++i) {
            worst_mean += prior.probs[i] * atoms[i];
        }
    } else {
        worst_mean = tilt_worst_mean(prior, atoms, delta, TiltSense::Min).tilted_mean;
    }
    return (worst_mean - market.r) / ((1.0 - market.alpha) * market.sigma * market.sigma);
}

// ----------------------------------------------------------------------------
// Penalized prior re-weighting
// ----------------------------------------------------------------------------
LearnResult drbc_finite_learn(const FinitePrior& prior, const MertonMarket& market,
                              double delta, double lambda, const LearnSchedule& schedule,
                              const QuadratureRule& quad) {
    require_scalar_prior(prior);
    market.validate();
    if (!(delta >= 0.0)) {
        throw std::invalid_argument("drbc_finite_learn: delta must be >= 0");
    }
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
        throw std::invalid_argument("drbc_finite_learn: lambda must be >= 0");
    }
    if (!(schedule.h > 0.0) || !(schedule.alpha_k > 0.0) || !(schedule.tol > 0.0) ||
        schedule.max_iters < 1) {
        throw std::invalid_argument("drbc_finite_learn: invalid schedule");
    }
    for (double p : prior.probs) {
        if (!(p > 0.0)) {
            throw std::invalid_argument(
                "drbc_finite_learn: prior probabilities must be strictly positive");
        }
    }

    const std::size_t n = prior.size();
    std::vector<double> q = prior.probs;

    const auto value_of = [&](const std::vector<double>& w) {
        return bayes_value_weights(w, prior, market, quad);
    };
    const auto objective = [&](const std::vector<double>& pmf) {
        return value_of(pmf) + lambda * kl_finite(pmf, prior.probs);
    };

    std::vector<double> best_q = q;
    double best_obj = objective(q);
    int iterations = 0;
    bool converged = false;

    std::vector<double> grad(n);
    std::vector<double> logits(n);
    std::vector<double> q_next(n);
    std::vector<double> bumped;
    for (int k = 0; k < schedule.max_iters; ++k) {
        for (std::size_t i = 0; i < n; ++i) {
            bumped = q;
            bumped[i] = q[i] + schedule.h;
            const double up = value_of(bumped);
            // Weights must stay nonnegative for the value to be defined, so
            // the downward bump is clamped at zero when q_i < h.
            bumped[i] = std::max(q[i] - schedule.h, 0.0);
            const double down = value_of(bumped);
            grad[i] = (up - down) / (2.0 * schedule.h) +
                      lambda * (std::log(q[i] / prior.probs[i]) + 1.0);
        }
        for (std::size_t i = 0; i < n; ++i) {
            logits[i] = q[i] - schedule.alpha_k * grad[i];
        }
        const double lse = logsumexp(logits);
        double step2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            // Floor keeps log(q_i/p_i) finite on the next sweep when the
            // softmax underflows a coordinate (large-lambda oscillations).
            q_next[i] = std::max(std::exp(logits[i] - lse), 1e-300);
            step2 += (q_next[i] - q[i]) * (q_next[i] - q[i]);
        }
        q = q_next;
        iterations = k + 1;
        const double obj = objective(q);
        if (obj < best_obj) {
            best_obj = obj;
            best_q = q;
        }
        if (step2 < schedule.tol) {
            converged = true;
            break;
        }
    }

    if (!converged && !schedule.allow_partial) {
        std::ostringstream oss;
        oss << "drbc_finite_learn: no convergence after " << schedule.max_iters
            << " iterations (best objective " << best_obj << ")";
        throw NoConvergence(oss.str());
    }

    LearnResult result;
    result.q_star.atoms = prior.atoms;
    result.q_star.probs = best_q;
    result.q_star.validate();
    result.final_q.atoms = prior.atoms;
    result.final_q.probs = q;
    result.final_q.validate();
    result.value = best_obj;
    result.iterations = iterations;
    result.converged = converged;
    return result;
}

// ----------------------------------------------------------------------------
// Gaussian-prior closed forms
// ----------------------------------------------------------------------------
WealthCoefficients closed_form_coefficients(const MertonMarket& market,
                                            const PhiParams& params) {
    market.validate();
    if (!(params.sigma0 > 0.0)) {
        throw std::invalid_argument("closed_form_coefficients: sigma0 must be > 0");
    }
    if (!(params.gamma > 0.0) || !(params.gamma < 1.0)) {
        throw std::invalid_argument("closed_form_coefficients: gamma must lie in (0, 1)");
    }
    const double a = market.alpha;
    const double s2 = params.sigma0 * params.sigma0;
    // p is the smaller root of (s2 + gamma) p^2 - (1/(1-a) + s2) p + a/(1-a).
    const double qa = s2 + params.gamma;
    const double qb = 1.0 / (1.0 - a) + s2;
    const double qc = a / (1.0 - a);
    const double disc = qb * qb - 4.0 * qa * qc;
    if (disc < 0.0) {
        throw ComplexRoot("closed_form_coefficients: negative discriminant");
    }
    WealthCoefficients out;
    out.p = (qb - std::sqrt(disc)) / (2.0 * qa);

    const double nu = market.nu(params.b0);
    const double gp = 1.0 - params.gamma * out.p;
    if (!(gp > 0.0)) {
        throw InvalidP("closed_form_coefficients: 1 - gamma p must be positive");
    }
    out.q = a * (1.0 - out.p) * nu / ((1.0 - a) * gp);

    const double pa = 1.0 - out.p / a;
    if (!(pa > 0.0)) {
        throw InvalidP("closed_form_coefficients: p must be below alpha");
    }
    const double shifted = nu - out.q / a;
    out.c = a * (std::log(market.x0) + market.r * market.T +
                 0.5 * market.T * (nu * nu - shifted * shifted / pa));
    return out;
}

double closed_form_terminal_wealth(double w_T, double b, const MertonMarket& market,
                                   const PhiParams& params) {
    const WealthCoefficients k = closed_form_coefficients(market, params);
    const double d = w_T + (b - params.b0) / market.sigma;
    const double expo =
        (k.p / (2.0 * market.T)) * d * d + k.q * d + k.c;
    return std::exp(expo / market.alpha);
}

double closed_form_conditional_utility(double b, const MertonMarket& market,
                                       const PhiParams& params) {
    const WealthCoefficients k = closed_form_coefficients(market, params);
    if (k.p >= 1.0) {
        throw InvalidP("closed_form_conditional_utility: requires p < 1");
    }
    const double a = market.alpha;
    const double one_minus_p = 1.0 - k.p;
    const double nu_b = (params.b0 - b) / market.sigma;
    const double expo = (k.p * market.T / (2.0 * one_minus_p)) * nu_b * nu_b -
                        (k.q * market.T / one_minus_p) * nu_b +
                        k.q * k.q * market.T / (2.0 * one_minus_p) + k.c;
    return std::exp(expo) / (a * std::sqrt(one_minus_p));
}

// ----------------------------------------------------------------------------
// Performance metrics
// ----------------------------------------------------------------------------
PerformanceSummary sharpe_and_utility(const std::vector<double>& terminals,
                                      const MertonMarket& market) {
    market.validate();
    if (terminals.size() < 2) {
        throw std::invalid_argument("sharpe_and_utility: need at least two terminal values");
    }
    RunningStat returns;
    RunningStat utilities;
    for (double x : terminals) {
        if (!std::isfinite(x)) {
            throw NonFinitePath("sharpe_and_utility: non-finite terminal wealth");
        }
        returns.add(x / market.x0);
        utilities.add(std::pow(x, market.alpha) / market.alpha);
    }
    const double sd = returns.stddev();
    if (!(sd > 0.0)) {
        throw ZeroVariance("sharpe_and_utility: terminal wealths are all equal");
    }
    PerformanceSummary out;
    out.sharpe = (returns.mean() - std::exp(market.r * market.T)) / sd;
    out.mean_utility = utilities.mean();
    return out;
}

// ----------------------------------------------------------------------------
// FractionTable
// ----------------------------------------------------------------------------
FractionTable::FractionTable(const FractionFn& fraction, double t_max, int n_t, double y_lo,
                             double y_hi, int n_y)
    : t_max_(t_max), y_lo_(y_lo), y_hi_(y_hi), n_t_(n_t), n_y_(n_y) {
    if (!(t_max > 0.0) || n_t < 2 || n_y < 2 || !(y_hi > y_lo)) {
        throw std::invalid_argument("FractionTable: invalid grid");
    }
    values_.resize(static_cast<std::size_t>(n_t) * static_cast<std::size_t>(n_y));
    const double dt = t_max_ / (n_t_ - 1);
    const double dy = (y_hi_ - y_lo_) / (n_y_ - 1);
    for (int i = 0; i < n_t_; ++i) {
        const double t = i * dt;
        for (int j = 0; j < n_y_; ++j) {
            values_[static_cast<std::size_t>(i) * n_y_ + j] = fraction(t, y_lo_ + j * dy);
        }
    }
}

double FractionTable::operator()(double t, double y) const {
    const double dt = t_max_ / (n_t_ - 1);
    const double dy = (y_hi_ - y_lo_) / (n_y_ - 1);
    const double ti = std::clamp(t / dt, 0.0, static_cast<double>(n_t_ - 1));
    const double yj = std::clamp((y - y_lo_) / dy, 0.0, static_cast<double>(n_y_ - 1));
    const int i0 = std::min(static_cast<int>(ti), n_t_ - 2);
    const int j0 = std::min(static_cast<int>(yj), n_y_ - 2);
    const double ft = ti - i0;
    const double fy = yj - j0;
    const auto at = [&](int i, int j) {
        return values_[static_cast<std::size_t>(i) * n_y_ + j];
    };
    return (1.0 - ft) * ((1.0 - fy) * at(i0, j0) + fy * at(i0, j0 + 1)) +
           ft * ((1.0 - fy) * at(i0 + 1, j0) + fy * at(i0 + 1, j0 + 1));
}

FractionFn FractionTable::as_fn() const {
    auto shared = std::make_shared<FractionTable>(*this);
    return [shared](double t, double y) { return (*shared)(t, y); };
}

// ----------------------------------------------------------------------------
// FractionPolicy
// ----------------------------------------------------------------------------
namespace {

std::string prior_params_json(const FinitePrior& prior) {
    nlohmann::json params;
    params["prior"] = nlohmann::json::parse(to_json_string(prior));
    return params.dump();
}

}  // namespace

FractionPolicy make_bayes_policy(const FinitePrior& prior, const MertonMarket& market,
                                 const QuadratureRule& quad) {
    require_scalar_prior(prior);
    market.validate();
    FractionPolicy out;
    out.kind = FractionPolicy::Kind::Bayesian;
    out.fn = [prior, market, quad](double t, double y) {
        return bayes_fraction(t, y, prior, market, quad);
    };
    out.params_json = prior_params_json(prior);
    return out;
}

FractionPolicy make_drc_policy(const FinitePrior& prior, const MertonMarket& market,
                               double delta) {
    const double fraction = drc_fraction(prior, market, delta);
    FractionPolicy out;
    out.kind = FractionPolicy::Kind::Drc;
    out.fn = [fraction](double, double) { return fraction; };
    nlohmann::json params;
    params["delta"] = delta;
    params["fraction"] = fraction;
    out.params_json = params.dump();
    return out;
}

FractionPolicy make_drbc_policy(const FinitePrior& q_star, const MertonMarket& market,
                                const QuadratureRule& quad) {
    FractionPolicy out = make_bayes_policy(q_star, market, quad);
    out.kind = FractionPolicy::Kind::Drbc;
    return out;
}

FractionPolicy make_constant_policy(double fraction) {
    FractionPolicy out;
    out.kind = FractionPolicy::Kind::Constant;
    out.fn = [fraction](double, double) { return fraction; };
    nlohmann::json params;
    params["fraction"] = fraction;
    out.params_json = params.dump();
    return out;
}

FractionPolicy make_time_varying_policy(const std::function<double(double)>& fraction_of_t) {
    FractionPolicy out;
    out.kind = FractionPolicy::Kind::TimeVarying;
    out.fn = [fraction_of_t](double t, double) { return fraction_of_t(t); };
    nlohmann::json params;
    params["description"] = "deterministic time-varying fraction";
    out.params_json = params.dump();
    return out;
}

std::string to_json_string(const FractionPolicy& policy) {
    static const char* kNames[] = {"bayesian", "drc", "drbc", "constant", "time_varying"};
    nlohmann::json doc;
    doc["type"] = kNames[static_cast<int>(policy.kind)];
    doc["params"] = nlohmann::json::parse(policy.params_json);
    return doc.dump();
}

}  // namespace drbc
