#include "drbc/dual.hpp"

#include <json.hpp>

#include <cmath>
#include <limits>

namespace drbc {

namespace {

constexpr std::uint64_t kOuterTag = 0x6F75746572ULL;   // outer-parameter stream
constexpr std::uint64_t kLevelTag = 0x6C6576656CULL;   // level draw stream
constexpr std::uint64_t kStreamTag = 0x696E6E6572ULL;  // inner-sample stream
constexpr std::uint64_t kEnlargeTag = 0x656E6CULL;     // retry batch stream

// Resource guard only: the probability of drawing this level is ~3e-21 per
// draw, but 2^47 inner samples must never be attempted silently.
constexpr int kMaxGeometricLevel = 45;

}  // namespace

InnerSimulator make_exact_inner(std::function<double(const Eigen::VectorXd&)> z_of) {
    InnerSimulator sim;
    sim.open = [z_of = std::move(z_of)](const Eigen::VectorXd& b, std::uint64_t) -> InnerStream {
        const double z = z_of(b);
        return [z]() { return z; };
    };
    return sim;
}

void RmlmcParams::validate() const {
    if (n0 < 0) throw std::invalid_argument("RmlmcParams: n0 must be >= 0");
    if (!(r_geo > 0.5 && r_geo < 0.75))
        throw std::invalid_argument("RmlmcParams: r_geo must lie strictly in (1/2, 3/4)");
}

RmlmcDraw rmlmc_draw(const InnerSimulator& inner, const Eigen::VectorXd& b,
                     const RmlmcParams& params, std::uint64_t seed) {
    params.validate();

    // Level draw: Ntilde ~ Geometric(R) on {0, 1, ...} by inverse transform.
    auto level_rng = make_rng(derive_seed(seed, kLevelTag));
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const double u = unif(level_rng);
    const int ntilde =
        static_cast<int>(std::floor(std::log1p(-u) / std::log1p(-params.r_geo)));
    if (ntilde > kMaxGeometricLevel)
        throw Error("rmlmc_draw: geometric level exceeded the resource guard");

    RmlmcDraw draw;
    draw.level = params.n0 + ntilde;
    draw.p_level = params.r_geo * std::pow(1.0 - params.r_geo, ntilde);

    const std::uint64_t base_count = 1ULL << params.n0;
    const std::uint64_t total = 1ULL << (draw.level + 1);

    InnerStream stream = inner.open(b, derive_seed(seed, kStreamTag));
    double s_base = 0.0, s_full = 0.0, s_odd = 0.0, s_even = 0.0;
    for (std::uint64_t j = 1; j <= total; ++j) {
        const double z = stream();
        s_full += z;
        if (j & 1ULL)
            s_odd += z;
        else
            s_even += z;
        if (j <= base_count) s_base += z;
    }
    const double half = static_cast<double>(total / 2);
    draw.base_avg = s_base / static_cast<double>(base_count);
    draw.fine_avg = s_full / static_cast<double>(total);
    draw.odd_avg = s_odd / half;
    draw.even_avg = s_even / half;
    return draw;
}

double phi_transform(double x, double lambda) {
    if (!(lambda > 0.0)) throw std::invalid_argument("phi_transform: lambda must be > 0");
    return std::exp(-x / lambda);
}

double phi_transform_dlambda(double x, double lambda) {
    if (!(lambda > 0.0))
        throw std::invalid_argument("phi_transform_dlambda: lambda must be > 0");
    return x / (lambda * lambda) * std::exp(-x / lambda);
}

double rmlmc_apply(const RmlmcDraw& d, double lambda) {
    const double correction = phi_transform(d.fine_avg, lambda) -
                              0.5 * (phi_transform(d.odd_avg, lambda) +
                                     phi_transform(d.even_avg, lambda));
    return phi_transform(d.base_avg, lambda) + correction / d.p_level;
}

double rmlmc_apply_dlambda(const RmlmcDraw& d, double lambda) {
    const double correction = phi_transform_dlambda(d.fine_avg, lambda) -
                              0.5 * (phi_transform_dlambda(d.odd_avg, lambda) +
                                     phi_transform_dlambda(d.even_avg, lambda));
    return phi_transform_dlambda(d.base_avg, lambda) + correction / d.p_level;
}

double rmlmc_single(const InnerSimulator& inner, const Eigen::VectorXd& b, double lambda,
                    const RmlmcParams& params, std::uint64_t seed) {
    return rmlmc_apply(rmlmc_draw(inner, b, params, seed), lambda);
}

double RmlmcBatch::mean_z() const {
    RunningStat st;
    for (const RmlmcDraw& d : draws) st.add(d.fine_avg);
    return st.mean();
}

double RmlmcBatch::min_z() const {
    double m = std::numeric_limits<double>::infinity();
    for (const RmlmcDraw& d : draws) m = std::min(m, d.fine_avg);
    return m;
}

RmlmcBatch rmlmc_batch(const InnerSimulator& inner, const OuterSampler& outer, std::size_t n,
                       const RmlmcParams& params, std::uint64_t seed, int workers) {
    params.validate();
    if (n == 0) throw std::invalid_argument("rmlmc_batch: n must be >= 1");
    const std::vector<Eigen::VectorXd> bs = outer(n, derive_seed(seed, kOuterTag));
    RmlmcBatch batch;
    batch.draws.resize(n);
    parallel_for(n, workers, [&](std::size_t i) {
        batch.draws[i] = rmlmc_draw(inner, bs[i], params, derive_seed(seed, i));
    });
    return batch;
}

namespace {

MEstimate summarize(const RmlmcBatch& batch, double lambda, bool derivative) {
    RunningStat st;
    for (const RmlmcDraw& d : batch.draws)
        st.add(derivative ? rmlmc_apply_dlambda(d, lambda) : rmlmc_apply(d, lambda));
    MEstimate e;
    e.m = st.mean();
    e.var = st.variance();
    e.n = st.count();
    return e;
}

}  // namespace

MEstimate rmlmc_estimate_M(const RmlmcBatch& batch, double lambda) {
    return summarize(batch, lambda, /*derivative=*/false);
}

MEstimate rmlmc_derivative(const RmlmcBatch& batch, double lambda) {
    return summarize(batch, lambda, /*derivative=*/true);
}

MEstimate rmlmc_estimate_M(const InnerSimulator& inner, const OuterSampler& outer,
                           std::size_t n, double lambda, const RmlmcParams& params,
                           std::uint64_t seed, int workers) {
    return rmlmc_estimate_M(rmlmc_batch(inner, outer, n, params, seed, workers), lambda);
}

MEstimate rmlmc_derivative(const InnerSimulator& inner, const OuterSampler& outer,
                           std::size_t n, double lambda, const RmlmcParams& params,
                           std::uint64_t seed, int workers) {
    return rmlmc_derivative(rmlmc_batch(inner, outer, n, params, seed, workers), lambda);
}

double kl_dual_objective(double lambda, double delta, double m) {
    if (!(lambda > 0.0)) throw std::invalid_argument("kl_dual_objective: lambda must be > 0");
    if (!(m > 0.0)) throw NonPositiveM("kl_dual_objective: m must be > 0");
    return -lambda * delta - lambda * std::log(m);
}

double lambda_upper_bound(double mean_z, double ess_inf_z, double delta) {
    if (delta == 0.0) return std::numeric_limits<double>::infinity();
    if (!(delta > 0.0)) throw std::invalid_argument("lambda_upper_bound: delta must be >= 0");
    const double spread = mean_z - ess_inf_z;
    return spread > 0.0 ? spread / delta : 0.0;
}

double lambda_floor(double mean_z) { return 1e-6 * std::max(1.0, std::abs(mean_z)); }

DualValue kl_dual_value_finite(const FinitePrior& prior, const std::vector<double>& z,
                               double delta) {
    prior.validate();
    if (z.size() != prior.size())
        throw SupportMismatch("kl_dual_value_finite: z length does not match prior support");
    RadiusSpec{delta}.validate();

    double mean = 0.0;
    double ess_inf = std::numeric_limits<double>::infinity();
    std::vector<double> logp(z.size(), -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double p = prior.probs[i];
        if (p <= 0.0) continue;
        mean += p * z[i];
        ess_inf = std::min(ess_inf, z[i]);
        logp[i] = std::log(p);
    }

    if (delta == 0.0) return {mean, std::numeric_limits<double>::infinity()};
    if (!(mean - ess_inf > 0.0)) return {mean, 0.0};  // constant Z on the support

    auto objective = [&](double lambda) {
        std::vector<double> terms;
        terms.reserve(z.size());
        for (std::size_t i = 0; i < z.size(); ++i)
            if (std::isfinite(logp[i])) terms.push_back(logp[i] - z[i] / lambda);
        return -lambda * delta - lambda * logsumexp(terms);
    };

    const double hi = lambda_upper_bound(mean, ess_inf, delta);
    const double lo = std::min(lambda_floor(mean), 0.5 * hi);
    const ScalarOptimum opt =
        golden_section_max(objective, lo, hi, 1e-11 * std::max(1.0, hi), 400);

    // lambda -> 0 extension: the dual value saturates at the essential inf.
    if (ess_inf >= opt.value) return {ess_inf, 0.0};
    return {opt.value, opt.x};
}

namespace {

struct BatchStats {
    MEstimate m;
    std::size_t n_effective = 0;
};

// m_hat at lambda with the one allowed enlargement when the average is
// non-positive: draw a second batch of equal size, pool, retry, then fail.
MEstimate estimate_with_retry(const InnerSimulator& inner, const OuterSampler& outer,
                              RmlmcBatch& batch, double lambda, const RmlmcParams& params,
                              std::uint64_t retry_seed, int workers) {
    MEstimate est = rmlmc_estimate_M(batch, lambda);
    if (est.m > 0.0) return est;
    RmlmcBatch extra = rmlmc_batch(inner, outer, batch.size(), params, retry_seed, workers);
    batch.draws.insert(batch.draws.end(), extra.draws.begin(), extra.draws.end());
    est = rmlmc_estimate_M(batch, lambda);
    if (est.m > 0.0) return est;
    throw NonPositiveM("evaluate_policy_kl: outer average of exp(-Z/lambda) stayed non-positive "
                       "after enlarging the batch");
}

// Plug-in maximizer of the empirical dual on one cached batch: coarse scan
// over a log-spaced lambda grid, then golden-section refinement around the
// best cell.  Small lambdas blow the multilevel corrections up exponentially
// and the near-cancelling average can land on a tiny positive value whose
// log inflates the objective, so a lambda is trusted only where the average
// is statistically positive (several standard errors above zero).
double plugin_lambda_argmax(const RmlmcBatch& batch, double delta, double lo, double hi) {
    if (!(hi > lo)) return lo;
    auto safe_objective = [&](double lambda) {
        const MEstimate est = rmlmc_estimate_M(batch, lambda);
        const double noise = 3.0 * std::sqrt(est.var / static_cast<double>(est.n));
        if (!std::isfinite(est.m) || !(est.m > noise))
            return -std::numeric_limits<double>::infinity();
        return kl_dual_objective(lambda, delta, est.m);
    };
    constexpr int kScan = 48;
    const double log_lo = std::log(lo), log_hi = std::log(hi);
    double best_x = lo;
    double best_f = -std::numeric_limits<double>::infinity();
    for (int i = 0; i <= kScan; ++i) {
        const double x = std::exp(log_lo + (log_hi - log_lo) * i / kScan);
        const double f = safe_objective(x);
        if (f > best_f) {
            best_f = f;
            best_x = x;
        }
    }
    // No statistically trustworthy lambda on the whole grid: start from the
    // upper bound, where the transform is smoothest and easiest to estimate.
    if (!std::isfinite(best_f)) return hi;
    const double cell = (log_hi - log_lo) / kScan;
    const double a = std::exp(std::log(best_x) - cell);
    const double b = std::exp(std::log(best_x) + cell);
    const ScalarOptimum opt = golden_section_max(safe_objective, std::max(a, lo),
                                                 std::min(b, hi), 1e-6 * hi, 200);
    return opt.value >= best_f ? opt.x : best_x;
}

}  // namespace

DualEvalResult evaluate_policy_kl(const InnerSimulator& inner, const OuterSampler& outer,
                                  double delta, const RmlmcParams& params,
                                  const AscentConfig& cfg) {
    params.validate();
    RadiusSpec{delta}.validate();
    if (cfg.n_outer == 0) throw std::invalid_argument("evaluate_policy_kl: n_outer must be >= 1");

    auto batch_for = [&](int iteration) {
        const std::uint64_t s =
            derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(cfg.fixed_batch ? 0 : iteration));
        return rmlmc_batch(inner, outer, cfg.n_outer, params, s, cfg.workers);
    };

    RmlmcBatch batch0 = batch_for(0);

    // delta = 0: the robust value is the plain expected reward.
    if (delta == 0.0) {
        RunningStat st;
        for (const RmlmcDraw& d : batch0.draws) st.add(d.fine_avg);
        DualEvalResult res;
        res.robust_value = st.mean();
        res.lambda_star = std::numeric_limits<double>::infinity();
        res.std_err = st.std_error();
        res.n_outer = st.count();
        res.iterations = 0;
        return res;
    }

    const double mean_z = batch0.mean_z();
    const double ess_inf = inner.lower_bound.value_or(batch0.min_z());
    const double floor = lambda_floor(mean_z);
    const double bound = std::max(lambda_upper_bound(mean_z, ess_inf, delta), floor);
    auto project = [&](double lam) { return std::clamp(lam, floor, bound); };

    double lambda = cfg.lambda_init ? project(*cfg.lambda_init)
                                    : project(plugin_lambda_argmax(batch0, delta, floor, bound));

    // Stochastic ascent (fresh batch per iteration unless fixed_batch).
    int iterations = 0;
    RmlmcBatch batch = std::move(batch0);
    for (int k = 0; k < cfg.max_iters; ++k) {
        if (k > 0 && !cfg.fixed_batch) batch = batch_for(k);
        const MEstimate m_est =
            estimate_with_retry(inner, outer, batch, lambda, params,
                                derive_seed(cfg.seed, kEnlargeTag + static_cast<std::uint64_t>(k)),
                                cfg.workers);
        const MEstimate d_est = rmlmc_derivative(batch, lambda);
        const double g = -delta - std::log(m_est.m) - lambda * d_est.m / m_est.m;
        const double alpha_k = cfg.alpha0 / (1.0 + static_cast<double>(k) / 50.0);
        // Trust region: one iteration may at most halve or double lambda, so
        // a noisy gradient cannot throw the iterate into the regime where
        // exp(-z/lambda) overflows and the estimate turns meaningless.
        const double next =
            project(std::clamp(lambda + alpha_k * g, 0.5 * lambda, 2.0 * lambda));
        ++iterations;
        const bool converged = std::abs(next - lambda) < cfg.tol_lambda;
        lambda = next;
        if (converged) break;
    }

    // Final plug-in value on a fresh batch (the fixed batch when requested).
    RmlmcBatch final_batch = cfg.fixed_batch ? std::move(batch) : batch_for(iterations + 1);
    const MEstimate final_m =
        estimate_with_retry(inner, outer, final_batch, lambda, params,
                            derive_seed(cfg.seed, kEnlargeTag + 0xFFFFULL), cfg.workers);

    DualEvalResult res;
    res.robust_value = kl_dual_objective(lambda, delta, final_m.m);
    res.lambda_star = lambda;
    res.std_err =
        lambda * std::sqrt(final_m.var / static_cast<double>(final_m.n)) / final_m.m;
    res.n_outer = final_m.n;
    res.iterations = iterations;
    return res;
}

DualEvalResult evaluate_policy_kl(const InnerSimulator& inner, const FinitePrior& prior,
                                  double delta, const RmlmcParams& params,
                                  const AscentConfig& cfg) {
    prior.validate();
    OuterSampler outer = [prior](std::size_t n, std::uint64_t seed) {
        return sample_prior(prior, n, seed);
    };
    return evaluate_policy_kl(inner, outer, delta, params, cfg);
}

DualEvalResult evaluate_policy_kl(const InnerSimulator& inner, const GaussianPrior& prior,
                                  double delta, const RmlmcParams& params,
                                  const AscentConfig& cfg) {
    prior.validate();
    OuterSampler outer = [prior](std::size_t n, std::uint64_t seed) {
        return sample_prior(prior, n, seed);
    };
    return evaluate_policy_kl(inner, outer, delta, params, cfg);
}

std::string to_json_string(const DualEvalResult& result) {
    nlohmann::json j;
    j["robust_value"] = result.robust_value;
    if (std::isfinite(result.lambda_star))
        j["lambda_star"] = result.lambda_star;
    else
        j["lambda_star"] = nullptr;
    j["std_err"] = result.std_err;
    j["n_outer"] = result.n_outer;
    j["iterations"] = result.iterations;
    return j.dump();
}

CressieReadResult cressie_read_dual(const std::vector<double>& z,
                                    const std::vector<double>& weights, double k,
                                    double delta) {
    if (z.empty() || z.size() != weights.size())
        throw std::invalid_argument("cressie_read_dual: z/weights size mismatch");
    if (!(k > 1.0)) throw std::invalid_argument("cressie_read_dual: order k must exceed 1");
    RadiusSpec{delta}.validate();
    double wsum = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0)) throw std::invalid_argument("cressie_read_dual: negative weight");
        wsum += w;
    }
    if (std::abs(wsum - 1.0) > 1e-9)
        throw std::invalid_argument("cressie_read_dual: weights must sum to 1");

    double zmin = std::numeric_limits<double>::infinity();
    double zmax = -std::numeric_limits<double>::infinity();
    double mean = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        mean += weights[i] * z[i];
        if (weights[i] <= 0.0) continue;
        zmin = std::min(zmin, z[i]);
        zmax = std::max(zmax, z[i]);
    }

    const double kstar = k / (k - 1.0);
    const double c = std::pow(1.0 + k * (k - 1.0) * delta, 1.0 / k);

    CressieReadResult out;
    out.c_k = c;
    if (delta == 0.0) {  // ball is the singleton {p}
        out.value = mean;
        out.beta_star = zmax;
        return out;
    }
    if (!(zmax > zmin)) {  // constant z on the support
        out.value = zmin;
        out.beta_star = zmin;
        return out;
    }

    auto objective = [&](double beta) {
        double s = 0.0;
        for (std::size_t i = 0; i < z.size(); ++i) {
            const double d = beta - z[i];
            if (d > 0.0 && weights[i] > 0.0) s += weights[i] * std::pow(d, kstar);
        }
        return beta - c * std::pow(s, 1.0 / kstar);
    };

    // g'(beta) <= 1 - c (beta - zmax)/(beta - zmin) < 0 beyond this point, so
    // the maximizer is inside the bracket for every delta > 0.
    const double span = zmax - zmin;
    const double lo = zmin - span;
    const double hi = (c * zmax - zmin) / std::max(c - 1.0, 1e-14);
    const ScalarOptimum opt =
        golden_section_max(objective, lo, std::max(hi, zmax + span), 1e-10 * std::max(1.0, span),
                           400);
    out.value = opt.value;
    out.beta_star = opt.x;
    return out;
}

}  // namespace drbc
