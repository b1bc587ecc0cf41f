#include "drbc/priors.hpp"

#include <json.hpp>

#include <cmath>
#include <limits>
#include <numeric>

namespace drbc {

namespace {

constexpr double kProbSumTol = 1e-9;

// q_i(a) ~ p_i exp(sign * a * s_i), computed with the max exponent factored
// out.  Returns the normalized pmf.
std::vector<double> tilt_pmf(const std::vector<double>& p, const std::vector<double>& s,
                             double signed_alpha) {
    const std::size_t n = p.size();
    std::vector<double> logw(n);
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        logw[i] = (p[i] > 0.0 ? std::log(p[i]) : -std::numeric_limits<double>::infinity()) +
                  signed_alpha * s[i];
        m = std::max(m, logw[i]);
    }
    std::vector<double> q(n);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        q[i] = std::isfinite(logw[i]) ? std::exp(logw[i] - m) : 0.0;
        z += q[i];
    }
    for (double& qi : q) qi /= z;
    return q;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

double FinitePrior::scalar_atom(std::size_t i) const {
    if (dim() != 1) throw std::invalid_argument("FinitePrior: scalar_atom requires dim() == 1");
    return atoms.at(i)(0);
}

void FinitePrior::validate() const {
    if (atoms.empty()) throw std::invalid_argument("FinitePrior: empty support");
    if (atoms.size() != probs.size())
        throw std::invalid_argument("FinitePrior: atoms/probs size mismatch");
    const Eigen::Index d = atoms.front().size();
    double sum = 0.0;
    for (std::size_t i = 0; i < atoms.size(); ++i) {
        if (atoms[i].size() != d) throw std::invalid_argument("FinitePrior: ragged atom dimensions");
        if (!(probs[i] >= 0.0)) throw std::invalid_argument("FinitePrior: negative probability");
        sum += probs[i];
    }
    if (std::abs(sum - 1.0) > kProbSumTol)
        throw std::invalid_argument("FinitePrior: probabilities sum to " + format_num(sum) +
                                    ", expected 1");
}

FinitePrior FinitePrior::from_scalars(const std::vector<double>& values,
                                      const std::vector<double>& probs) {
    FinitePrior prior;
    prior.atoms.reserve(values.size());
    for (double v : values) {
        Eigen::VectorXd b(1);
        b(0) = v;
        prior.atoms.push_back(b);
    }
    prior.probs = probs;
    prior.validate();
    return prior;
}

void GaussianPrior::validate() const {
    if (mu0.size() == 0) throw std::invalid_argument("GaussianPrior: empty mean");
    if (!(sigma0 > 0.0)) throw std::invalid_argument("GaussianPrior: sigma0 must be > 0");
}

void RadiusSpec::validate() const {
    if (!(delta >= 0.0)) throw std::invalid_argument("RadiusSpec: delta must be >= 0");
}

double kl_finite(const std::vector<double>& q, const std::vector<double>& p) {
    if (q.size() != p.size()) throw SupportMismatch("kl_finite: pmf lengths differ");
    double kl = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
        if (q[i] < 0.0 || p[i] < 0.0)
            throw std::invalid_argument("kl_finite: negative probability");
        if (q[i] == 0.0) continue;
        if (p[i] == 0.0) return std::numeric_limits<double>::infinity();
        kl += q[i] * std::log(q[i] / p[i]);
    }
    return std::max(kl, 0.0);  // guard tiny negative round-off
}

TiltResult tilt_worst_mean(const FinitePrior& prior, const std::vector<double>& scores,
                           double delta, TiltSense sense) {
    prior.validate();
    if (scores.size() != prior.size())
        throw SupportMismatch("tilt_worst_mean: scores length does not match prior support");
    RadiusSpec{delta}.validate();
    const std::vector<double>& p = prior.probs;
    const std::size_t n = p.size();

    // Work in "minimize" orientation: flip scores for sense Max.
    const double flip = (sense == TiltSense::Min) ? 1.0 : -1.0;
    std::vector<double> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = flip * scores[i];

    double smin = std::numeric_limits<double>::infinity();
    double smax = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        if (p[i] <= 0.0) continue;  // zero-probability atoms never enter the tilt
        smin = std::min(smin, s[i]);
        smax = std::max(smax, s[i]);
    }
    if (!(smax > smin)) throw DegenerateScores("tilt_worst_mean: all scores equal on the support");

    // Saturation: as alpha -> inf the tilt converges to p restricted to the
    // minimal-score atoms, with KL = log(1 / P(minimal set)).
    double p_min_set = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        if (p[i] > 0.0 && s[i] == smin) p_min_set += p[i];
    const double kl_limit = std::log(1.0 / p_min_set);

    TiltResult out;
    if (delta >= kl_limit) {
        out.q.assign(n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            if (p[i] > 0.0 && s[i] == smin) out.q[i] = p[i] / p_min_set;
        out.alpha = std::numeric_limits<double>::infinity();
        out.tilted_mean = dot(out.q, scores);
        out.kl = kl_limit;
        out.saturated = true;
        return out;
    }
    if (delta == 0.0) {
        out.q = p;
        out.alpha = 0.0;
        out.tilted_mean = dot(p, scores);
        out.kl = 0.0;
        return out;
    }

    // KL(q(a) || p) is continuous and nondecreasing in a >= 0 (derivative
    // a * Var_q(s) >= 0), running from 0 to kl_limit: bracket then bisect.
    auto kl_of = [&](double a) {
        const std::vector<double> q = tilt_pmf(p, s, -a);
        return kl_finite(q, p);
    };
    double hi = 1.0;
    while (kl_of(hi) < delta) {
        hi *= 2.0;
        if (hi > 1e12)
            throw NoConvergence("tilt_worst_mean: failed to bracket the KL radius");
    }
    const double alpha =
        bisect_root([&](double a) { return kl_of(a) - delta; }, 0.0, hi, 1e-10, 200);

    out.q = tilt_pmf(p, s, -alpha);
    out.alpha = alpha;
    out.tilted_mean = dot(out.q, scores);
    out.kl = kl_finite(out.q, p);
    return out;
}

InnerInfResult primal_inner_inf(const FinitePrior& prior, const std::vector<double>& z,
                                double delta) {
    prior.validate();
    if (z.size() != prior.size())
        throw SupportMismatch("primal_inner_inf: z length does not match prior support");
    RadiusSpec{delta}.validate();

    // Degenerate case: constant z on the support; the ball cannot change it.
    double zmin = std::numeric_limits<double>::infinity();
    double zmax = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < z.size(); ++i) {
        if (prior.probs[i] <= 0.0) continue;
        zmin = std::min(zmin, z[i]);
        zmax = std::max(zmax, z[i]);
    }
    if (!(zmax > zmin) || delta == 0.0) {
        InnerInfResult r;
        r.q = prior.probs;
        r.value = dot(prior.probs, z);
        return r;
    }
    const TiltResult t = tilt_worst_mean(prior, z, delta, TiltSense::Min);
    InnerInfResult r;
    r.q = t.q;
    r.value = t.tilted_mean;
    return r;
}

std::vector<Eigen::VectorXd> sample_prior(const FinitePrior& prior, std::size_t n,
                                          std::uint64_t seed) {
    prior.validate();
    std::vector<double> cdf(prior.size());
    std::partial_sum(prior.probs.begin(), prior.probs.end(), cdf.begin());
    cdf.back() = 1.0;  // absorb round-off
    auto rng = make_rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<Eigen::VectorXd> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double u = unif(rng);
        const std::size_t idx = static_cast<std::size_t>(
            std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
        out.push_back(prior.atoms[std::min(idx, prior.size() - 1)]);
    }
    return out;
}

std::vector<Eigen::VectorXd> sample_prior(const GaussianPrior& prior, std::size_t n,
                                          std::uint64_t seed) {
    prior.validate();
    auto rng = make_rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<Eigen::VectorXd> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Eigen::VectorXd x = prior.mu0;
        for (Eigen::Index j = 0; j < x.size(); ++j) x(j) += prior.sigma0 * normal(rng);
        out.push_back(std::move(x));
    }
    return out;
}

namespace {

nlohmann::json atom_to_json(const Eigen::VectorXd& b) {
    if (b.size() == 1) return nlohmann::json(b(0));
    nlohmann::json arr = nlohmann::json::array();
    for (Eigen::Index j = 0; j < b.size(); ++j) arr.push_back(b(j));
    return arr;
}

Eigen::VectorXd atom_from_json(const nlohmann::json& j) {
    if (j.is_number()) {
        Eigen::VectorXd b(1);
        b(0) = j.get<double>();
        return b;
    }
    if (j.is_array()) {
        Eigen::VectorXd b(static_cast<Eigen::Index>(j.size()));
        for (std::size_t k = 0; k < j.size(); ++k) b(static_cast<Eigen::Index>(k)) = j[k].get<double>();
        return b;
    }
    throw std::invalid_argument("prior JSON: atom value must be a number or array");
}

}  // namespace

std::string to_json_string(const FinitePrior& prior) {
    prior.validate();
    nlohmann::json j;
    j["atoms"] = nlohmann::json::array();
    for (std::size_t i = 0; i < prior.size(); ++i)
        j["atoms"].push_back({{"b", atom_to_json(prior.atoms[i])}, {"p", prior.probs[i]}});
    return j.dump();
}

std::string to_json_string(const GaussianPrior& prior) {
    prior.validate();
    nlohmann::json j;
    j["gaussian"] = {{"mu0", atom_to_json(prior.mu0)}, {"sigma0", prior.sigma0}};
    return j.dump();
}

FinitePrior finite_prior_from_json(const std::string& text) {
    const nlohmann::json j = nlohmann::json::parse(text);
    if (!j.contains("atoms") || !j["atoms"].is_array())
        throw std::invalid_argument("prior JSON: expected top-level \"atoms\" array");
    FinitePrior prior;
    for (const auto& entry : j["atoms"]) {
        prior.atoms.push_back(atom_from_json(entry.at("b")));
        prior.probs.push_back(entry.at("p").get<double>());
    }
    prior.validate();
    return prior;
}

GaussianPrior gaussian_prior_from_json(const std::string& text) {
    const nlohmann::json j = nlohmann::json::parse(text);
    if (!j.contains("gaussian"))
        throw std::invalid_argument("prior JSON: expected top-level \"gaussian\" object");
    GaussianPrior prior;
    prior.mu0 = atom_from_json(j["gaussian"].at("mu0"));
    prior.sigma0 = j["gaussian"].at("sigma0").get<double>();
    prior.validate();
    return prior;
}

}  // namespace drbc
