#include "drbc/experiments.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <set>
#include <sstream>
#include <stdexcept>

#include "drbc/common.hpp"
#include "drbc/dual.hpp"
#include "drbc/lq.hpp"
#include "drbc/merton.hpp"
#include "drbc/priors.hpp"
#include "drbc/sde.hpp"

namespace drbc {
namespace {

// ----------------------------------------------------------------------------
// Seed derivation tags.  Every runner derives all of its randomness from
// config.seed through derive_seed chains keyed on these constants plus loop
// indices, so reports are reproducible and independent of the worker count
// and of execution order.
// ----------------------------------------------------------------------------
constexpr std::uint64_t kTagAscent = 101;  // rate_table: lambda ascent batches
constexpr std::uint64_t kTagReps = 202;    // rate_table: replication batches
constexpr std::uint64_t kTagNoise = 301;   // gap / settings: evaluation noise
constexpr std::uint64_t kTagDrifts = 302;  // setting1: market drift draws

// ----------------------------------------------------------------------------
// String helpers
// ----------------------------------------------------------------------------
std::string trim(const std::string& s) {
    std::size_t a = 0;
    std::size_t b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

std::string to_lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, sep)) out.push_back(item);
    return out;
}

[[noreturn]] void config_error(const std::string& message) {
    throw std::invalid_argument("config: " + message);
}

double parse_double_value(const std::string& key, const std::string& raw) {
    const std::string v = trim(raw);
    if (v.empty()) config_error("key '" + key + "': expected a number, got an empty value");
    char* end = nullptr;
    const double x = std::strtod(v.c_str(), &end);
    if (end != v.c_str() + v.size()) {
        config_error("key '" + key + "': expected a number, got '" + v + "'");
    }
    return x;
}

long long parse_int_value(const std::string& key, const std::string& raw) {
    const std::string v = trim(raw);
    if (v.empty()) config_error("key '" + key + "': expected an integer, got an empty value");
    char* end = nullptr;
    const long long x = std::strtoll(v.c_str(), &end, 10);
    if (end != v.c_str() + v.size()) {
        config_error("key '" + key + "': expected an integer, got '" + v + "'");
    }
    return x;
}

std::uint64_t parse_u64_value(const std::string& key, const std::string& raw) {
    const std::string v = trim(raw);
    if (v.empty() || v.front() == '-') {
        config_error("key '" + key + "': expected a nonnegative integer, got '" + trim(raw) + "'");
    }
    char* end = nullptr;
    const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
    if (end != v.c_str() + v.size()) {
        config_error("key '" + key + "': expected a nonnegative integer, got '" + v + "'");
    }
    return static_cast<std::uint64_t>(x);
}

bool parse_bool_value(const std::string& key, const std::string& raw) {
    const std::string v = to_lower(trim(raw));
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    config_error("key '" + key + "': expected true/false, got '" + trim(raw) + "'");
}

// ----------------------------------------------------------------------------
// Key-value view with typed getters, default resolution, and strict
// unknown-key detection.  Every getter registers its key as allowed, whether
// or not it is present, so finish() can both reject stray keys and tell the
// user what would have been accepted.
// ----------------------------------------------------------------------------
class ConfigMap {
public:
    explicit ConfigMap(std::map<std::string, std::string> kv) : kv_(std::move(kv)) {}

    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    double number(const std::string& key, double dflt) {
        allowed_.insert(key);
        if (!has(key)) return dflt;
        return parse_double_value(key, kv_.at(key));
    }
    int integer(const std::string& key, int dflt) {
        allowed_.insert(key);
        if (!has(key)) return dflt;
        const long long x = parse_int_value(key, kv_.at(key));
        if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
            config_error("key '" + key + "': value out of range");
        }
        return static_cast<int>(x);
    }
    std::size_t size_value(const std::string& key, std::size_t dflt) {
        allowed_.insert(key);
        if (!has(key)) return dflt;
        return static_cast<std::size_t>(parse_u64_value(key, kv_.at(key)));
    }
    std::uint64_t u64(const std::string& key, std::uint64_t dflt) {
        allowed_.insert(key);
        if (!has(key)) return dflt;
        return parse_u64_value(key, kv_.at(key));
    }
    bool boolean(const std::string& key, bool dflt) {
        allowed_.insert(key);
        if (!has(key)) return dflt;
        return parse_bool_value(key, kv_.at(key));
    }
    std::string text(const std::string& key, const std::string& dflt) {
        allowed_.insert(key);
        if (!has(key)) return dflt;
        return trim(kv_.at(key));
    }
    std::vector<double> numbers(const std::string& key, std::vector<double> dflt) {
        allowed_.insert(key);
        if (!has(key)) return dflt;
        std::vector<double> out;
        for (const std::string& item : split(kv_.at(key), ',')) {
            out.push_back(parse_double_value(key, item));
        }
        if (out.empty()) config_error("key '" + key + "': expected a comma-separated list");
        return out;
    }
    std::vector<std::size_t> sizes(const std::string& key, std::vector<std::size_t> dflt) {
        allowed_.insert(key);
        if (!has(key)) return dflt;
        std::vector<std::size_t> out;
        for (const std::string& item : split(kv_.at(key), ',')) {
            out.push_back(static_cast<std::size_t>(parse_u64_value(key, item)));
        }
        if (out.empty()) config_error("key '" + key + "': expected a comma-separated list");
        return out;
    }

    // Rejects any key no getter asked about, for the selected experiment.
    void finish(const std::string& experiment) const {
        std::vector<std::string> unknown;
        for (const auto& [key, value] : kv_) {
            (void)value;
            if (allowed_.count(key) == 0) unknown.push_back(key);
        }
        if (unknown.empty()) return;
        std::string msg = "unknown key";
        if (unknown.size() > 1) msg += "s";
        msg += " for experiment '" + experiment + "': ";
        for (std::size_t i = 0; i < unknown.size(); ++i) {
            if (i) msg += ", ";
            msg += unknown[i];
        }
        msg += "; allowed keys: ";
        bool first = true;
        for (const std::string& key : allowed_) {
            if (!first) msg += ", ";
            msg += key;
            first = false;
        }
        config_error(msg);
    }

private:
    std::map<std::string, std::string> kv_;
    std::set<std::string> allowed_;
};

MertonBlock read_market(ConfigMap& m, const MertonBlock& dflt) {
    MertonBlock out;
    out.alpha = m.number("alpha", dflt.alpha);
    out.sigma = m.number("sigma", dflt.sigma);
    out.rate = m.number("rate", dflt.rate);
    return out;
}

void read_learn_block(ConfigMap& m, double& alpha, double& h, double& tol, int& max_iters) {
    alpha = m.number("learn_alpha", alpha);
    h = m.number("learn_h", h);
    tol = m.number("learn_tol", tol);
    max_iters = m.integer("learn_max_iters", max_iters);
}

// ----------------------------------------------------------------------------
// Validation helpers
// ----------------------------------------------------------------------------
void check_market_block(const MertonBlock& market) {
    if (!(market.alpha > 0.0) || !(market.alpha < 1.0)) {
        config_error("alpha must lie strictly in (0, 1) (got " + format_num(market.alpha) +
                     "); the power utility x^alpha/alpha needs it");
    }
    if (!(market.sigma > 0.0)) {
        config_error("sigma must be > 0 (got " + format_num(market.sigma) + ")");
    }
}

void check_prior_pair(const std::string& probs_key, const std::vector<double>& values,
                      const std::vector<double>& probs) {
    if (values.empty()) config_error("prior_values must not be empty");
    if (values.size() != probs.size()) {
        config_error(probs_key + " must have one entry per prior_values entry (got " +
                     std::to_string(probs.size()) + " for " + std::to_string(values.size()) +
                     " values)");
    }
    double sum = 0.0;
    for (double p : probs) {
        if (!(p > 0.0)) {
            config_error(probs_key + " entries must be > 0 (got " + format_num(p) + ")");
        }
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
        config_error(probs_key + " must sum to 1 (got " + format_num(sum) + ")");
    }
}

void check_positive(const std::string& key, double value) {
    if (!(value > 0.0)) {
        config_error(key + " must be > 0 (got " + format_num(value) + ")");
    }
}

void check_at_least(const std::string& key, long long value, long long bound) {
    if (value < bound) {
        config_error(key + " must be >= " + std::to_string(bound) + " (got " +
                     std::to_string(value) + ")");
    }
}

void check_delta_grid(const std::vector<double>& grid, bool strictly_positive,
                      const std::string& why) {
    if (grid.empty()) config_error("delta_grid must not be empty");
    for (double d : grid) {
        if (strictly_positive ? !(d > 0.0) : !(d >= 0.0)) {
            config_error("delta_grid entries must be " +
                         std::string(strictly_positive ? "> 0" : ">= 0") + " (got " +
                         format_num(d) + "); " + why);
        }
    }
}

void check_learn_block(double alpha, double h, double tol, int max_iters) {
    check_positive("learn_alpha", alpha);
    check_positive("learn_h", h);
    check_positive("learn_tol", tol);
    check_at_least("learn_max_iters", max_iters, 1);
}

// ----------------------------------------------------------------------------
// Report helpers
// ----------------------------------------------------------------------------
ReportRow make_row(const ExperimentConfig& config, std::string method, std::string delta,
                   std::string n, std::string metric, double mean, double std_dev,
                   bool std_defined, std::size_t replications) {
    ReportRow row;
    row.experiment = to_string(config.experiment);
    row.method = std::move(method);
    row.delta = std::move(delta);
    row.n = std::move(n);
    row.metric = std::move(metric);
    row.mean = mean;
    row.std_dev = std_dev;
    row.std_defined = std_defined;
    row.replications = replications;
    return row;
}

PropertyCheck make_check(std::string name, bool pass, std::string detail) {
    PropertyCheck c;
    c.name = std::move(name);
    c.pass = pass;
    c.detail = std::move(detail);
    return c;
}

struct SampleStats {
    double mean = 0.0;
    double stddev = 0.0;
    double std_error = 0.0;
    std::size_t n = 0;
};

SampleStats stats_of(const std::vector<double>& xs) {
    RunningStat st;
    for (double x : xs) st.add(x);
    return SampleStats{st.mean(), st.stddev(), st.std_error(), st.count()};
}

// Pooled standard error of a difference of two independent sample means.
double pooled_se(const SampleStats& a, const SampleStats& b) {
    return std::sqrt(a.std_error * a.std_error + b.std_error * b.std_error);
}

// ----------------------------------------------------------------------------
// Merton helpers shared by the portfolio runners
// ----------------------------------------------------------------------------
MertonMarket to_market(const MertonBlock& block) {
    MertonMarket market;
    market.r = block.rate;
    market.sigma = block.sigma;
    market.alpha = block.alpha;
    market.T = 1.0;
    market.x0 = 1.0;
    return market;
}

double terminal_utility(double x, const MertonMarket& market) {
    return std::pow(x, market.alpha) / market.alpha;
}

// Re-weighted prior produced by the penalized learning loop; the batch
// experiments consume the iterate the update rule converged to.
FinitePrior learned_prior(const FinitePrior& prior, const MertonMarket& market, double delta,
                          double lambda, double alpha_k, double h, double tol, int max_iters,
                          const QuadratureRule& quad) {
    LearnSchedule schedule;
    schedule.h = h;
    schedule.alpha_k = alpha_k;
    schedule.tol = tol;
    schedule.max_iters = max_iters;
    schedule.allow_partial = true;
    return drbc_finite_learn(prior, market, delta, lambda, schedule, quad).final_q;
}

// Mean utilities of one policy over a common noise block, one constant drift
// per path; exploded / ruined paths score zero utility.
std::vector<double> policy_utilities(const TimeGrid& grid, const MertonMarket& market,
                                     const FractionFn& policy, const std::vector<double>& drifts,
                                     const NoiseBlock& noise, int workers) {
    std::vector<double> utils(noise.paths(), 0.0);
    parallel_for(noise.paths(), workers, [&](std::size_t p) {
        double terminal = 0.0;
        try {
            const WealthPath path = simulate_wealth(grid, market.r, market.sigma, drifts[p],
                                                    market.x0, policy, noise.path(p));
            terminal = path.x.back();
        } catch (const NonFinitePath&) {
            terminal = 0.0;
        }
        utils[p] = terminal_utility(terminal, market);
    });
    return utils;
}

// ----------------------------------------------------------------------------
// Independent primal oracles for the duality check.  Both solve the primal
// minimization over the ball directly (no shared code with the dual side).
// ----------------------------------------------------------------------------

// Worst-case mean over the KL ball via exponential tilting: the minimizing
// density is q(a)_i proportional to p_i exp(-a z_i) with KL(q(a) || p)
// increasing in a; bisect on the divergence.  When even the tilt limit
// (all mass on the smallest z) stays inside the ball, the value is min z.
double kl_primal_worst_mean(const std::vector<double>& p, const std::vector<double>& z,
                            double delta) {
    const std::size_t n = p.size();
    double zmin = z[0];
    for (double v : z) zmin = std::min(zmin, v);
    double plain = 0.0;
    for (std::size_t i = 0; i < n; ++i) plain += p[i] * z[i];
    if (delta == 0.0) return plain;

    // KL of the tilt limit: mass concentrates on the argmin support.
    double min_mass = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (z[i] == zmin) min_mass += p[i];
    }
    if (-std::log(min_mass) <= delta) return zmin;

    struct Tilt {
        double kl = 0.0;
        double mean = 0.0;
    };
    auto tilt = [&](double a) {
        std::vector<double> logits(n);
        for (std::size_t i = 0; i < n; ++i) logits[i] = std::log(p[i]) - a * z[i];
        const double lse = logsumexp(logits);
        Tilt out;
        for (std::size_t i = 0; i < n; ++i) {
            out.mean += std::exp(logits[i] - lse) * z[i];
        }
        out.kl = -a * out.mean - lse;
        return out;
    };

    double hi = 1.0;
    while (tilt(hi).kl < delta) {
        hi *= 2.0;
        if (hi > 1e12) return zmin;  // numerically saturated
    }
    double lo = 0.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (tilt(mid).kl < delta ? lo : hi) = mid;
    }
    return tilt(0.5 * (lo + hi)).mean;
}

// Worst-case mean over the order-2 (chi-squared) ball via the KKT system:
// q_i = p_i max(0, 1 + (eta - z_i)/lam) with eta fixed by unit mass and lam
// by the active divergence constraint; both resolved by bisection.
double chi2_primal_worst_mean(const std::vector<double>& p, const std::vector<double>& z,
                              double delta) {
    const std::size_t n = p.size();
    double zmin = z[0];
    double zmax = z[0];
    for (double v : z) {
        zmin = std::min(zmin, v);
        zmax = std::max(zmax, v);
    }
    double plain = 0.0;
    for (std::size_t i = 0; i < n; ++i) plain += p[i] * z[i];
    if (delta == 0.0 || zmax == zmin) return delta == 0.0 ? plain : zmin;

    double min_mass = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (z[i] == zmin) min_mass += p[i];
    }
    // Divergence of the point mass on the argmin support; phi(t) = (t-1)^2/2.
    const double saturation = 0.5 * (1.0 - min_mass) / min_mass;
    if (saturation <= delta) return zmin;

    auto ratios_for = [&](double lam) {
        // eta such that sum_i p_i max(0, 1 + (eta - z_i)/lam) = 1.
        double eta_lo = zmin - lam;  // all ratios zero
        double eta_hi = zmax;        // every ratio >= 1
        for (int it = 0; it < 200; ++it) {
            const double eta = 0.5 * (eta_lo + eta_hi);
            double mass = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                mass += p[i] * std::max(0.0, 1.0 + (eta - z[i]) / lam);
            }
            (mass < 1.0 ? eta_lo : eta_hi) = eta;
        }
        const double eta = 0.5 * (eta_lo + eta_hi);
        std::vector<double> ratio(n);
        for (std::size_t i = 0; i < n; ++i) {
            ratio[i] = std::max(0.0, 1.0 + (eta - z[i]) / lam);
        }
        return ratio;
    };
    auto divergence_of = [&](const std::vector<double>& ratio) {
        double div = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            div += 0.5 * p[i] * (ratio[i] - 1.0) * (ratio[i] - 1.0);
        }
        return div;
    };

    // Divergence decreases in lam; bracket an interval with div >= delta at
    // the bottom and div <= delta at the top.
    double lam_lo = 1e-12;
    double lam_hi = 1.0;
    while (divergence_of(ratios_for(lam_hi)) > delta) {
        lam_hi *= 2.0;
        if (lam_hi > 1e14) break;
    }
    for (int it = 0; it < 200; ++it) {
        const double lam = 0.5 * (lam_lo + lam_hi);
        (divergence_of(ratios_for(lam)) > delta ? lam_lo : lam_hi) = lam;
    }
    const std::vector<double> ratio = ratios_for(0.5 * (lam_lo + lam_hi));
    double value = 0.0;
    for (std::size_t i = 0; i < n; ++i) value += p[i] * ratio[i] * z[i];
    return value;
}

}  // namespace

// ----------------------------------------------------------------------------
// Experiment names
// ----------------------------------------------------------------------------
std::string to_string(ExperimentKind kind) {
    switch (kind) {
        case ExperimentKind::RateTable: return "rate_table";
        case ExperimentKind::GapVsDelta: return "gap_vs_delta";
        case ExperimentKind::Setting1: return "setting1";
        case ExperimentKind::Setting2: return "setting2";
        case ExperimentKind::LqCompare: return "lq_compare";
        case ExperimentKind::DualityCheck: return "duality_check";
    }
    throw std::logic_error("to_string: unhandled experiment kind");
}

ExperimentKind experiment_kind_from(const std::string& name) {
    const std::string v = to_lower(trim(name));
    if (v == "rate_table") return ExperimentKind::RateTable;
    if (v == "gap_vs_delta") return ExperimentKind::GapVsDelta;
    if (v == "setting1") return ExperimentKind::Setting1;
    if (v == "setting2") return ExperimentKind::Setting2;
    if (v == "lq_compare") return ExperimentKind::LqCompare;
    if (v == "duality_check") return ExperimentKind::DualityCheck;
    config_error("unknown experiment '" + name +
                 "'; valid names: rate_table, gap_vs_delta, setting1, setting2, "
                 "lq_compare, duality_check");
}

// ----------------------------------------------------------------------------
// Parsing
// ----------------------------------------------------------------------------
ExperimentConfig parse_config_text(const std::string& text,
                                   const std::map<std::string, std::string>& overrides) {
    std::map<std::string, std::string> kv;
    std::map<std::string, int> first_line;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            config_error("line " + std::to_string(line_no) + ": expected key = value, got '" +
                         line + "'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            config_error("line " + std::to_string(line_no) + ": empty key before '='");
        }
        if (kv.count(key)) {
            config_error("duplicate key '" + key + "' (lines " +
                         std::to_string(first_line[key]) + " and " + std::to_string(line_no) +
                         ")");
        }
        kv[key] = value;
        first_line[key] = line_no;
    }

    // Command-line overrides win, with one guard: a contradictory experiment
    // selection is an error rather than a silent preference.
    const auto file_exp = kv.find("experiment");
    const auto cli_exp = overrides.find("experiment");
    if (file_exp != kv.end() && cli_exp != overrides.end() &&
        trim(file_exp->second) != trim(cli_exp->second)) {
        config_error("the file selects experiment '" + trim(file_exp->second) +
                     "' but the command line selects '" + trim(cli_exp->second) +
                     "'; drop one of them");
    }
    for (const auto& [key, value] : overrides) kv[key] = value;

    if (kv.count("experiment") == 0) {
        config_error("missing key 'experiment'; valid names: rate_table, gap_vs_delta, "
                     "setting1, setting2, lq_compare, duality_check");
    }

    ConfigMap m(std::move(kv));
    ExperimentConfig config;
    config.experiment = experiment_kind_from(m.text("experiment", ""));
    config.full_scale = m.boolean("full", false);
    const bool full = config.full_scale;
    config.seed = m.u64("seed", 0);
    config.workers = m.integer("workers", 1);
    config.out_dir = m.text("out", ".");

    auto pick_size = [&](std::size_t desk, std::size_t fullv) { return full ? fullv : desk; };
    auto pick_int = [&](int desk, int fullv) { return full ? fullv : desk; };

    switch (config.experiment) {
        case ExperimentKind::RateTable: {
            config.replications = m.size_value("replications", 100);
            RateTableParams& p = config.rate;
            p.market = read_market(m, p.market);
            p.prior_values = m.numbers("prior_values", p.prior_values);
            p.prior_probs = m.numbers("prior_probs", p.prior_probs);
            p.delta_grid = m.numbers("delta_grid", full
                                                       ? std::vector<double>{0.01, 0.05, 0.1}
                                                       : std::vector<double>{0.01});
            p.n_grid = m.sizes("n_grid", full ? std::vector<std::size_t>{100, 1000, 10000}
                                              : std::vector<std::size_t>{100, 10000});
            p.steps = m.integer("steps", pick_int(250, 1000));
            p.paths_per_sample = m.integer("paths_per_sample", pick_int(1, 100));
            p.r_geo = m.number("r_geo", p.r_geo);
            p.n0 = m.integer("n0", p.n0);
            p.ascent_n = m.size_value("ascent_n", p.ascent_n);
            p.ascent_iters = m.integer("ascent_iters", p.ascent_iters);
            p.ascent_alpha0 = m.number("ascent_alpha0", p.ascent_alpha0);
            p.learn_lambda = m.number("learn_lambda", p.learn_lambda);
            read_learn_block(m, p.learn_alpha, p.learn_h, p.learn_tol, p.learn_max_iters);
            p.table_nt = m.integer("table_nt", p.table_nt);
            p.table_ny = m.integer("table_ny", p.table_ny);
            p.y_lo = m.number("y_lo", p.y_lo);
            p.y_hi = m.number("y_hi", p.y_hi);
            break;
        }
        case ExperimentKind::GapVsDelta: {
            config.replications = m.size_value("replications", pick_size(2000, 10000));
            GapParams& p = config.gap;
            p.market = read_market(m, p.market);
            p.prior_values = m.numbers("prior_values", p.prior_values);
            p.prior_probs = m.numbers("prior_probs", p.prior_probs);
            p.delta_grid = m.numbers("delta_grid", p.delta_grid);
            p.steps = m.integer("steps", pick_int(250, 1000));
            p.drift_b0 = m.number("drift_b0", p.drift_b0);
            p.drift_kappa = m.number("drift_kappa", p.drift_kappa);
            p.lambda_scale = m.number("lambda_scale", p.lambda_scale);
            read_learn_block(m, p.learn_alpha, p.learn_h, p.learn_tol, p.learn_max_iters);
            break;
        }
        case ExperimentKind::Setting1:
        case ExperimentKind::Setting2: {
            config.replications = m.size_value("replications", pick_size(200, 2000));
            SettingsParams& p = config.settings;
            p.market = read_market(m, p.market);
            p.prior_values = m.numbers("prior_values", p.prior_values);
            p.correct_probs = m.numbers("correct_probs", p.correct_probs);
            p.incorrect_probs = m.numbers("incorrect_probs", p.incorrect_probs);
            p.delta_grid = m.numbers("delta_grid", p.delta_grid);
            p.truth_atom = m.number("truth_atom", p.truth_atom);
            p.steps = m.integer("steps", p.steps);
            p.lambda_scale = m.number("lambda_scale", p.lambda_scale);
            read_learn_block(m, p.learn_alpha, p.learn_h, p.learn_tol, p.learn_max_iters);
            break;
        }
        case ExperimentKind::LqCompare: {
            config.replications = m.size_value("replications", pick_size(30, 100));
            LqParams& p = config.lq;
            p.d = m.integer("d", pick_int(4, 10));
            p.k_inputs = m.integer("k_inputs", pick_int(2, 5));
            p.m_params = m.integer("m_params", pick_int(4, 10));
            p.steps = m.integer("steps", p.steps);
            p.horizon = m.number("horizon", p.horizon);
            p.sigma_scale = m.number("sigma_scale", p.sigma_scale);
            p.q_scale = m.number("q_scale", p.q_scale);
            p.qt_scale = m.number("qt_scale", p.qt_scale);
            p.r_scale = m.number("r_scale", p.r_scale);
            p.family_seed = m.u64("family_seed", p.family_seed);
            p.theta_star_std = m.number("theta_star_std", p.theta_star_std);
            p.prior_std = m.number("prior_std", p.prior_std);
            p.explore_scale = m.number("explore_scale", p.explore_scale);
            p.ridge = m.number("ridge", p.ridge);
            p.delta_grid = m.numbers("delta_grid", p.delta_grid);
            p.b_eval = m.size_value("b_eval", pick_size(128, 512));
            p.n_theta = m.integer("n_theta", pick_int(16, 32));
            p.b_traj = m.integer("b_traj", pick_int(32, 64));
            p.s_in = m.integer("s_in", pick_int(120, 200));
            p.eta = m.number("eta", p.eta);
            p.c_lam = m.number("c_lam", p.c_lam);
            p.u_clip = m.number("u_clip", p.u_clip);
            p.spsa_c = m.number("spsa_c", p.spsa_c);
            p.grad_clip = m.number("grad_clip", p.grad_clip);
            break;
        }
        case ExperimentKind::DualityCheck: {
            config.replications = m.size_value("replications", pick_size(1000, 5000));
            DualityParams& p = config.duality;
            p.atoms_min = m.integer("atoms_min", p.atoms_min);
            p.atoms_max = m.integer("atoms_max", p.atoms_max);
            p.z_lo = m.number("z_lo", p.z_lo);
            p.z_hi = m.number("z_hi", p.z_hi);
            p.delta_lo = m.number("delta_lo", p.delta_lo);
            p.delta_hi = m.number("delta_hi", p.delta_hi);
            p.cr_order = m.number("cr_order", p.cr_order);
            p.zero_radius_every = m.integer("zero_radius_every", p.zero_radius_every);
            break;
        }
    }

    m.finish(to_string(config.experiment));
    validate_config(config);
    return config;
}

ExperimentConfig parse_config_file(const std::string& path,
                                   const std::map<std::string, std::string>& overrides) {
    std::ifstream in(path);
    if (!in) config_error("cannot open '" + path + "'");
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_config_text(buffer.str(), overrides);
}

void validate_config(const ExperimentConfig& config) {
    if (config.replications < 1) {
        config_error("replications must be >= 1 (got " + std::to_string(config.replications) +
                     ")");
    }
    if (config.workers < 1) {
        config_error("workers must be >= 1 (got " + std::to_string(config.workers) + ")");
    }
    if (config.out_dir.empty()) config_error("out must not be empty");

    switch (config.experiment) {
        case ExperimentKind::RateTable: {
            const RateTableParams& p = config.rate;
            check_market_block(p.market);
            check_prior_pair("prior_probs", p.prior_values, p.prior_probs);
            check_delta_grid(p.delta_grid, false, "radii are divergence-ball sizes");
            if (p.n_grid.empty()) config_error("n_grid must not be empty");
            for (std::size_t n : p.n_grid) {
                if (n < 2) {
                    config_error("n_grid entries must be >= 2 (got " + std::to_string(n) +
                                 "); the replication std needs at least two outer draws");
                }
            }
            check_at_least("steps", p.steps, 1);
            check_at_least("paths_per_sample", p.paths_per_sample, 1);
            if (!(p.r_geo > 0.5) || !(p.r_geo < 0.75)) {
                config_error("r_geo must lie strictly in (1/2, 3/4) (got " +
                             format_num(p.r_geo) +
                             "); the randomized level law needs finite variance and finite "
                             "expected work");
            }
            check_at_least("n0", p.n0, 0);
            check_at_least("ascent_n", static_cast<long long>(p.ascent_n), 2);
            check_at_least("ascent_iters", p.ascent_iters, 1);
            check_positive("ascent_alpha0", p.ascent_alpha0);
            check_positive("learn_lambda", p.learn_lambda);
            check_learn_block(p.learn_alpha, p.learn_h, p.learn_tol, p.learn_max_iters);
            check_at_least("table_nt", p.table_nt, 2);
            check_at_least("table_ny", p.table_ny, 2);
            if (!(p.y_lo < p.y_hi)) {
                config_error("y_lo must be < y_hi (got " + format_num(p.y_lo) + " and " +
                             format_num(p.y_hi) + ")");
            }
            break;
        }
        case ExperimentKind::GapVsDelta: {
            const GapParams& p = config.gap;
            check_market_block(p.market);
            check_prior_pair("prior_probs", p.prior_values, p.prior_probs);
            check_delta_grid(p.delta_grid, false,
                             "radius zero is the no-robustness reference point");
            check_at_least("steps", p.steps, 1);
            check_positive("lambda_scale", p.lambda_scale);
            check_learn_block(p.learn_alpha, p.learn_h, p.learn_tol, p.learn_max_iters);
            break;
        }
        case ExperimentKind::Setting1:
        case ExperimentKind::Setting2: {
            const SettingsParams& p = config.settings;
            check_market_block(p.market);
            check_prior_pair("correct_probs", p.prior_values, p.correct_probs);
            check_prior_pair("incorrect_probs", p.prior_values, p.incorrect_probs);
            check_delta_grid(p.delta_grid, true,
                             "the penalty lambda = lambda_scale/sqrt(delta) must be finite");
            check_at_least("steps", p.steps, 1);
            check_positive("lambda_scale", p.lambda_scale);
            check_learn_block(p.learn_alpha, p.learn_h, p.learn_tol, p.learn_max_iters);
            break;
        }
        case ExperimentKind::LqCompare: {
            const LqParams& p = config.lq;
            check_at_least("d", p.d, 1);
            check_at_least("k_inputs", p.k_inputs, 1);
            check_at_least("m_params", p.m_params, 1);
            check_at_least("steps", p.steps, 1);
            check_positive("horizon", p.horizon);
            check_positive("sigma_scale", p.sigma_scale);
            if (p.q_scale < 0.0) config_error("q_scale must be >= 0");
            if (p.qt_scale < 0.0) config_error("qt_scale must be >= 0");
            check_positive("r_scale", p.r_scale);
            if (p.theta_star_std < 0.0) config_error("theta_star_std must be >= 0");
            check_positive("prior_std", p.prior_std);
            if (p.explore_scale < 0.0) config_error("explore_scale must be >= 0");
            if (p.ridge < 0.0) config_error("ridge must be >= 0");
            check_delta_grid(p.delta_grid, true,
                             "the penalty lambda = c_lam/sqrt(delta) must be finite");
            check_at_least("b_eval", static_cast<long long>(p.b_eval), 1);
            check_at_least("n_theta", p.n_theta, 1);
            check_at_least("b_traj", p.b_traj, 1);
            check_at_least("s_in", p.s_in, 0);
            check_positive("eta", p.eta);
            check_positive("c_lam", p.c_lam);
            check_positive("u_clip", p.u_clip);
            check_positive("spsa_c", p.spsa_c);
            check_positive("grad_clip", p.grad_clip);
            break;
        }
        case ExperimentKind::DualityCheck: {
            const DualityParams& p = config.duality;
            check_at_least("atoms_min", p.atoms_min, 2);
            if (p.atoms_max < p.atoms_min) {
                config_error("atoms_max must be >= atoms_min (got " +
                             std::to_string(p.atoms_max) + " < " + std::to_string(p.atoms_min) +
                             ")");
            }
            if (!(p.z_lo < p.z_hi)) {
                config_error("z_lo must be < z_hi (got " + format_num(p.z_lo) + " and " +
                             format_num(p.z_hi) + ")");
            }
            check_positive("delta_lo", p.delta_lo);
            if (!(p.delta_hi >= p.delta_lo)) {
                config_error("delta_hi must be >= delta_lo (got " + format_num(p.delta_hi) +
                             " < " + format_num(p.delta_lo) + ")");
            }
            if (p.cr_order != 2.0) {
                config_error("cr_order must be 2 (got " + format_num(p.cr_order) +
                             "); only the order-2 ball has an independent primal oracle "
                             "wired in");
            }
            check_at_least("zero_radius_every", p.zero_radius_every, 0);
            break;
        }
    }
}

// ----------------------------------------------------------------------------
// rate_table: robust-value estimator mean/std versus outer sample size
// ----------------------------------------------------------------------------
ExperimentReport run_rate_table(const ExperimentConfig& config) {
    const RateTableParams& p = config.rate;
    const MertonMarket market = to_market(p.market);
    const TimeGrid grid{0.0, market.T, p.steps};
    const FinitePrior prior = FinitePrior::from_scalars(p.prior_values, p.prior_probs);
    const QuadratureRule quad(64);

    // The evaluated policy is fixed across the whole table: the re-weighted
    // prior's posterior policy at the configured penalty, tabulated for
    // cheap per-step lookups.  The table covers the open horizon [0, T);
    // queries beyond its last node clamp.
    const FinitePrior q = learned_prior(prior, market, p.delta_grid.front(), p.learn_lambda,
                                        p.learn_alpha, p.learn_h, p.learn_tol,
                                        p.learn_max_iters, quad);
    const FractionPolicy raw = make_drbc_policy(q, market, quad);
    const FractionTable table(raw.fn, grid.time(grid.steps - 1), p.table_nt, p.y_lo, p.y_hi,
                              p.table_ny);
    const FractionFn policy = table.as_fn();

    const int paths_per_sample = p.paths_per_sample;
    InnerSimulator inner;
    inner.lower_bound = 0.0;  // ruined paths score zero utility
    inner.open = [&, paths_per_sample](const Eigen::VectorXd& b, std::uint64_t seed) {
        auto rng = std::make_shared<std::mt19937_64>(make_rng(seed));
        const double drift = b(0);
        return [&, rng, drift, paths_per_sample]() {
            double acc = 0.0;
            for (int j = 0; j < paths_per_sample; ++j) {
                double u = 0.0;
                try {
                    const double xT = simulate_wealth_terminal(grid, market.r, market.sigma,
                                                               drift, market.x0, policy, *rng);
                    u = terminal_utility(xT, market);
                } catch (const NonFinitePath&) {
                    u = 0.0;
                }
                acc += u;
            }
            return acc / static_cast<double>(paths_per_sample);
        };
    };

    RmlmcParams rmlmc;
    rmlmc.n0 = p.n0;
    rmlmc.r_geo = p.r_geo;

    ExperimentReport report;
    const std::size_t reps = config.replications;

    for (std::size_t di = 0; di < p.delta_grid.size(); ++di) {
        const double delta = p.delta_grid[di];
        const std::string delta_str = format_num(delta);

        // One full ascent pins the multiplier; each replication then runs a
        // single fixed-batch evaluation at that multiplier with its own n
        // outer draws, so the replication spread isolates the outer-sample
        // noise at each n.
        AscentConfig ascent;
        ascent.n_outer = p.ascent_n;
        ascent.max_iters = p.ascent_iters;
        ascent.alpha0 = p.ascent_alpha0;
        ascent.seed = derive_seed(derive_seed(config.seed, kTagAscent), di);
        ascent.workers = config.workers;
        const DualEvalResult pinned = evaluate_policy_kl(inner, prior, delta, rmlmc, ascent);

        report.rows.push_back(make_row(config, "drbc", delta_str, "", "lambda_star",
                                       pinned.lambda_star, 0.0, false, 1));

        std::vector<SampleStats> per_n;
        for (std::size_t ni = 0; ni < p.n_grid.size(); ++ni) {
            const std::size_t n = p.n_grid[ni];
            std::vector<double> values(reps, 0.0);
            for (std::size_t rep = 0; rep < reps; ++rep) {
                AscentConfig one;
                one.n_outer = n;
                one.max_iters = 1;
                one.alpha0 = p.ascent_alpha0;
                one.tol_lambda = 1e9;  // a single step never moves the multiplier
                one.fixed_batch = true;
                one.lambda_init = pinned.lambda_star;
                one.seed = derive_seed(
                    derive_seed(derive_seed(derive_seed(config.seed, kTagReps), di), n), rep);
                one.workers = config.workers;
                values[rep] = evaluate_policy_kl(inner, prior, delta, rmlmc, one).robust_value;
            }
            const SampleStats st = stats_of(values);
            per_n.push_back(st);
            report.rows.push_back(make_row(config, "drbc", delta_str, format_num(double(n)),
                                           "robust_value", st.mean, st.stddev, reps >= 2,
                                           reps));
        }

        if (reps < 2) {
            report.checks.push_back(make_check(
                "std_defined_delta=" + delta_str, true,
                "single replication: std columns are undefined and flagged as such"));
            continue;
        }
        if (p.n_grid.size() >= 2) {
            // Smallest vs largest n: the spread should contract like
            // 1/sqrt(n), within a generous window.
            std::size_t i_min = 0;
            std::size_t i_max = 0;
            for (std::size_t i = 1; i < p.n_grid.size(); ++i) {
                if (p.n_grid[i] < p.n_grid[i_min]) i_min = i;
                if (p.n_grid[i] > p.n_grid[i_max]) i_max = i;
            }
            const double expected = std::sqrt(static_cast<double>(p.n_grid[i_min]) /
                                              static_cast<double>(p.n_grid[i_max]));
            const double lo = 0.67 * expected;
            const double hi = 1.5 * expected;
            const bool ratio_ok = per_n[i_min].stddev > 0.0;
            const double ratio =
                ratio_ok ? per_n[i_max].stddev / per_n[i_min].stddev
                         : std::numeric_limits<double>::quiet_NaN();
            report.checks.push_back(make_check(
                "sqrt_rate_delta=" + delta_str, ratio_ok && ratio >= lo && ratio <= hi,
                "std(n=" + format_num(double(p.n_grid[i_min])) + ")=" +
                    format_num(per_n[i_min].stddev) + ", std(n=" +
                    format_num(double(p.n_grid[i_max])) + ")=" +
                    format_num(per_n[i_max].stddev) + ", ratio=" + format_num(ratio) +
                    ", window=[" + format_num(lo) + ", " + format_num(hi) + "]"));

            bool stable = true;
            double worst = 0.0;
            for (std::size_t i = 0; i < per_n.size(); ++i) {
                for (std::size_t j = i + 1; j < per_n.size(); ++j) {
                    const double diff = std::abs(per_n[i].mean - per_n[j].mean);
                    const double limit = 3.0 * pooled_se(per_n[i], per_n[j]);
                    worst = std::max(worst, limit > 0.0 ? diff / limit : 0.0);
                    if (diff > limit) stable = false;
                }
            }
            report.checks.push_back(make_check(
                "means_stable_delta=" + delta_str, stable,
                "worst pairwise |mean difference| = " + format_num(worst) +
                    " of its 3-standard-error budget"));
        }
    }
    return report;
}

// ----------------------------------------------------------------------------
// gap_vs_delta: cosine-drift ablation, gap to the known optimum
// ----------------------------------------------------------------------------
ExperimentReport run_gap_vs_delta(const ExperimentConfig& config) {
    const GapParams& p = config.gap;
    const MertonMarket market = to_market(p.market);
    const TimeGrid grid{0.0, market.T, p.steps};
    const FinitePrior prior = FinitePrior::from_scalars(p.prior_values, p.prior_probs);
    const QuadratureRule quad(64);
    const std::size_t paths = config.replications;

    const double b0 = p.drift_b0;
    const double kappa = p.drift_kappa;
    const DriftFn truth = [b0, kappa](double t) { return 0.5 * b0 * (1.0 + std::cos(kappa * t)); };

    // With the drift path known, the optimal fraction is the time-varying
    // Merton ratio; every policy is scored on the same noise block.
    const double merton_denom = (1.0 - market.alpha) * market.sigma * market.sigma;
    const FractionPolicy pi_star = make_time_varying_policy(
        [truth, &market, merton_denom](double t) { return (truth(t) - market.r) / merton_denom; });

    const NoiseBlock noise = make_noise(grid, 1, paths, derive_seed(config.seed, kTagNoise));

    auto utilities_under_truth = [&](const FractionFn& fn) {
        std::vector<double> utils(paths, 0.0);
        parallel_for(paths, config.workers, [&](std::size_t path) {
            double terminal = 0.0;
            try {
                const WealthPath wp = simulate_wealth_drift(grid, market.r, market.sigma, truth,
                                                            market.x0, fn, noise.path(path));
                terminal = wp.x.back();
            } catch (const NonFinitePath&) {
                terminal = 0.0;
            }
            utils[path] = terminal_utility(terminal, market);
        });
        return utils;
    };

    const std::vector<double> star_utils = utilities_under_truth(pi_star.fn);
    const SampleStats star_stats = stats_of(star_utils);

    ExperimentReport report;
    report.rows.push_back(make_row(config, "pi_star", "", "", "utility", star_stats.mean,
                                   star_stats.stddev, true, paths));
    report.rows.push_back(
        make_row(config, "pi_star", "", "", "utility_gap", 0.0, 0.0, true, paths));

    const FractionPolicy bayes = make_bayes_policy(prior, market, quad);

    struct GapStats {
        double drc_gap = 0.0;
        double drbc_gap = 0.0;
        double drc_se = 0.0;
        double drbc_se = 0.0;
        bool zero_radius = false;
        double zero_diff = 0.0;
    };
    std::vector<GapStats> per_delta;

    bool all_nonneg = true;
    std::string nonneg_detail;

    for (double delta : p.delta_grid) {
        const std::string delta_str = format_num(delta);
        FractionPolicy drc;
        FractionPolicy drbc;
        if (delta == 0.0) {
            // A zero-radius ball removes the adversary: both robust methods
            // degenerate to the posterior policy under the prior itself.
            drc = bayes;
            drbc = bayes;
        } else {
            drc = make_drc_policy(prior, market, delta);
            const FinitePrior q = learned_prior(prior, market, delta,
                                                p.lambda_scale / std::sqrt(delta), p.learn_alpha,
                                                p.learn_h, p.learn_tol, p.learn_max_iters, quad);
            drbc = make_drbc_policy(q, market, quad);
        }

        GapStats gs;
        gs.zero_radius = (delta == 0.0);
        for (const auto& [name, policy] : std::initializer_list<
                 std::pair<const char*, const FractionPolicy*>>{{"drc", &drc}, {"drbc", &drbc}}) {
            const std::vector<double> utils = utilities_under_truth(policy->fn);
            std::vector<double> gaps(paths);
            for (std::size_t i = 0; i < paths; ++i) gaps[i] = star_utils[i] - utils[i];
            const SampleStats ustats = stats_of(utils);
            const SampleStats gstats = stats_of(gaps);
            report.rows.push_back(make_row(config, name, delta_str, "", "utility", ustats.mean,
                                           ustats.stddev, true, paths));
            report.rows.push_back(make_row(config, name, delta_str, "", "utility_gap",
                                           gstats.mean, gstats.stddev, true, paths));
            if (std::string(name) == "drc") {
                gs.drc_gap = gstats.mean;
                gs.drc_se = gstats.std_error;
            } else {
                gs.drbc_gap = gstats.mean;
                gs.drbc_se = gstats.std_error;
            }
            if (gstats.mean < -3.0 * gstats.std_error) {
                all_nonneg = false;
                nonneg_detail += std::string(nonneg_detail.empty() ? "" : "; ") + name +
                                 " at delta=" + delta_str + ": gap " + format_num(gstats.mean) +
                                 " < -3se " + format_num(-3.0 * gstats.std_error);
            }
        }
        gs.zero_diff = std::abs(gs.drc_gap - gs.drbc_gap);
        per_delta.push_back(gs);

        if (delta > 0.0) {
            report.checks.push_back(make_check(
                "drbc_le_drc_delta=" + delta_str, gs.drbc_gap <= gs.drc_gap,
                "gap(drbc)=" + format_num(gs.drbc_gap) + ", gap(drc)=" + format_num(gs.drc_gap)));
        } else {
            report.checks.push_back(make_check(
                "zero_radius_coincide", gs.zero_diff <= 1e-12,
                "both methods reduce to the posterior policy; |gap difference| = " +
                    format_num(gs.zero_diff)));
        }
    }

    report.checks.push_back(make_check(
        "gaps_nonnegative_3se", all_nonneg,
        all_nonneg ? "every gap to the known optimum is >= -3 standard errors" : nonneg_detail));
    return report;
}

// ----------------------------------------------------------------------------
// setting1 / setting2: prior misspecification orderings
// ----------------------------------------------------------------------------
ExperimentReport run_settings(const ExperimentConfig& config) {
    const bool degenerate = config.experiment == ExperimentKind::Setting2;
    const SettingsParams& p = config.settings;
    const MertonMarket market = to_market(p.market);
    const TimeGrid grid{0.0, market.T, p.steps};
    const FinitePrior correct = FinitePrior::from_scalars(p.prior_values, p.correct_probs);
    const FinitePrior incorrect = FinitePrior::from_scalars(p.prior_values, p.incorrect_probs);
    const QuadratureRule quad(64);
    const std::size_t paths = config.replications;

    const NoiseBlock noise = make_noise(grid, 1, paths, derive_seed(config.seed, kTagNoise));

    // The market truth: one drift per path from the correct prior
    // (setting1), or the single degenerate atom (setting2).
    std::vector<double> drifts(paths, p.truth_atom);
    if (!degenerate) {
        const std::vector<Eigen::VectorXd> draws =
            sample_prior(correct, paths, derive_seed(config.seed, kTagDrifts));
        for (std::size_t i = 0; i < paths; ++i) drifts[i] = draws[i](0);
    }

    struct Method {
        std::string name;
        std::string delta;  // empty when not radius-indexed
        FractionPolicy policy;
    };
    std::vector<Method> methods;
    if (!degenerate) {
        methods.push_back({"bip", "", make_bayes_policy(incorrect, market, quad)});
        methods.push_back({"bcp", "", make_bayes_policy(correct, market, quad)});
    } else {
        const double merton_denom = (1.0 - market.alpha) * market.sigma * market.sigma;
        methods.push_back(
            {"bcpd", "", make_constant_policy((p.truth_atom - market.r) / merton_denom)});
        for (double delta : p.delta_grid) {
            methods.push_back(
                {"drc", format_num(delta), make_drc_policy(incorrect, market, delta)});
        }
    }
    for (double delta : p.delta_grid) {
        const FinitePrior q =
            learned_prior(incorrect, market, delta, p.lambda_scale / std::sqrt(delta),
                          p.learn_alpha, p.learn_h, p.learn_tol, p.learn_max_iters, quad);
        methods.push_back({"drbc", format_num(delta), make_drbc_policy(q, market, quad)});
    }

    ExperimentReport report;
    std::map<std::string, SampleStats> by_key;  // "name|delta" -> utility stats
    for (const Method& method : methods) {
        const std::vector<double> utils =
            policy_utilities(grid, market, method.policy.fn, drifts, noise, config.workers);
        std::vector<double> terminals(paths);
        for (std::size_t i = 0; i < paths; ++i) {
            // invert u = x^a / a for the Sharpe summary's terminal wealths
            terminals[i] = std::pow(market.alpha * utils[i], 1.0 / market.alpha);
        }
        const PerformanceSummary perf = sharpe_and_utility(terminals, market);
        const SampleStats ustats = stats_of(utils);
        by_key[method.name + "|" + method.delta] = ustats;
        report.rows.push_back(make_row(config, method.name, method.delta, "", "mean_utility",
                                       ustats.mean, ustats.stddev, true, paths));
        report.rows.push_back(make_row(config, method.name, method.delta, "", "sharpe",
                                       perf.sharpe, 0.0, false, paths));
    }

    auto ordering_check = [&](const std::string& hi_key, const std::string& lo_key,
                              const std::string& name) {
        const SampleStats& hi = by_key.at(hi_key);
        const SampleStats& lo = by_key.at(lo_key);
        const double margin = hi.mean - lo.mean;
        const double budget = 2.0 * pooled_se(hi, lo);
        report.checks.push_back(make_check(
            name, margin > budget,
            "margin=" + format_num(margin) + " vs 2*pooled_se=" + format_num(budget)));
    };

    for (double delta : p.delta_grid) {
        const std::string ds = format_num(delta);
        if (!degenerate) {
            ordering_check("bcp|", "drbc|" + ds, "bcp_ge_drbc_delta=" + ds);
            ordering_check("drbc|" + ds, "bip|", "drbc_ge_bip_delta=" + ds);
        } else {
            ordering_check("bcpd|", "drbc|" + ds, "bcpd_ge_drbc_delta=" + ds);
            ordering_check("drbc|" + ds, "drc|" + ds, "drbc_ge_drc_delta=" + ds);
        }
    }

    if (p.delta_grid.size() >= 2) {
        double worst_rel = 0.0;
        for (std::size_t i = 0; i + 1 < p.delta_grid.size(); ++i) {
            const SampleStats& a = by_key.at("drbc|" + format_num(p.delta_grid[i]));
            const SampleStats& b = by_key.at("drbc|" + format_num(p.delta_grid[i + 1]));
            const double denom = std::max(std::abs(a.mean), 1e-12);
            worst_rel = std::max(worst_rel, std::abs(b.mean - a.mean) / denom);
        }
        report.checks.push_back(make_check(
            "drbc_delta_stability", worst_rel < 0.01,
            "max relative utility change between adjacent radii = " + format_num(worst_rel)));
    }
    return report;
}

// ----------------------------------------------------------------------------
// lq_compare: plug-in vs robust gain learning vs oracle
// ----------------------------------------------------------------------------
ExperimentReport run_lq_compare(const ExperimentConfig& config) {
    const LqParams& p = config.lq;
    const DriftFamily family =
        synthetic_drift_family(p.d, p.k_inputs, p.m_params, p.family_seed);

    LqModel model;
    model.A0 = family.A0;
    model.A_list = family.A_list;
    model.G = family.G;
    model.Sigma = p.sigma_scale * Eigen::MatrixXd::Identity(p.d, p.d);
    model.Q = p.q_scale * Eigen::MatrixXd::Identity(p.d, p.d);
    model.QT = p.qt_scale * Eigen::MatrixXd::Identity(p.d, p.d);
    model.Rmat = p.r_scale * Eigen::MatrixXd::Identity(p.k_inputs, p.k_inputs);
    model.grid = TimeGrid{0.0, p.horizon, p.steps};
    model.validate();
    const LqCost cost = model.cost();

    const std::size_t runs = config.replications;
    const std::size_t n_delta = p.delta_grid.size();

    // Per-run mean rewards under common evaluation noise: oracle, plug-in,
    // and one column per radius.
    std::vector<double> oracle_util(runs, 0.0);
    std::vector<double> plugin_util(runs, 0.0);
    std::vector<std::vector<double>> drbc_util(n_delta, std::vector<double>(runs, 0.0));

    parallel_for(runs, config.workers, [&](std::size_t run) {
        const std::uint64_t run_seed = derive_seed(config.seed, run);

        // Ground truth, exploration feedback, and the identification start,
        // drawn in a fixed order so the run is a pure function of its seed.
        std::mt19937_64 rng_id = make_rng(derive_seed(run_seed, 1));
        std::normal_distribution<double> normal(0.0, 1.0);
        Eigen::VectorXd theta_star(p.m_params);
        for (int i = 0; i < p.m_params; ++i) theta_star(i) = p.theta_star_std * normal(rng_id);
        Eigen::MatrixXd k_rand(p.k_inputs, p.d);
        for (int i = 0; i < p.k_inputs; ++i) {
            for (int j = 0; j < p.d; ++j) k_rand(i, j) = p.explore_scale * normal(rng_id);
        }
        Eigen::VectorXd x0_id(p.d);
        for (int i = 0; i < p.d; ++i) x0_id(i) = normal(rng_id);

        std::vector<double> dw_id;
        fill_noise_path(model.grid, p.d, derive_seed(run_seed, 2), 0, dw_id);
        const LqPolicyFn explore = [&k_rand](int, double, const Eigen::VectorXd& x) {
            return Eigen::VectorXd(-k_rand * x);
        };

        LqTrajectory traj;
        try {
            traj = simulate_lq(model.dynamics(theta_star), cost, model.grid, x0_id, explore,
                               p.u_clip, dw_id.data());
        } catch (const NonFinitePath&) {
            // A destabilizing random feedback: fall back to an uncontrolled
            // identification pass (the base drift is stable).
            const LqPolicyFn idle = [&](int, double, const Eigen::VectorXd&) {
                return Eigen::VectorXd(Eigen::VectorXd::Zero(p.k_inputs));
            };
            traj = simulate_lq(model.dynamics(theta_star), cost, model.grid, x0_id, idle,
                               p.u_clip, dw_id.data());
        }

        BeliefFeatures belief;
        try {
            belief = gls_estimate(traj, model, p.ridge);
        } catch (const SingularInformation&) {
            belief.theta_hat = Eigen::VectorXd::Zero(p.m_params);
            belief.S_prec = Eigen::MatrixXd::Identity(p.m_params, p.m_params);
        }

        // Certainty-equivalent baseline; a diverging backward solve falls
        // back to a clamped estimate and then to zero gains.
        LqPolicy plugin;
        try {
            plugin = riccati_solve(model, model.A_of(belief.theta_hat)).policy;
        } catch (const RiccatiBlowup&) {
            try {
                const Eigen::VectorXd clamped =
                    belief.theta_hat.cwiseMax(-3.0).cwiseMin(3.0);
                plugin = riccati_solve(model, model.A_of(clamped)).policy;
            } catch (const RiccatiBlowup&) {
                plugin.gains.assign(static_cast<std::size_t>(model.grid.steps) + 1,
                                    Eigen::MatrixXd::Zero(p.k_inputs, p.d));
            }
        }

        const LqPolicy oracle = riccati_solve(model, model.A_of(theta_star)).policy;

        std::vector<LqPolicy> robust(n_delta);
        for (std::size_t di = 0; di < n_delta; ++di) {
            LqLearnConfig learn;
            learn.C_lam = p.c_lam;
            learn.N_theta = p.n_theta;
            learn.B_traj = p.b_traj;
            learn.S_in = p.s_in;
            learn.eta = p.eta;
            learn.u_clip = p.u_clip;
            learn.spsa_c = p.spsa_c;
            learn.grad_clip = p.grad_clip;
            learn.workers = 1;  // runs are already parallel
            LqPrior prior;
            prior.mean = Eigen::VectorXd::Zero(p.m_params);
            prior.stddev = p.prior_std;
            robust[di] = drbc_lq_learn(model, prior, p.delta_grid[di], learn, belief,
                                       derive_seed(run_seed, 10 + di))
                             .policy;
        }

        // Common evaluation randomness across every controller in this run.
        std::mt19937_64 rng_eval = make_rng(derive_seed(run_seed, 20));
        std::vector<Eigen::VectorXd> x0s(p.b_eval, Eigen::VectorXd(p.d));
        for (std::size_t b = 0; b < p.b_eval; ++b) {
            for (int i = 0; i < p.d; ++i) x0s[b](i) = normal(rng_eval);
        }
        const NoiseBlock eval_noise =
            make_noise(model.grid, p.d, p.b_eval, derive_seed(run_seed, 21));
        const LqDynamics dyn_true = model.dynamics(theta_star);

        auto mean_reward = [&](const LqPolicy& policy) {
            const LqPolicyFn fn = lq_policy_fn(policy);
            RunningStat st;
            for (std::size_t b = 0; b < p.b_eval; ++b) {
                double reward = -1e6;
                try {
                    reward = lq_reward(simulate_lq(dyn_true, cost, model.grid, x0s[b], fn,
                                                   p.u_clip, eval_noise.path(b)));
                } catch (const NonFinitePath&) {
                    reward = -1e6;
                }
                st.add(reward);
            }
            return st.mean();
        };

        oracle_util[run] = mean_reward(oracle);
        plugin_util[run] = mean_reward(plugin);
        for (std::size_t di = 0; di < n_delta; ++di) drbc_util[di][run] = mean_reward(robust[di]);
    });

    ExperimentReport report;
    const SampleStats oracle_stats = stats_of(oracle_util);
    const SampleStats plugin_stats = stats_of(plugin_util);

    std::vector<double> plugin_gap(runs);
    for (std::size_t i = 0; i < runs; ++i) plugin_gap[i] = oracle_util[i] - plugin_util[i];
    const SampleStats plugin_gap_stats = stats_of(plugin_gap);

    report.rows.push_back(make_row(config, "oracle", "", "", "utility", oracle_stats.mean,
                                   oracle_stats.stddev, true, runs));
    report.rows.push_back(
        make_row(config, "oracle", "", "", "utility_gap", 0.0, 0.0, true, runs));
    report.rows.push_back(make_row(config, "plugin", "", "", "utility", plugin_stats.mean,
                                   plugin_stats.stddev, true, runs));
    report.rows.push_back(make_row(config, "plugin", "", "", "utility_gap",
                                   plugin_gap_stats.mean, plugin_gap_stats.stddev, true, runs));

    report.checks.push_back(make_check("oracle_gap_zero", true,
                                       "the oracle's gap to itself is identically zero"));

    for (std::size_t di = 0; di < n_delta; ++di) {
        const std::string ds = format_num(p.delta_grid[di]);
        const SampleStats ustats = stats_of(drbc_util[di]);
        std::vector<double> gap(runs);
        for (std::size_t i = 0; i < runs; ++i) gap[i] = oracle_util[i] - drbc_util[di][i];
        const SampleStats gstats = stats_of(gap);
        report.rows.push_back(
            make_row(config, "drbc", ds, "", "utility", ustats.mean, ustats.stddev, true, runs));
        report.rows.push_back(make_row(config, "drbc", ds, "", "utility_gap", gstats.mean,
                                       gstats.stddev, true, runs));

        report.checks.push_back(make_check(
            "drbc_gap_below_plugin_delta=" + ds, gstats.mean < plugin_gap_stats.mean,
            "gap(drbc)=" + format_num(gstats.mean) +
                ", gap(plugin)=" + format_num(plugin_gap_stats.mean)));
        report.checks.push_back(make_check(
            "drbc_gap_std_halved_delta=" + ds,
            gstats.stddev <= 0.5 * plugin_gap_stats.stddev,
            "std(drbc)=" + format_num(gstats.stddev) +
                " vs std(plugin)/2=" + format_num(0.5 * plugin_gap_stats.stddev)));
    }
    return report;
}

// ----------------------------------------------------------------------------
// duality_check: dual values vs independent primal oracles
// ----------------------------------------------------------------------------
ExperimentReport run_duality_check(const ExperimentConfig& config) {
    const DualityParams& p = config.duality;
    const std::size_t instances = config.replications;

    std::vector<double> kl_err(instances, 0.0);
    std::vector<double> cr_err(instances, 0.0);
    std::vector<double> zero_err(instances, -1.0);  // -1 marks non-zero-radius instances

    parallel_for(instances, config.workers, [&](std::size_t idx) {
        std::mt19937_64 rng = make_rng(derive_seed(config.seed, idx));
        std::uniform_int_distribution<int> atom_count(p.atoms_min, p.atoms_max);
        std::uniform_real_distribution<double> unit(0.0, 1.0);

        const int n = atom_count(rng);
        std::vector<double> z(n);
        std::vector<double> probs(n);
        double mass = 0.0;
        for (int i = 0; i < n; ++i) z[i] = p.z_lo + (p.z_hi - p.z_lo) * unit(rng);
        for (int i = 0; i < n; ++i) {
            probs[i] = 0.05 + unit(rng);  // floor keeps every atom genuinely present
            mass += probs[i];
        }
        for (int i = 0; i < n; ++i) probs[i] /= mass;

        const bool zero_radius =
            p.zero_radius_every > 0 &&
            idx % static_cast<std::size_t>(p.zero_radius_every) == 0;
        const double log_lo = std::log(p.delta_lo);
        const double log_hi = std::log(p.delta_hi);
        const double delta =
            zero_radius ? 0.0 : std::exp(log_lo + (log_hi - log_lo) * unit(rng));

        const FinitePrior prior = FinitePrior::from_scalars(z, probs);
        const double kl_dual = kl_dual_value_finite(prior, z, delta).value;
        const double cr_dual = cressie_read_dual(z, probs, p.cr_order, delta).value;
        const double kl_primal = kl_primal_worst_mean(probs, z, delta);
        const double cr_primal = chi2_primal_worst_mean(probs, z, delta);

        kl_err[idx] = std::abs(kl_dual - kl_primal);
        cr_err[idx] = std::abs(cr_dual - cr_primal);
        if (zero_radius) {
            double mean = 0.0;
            for (int i = 0; i < n; ++i) mean += probs[i] * z[i];
            zero_err[idx] = std::max(std::abs(kl_dual - mean), std::abs(cr_dual - mean));
        }
    });

    ExperimentReport report;
    auto summarize = [&](const char* method, const std::vector<double>& err) {
        double worst = 0.0;
        for (double e : err) worst = std::max(worst, e);
        const SampleStats st = stats_of(err);
        report.rows.push_back(make_row(config, method, "", "", "max_abs_error", worst, 0.0,
                                       false, err.size()));
        report.rows.push_back(make_row(config, method, "", "", "mean_abs_error", st.mean,
                                       st.stddev, err.size() >= 2, err.size()));
        return worst;
    };
    const double kl_worst = summarize("kl", kl_err);
    const double cr_worst = summarize("cressie_read", cr_err);

    double zero_worst = 0.0;
    std::size_t zero_count = 0;
    for (double e : zero_err) {
        if (e >= 0.0) {
            zero_worst = std::max(zero_worst, e);
            ++zero_count;
        }
    }
    if (zero_count > 0) {
        report.rows.push_back(make_row(config, "zero_radius", "0", "", "max_abs_error",
                                       zero_worst, 0.0, false, zero_count));
    }

    report.checks.push_back(make_check(
        "kl_matches_primal", kl_worst <= 1e-3,
        "max |dual - primal| = " + format_num(kl_worst) + " over " +
            std::to_string(instances) + " instances (tolerance 1e-3)"));
    report.checks.push_back(make_check(
        "cressie_read_matches_primal", cr_worst <= 1e-3,
        "max |dual - primal| = " + format_num(cr_worst) + " over " +
            std::to_string(instances) + " instances (tolerance 1e-3)"));
    if (zero_count > 0) {
        report.checks.push_back(make_check(
            "zero_radius_exact", zero_worst <= 1e-9,
            "max |dual - plain mean| at radius zero = " + format_num(zero_worst) + " over " +
                std::to_string(zero_count) + " instances (tolerance 1e-9)"));
    }
    return report;
}

// ----------------------------------------------------------------------------
// Dispatch, report rendering, files
// ----------------------------------------------------------------------------
bool ExperimentReport::all_pass() const {
    for (const PropertyCheck& c : checks) {
        if (!c.pass) return false;
    }
    return true;
}

ExperimentReport run_experiment(const ExperimentConfig& config) {
    validate_config(config);
    switch (config.experiment) {
        case ExperimentKind::RateTable: return run_rate_table(config);
        case ExperimentKind::GapVsDelta: return run_gap_vs_delta(config);
        case ExperimentKind::Setting1:
        case ExperimentKind::Setting2: return run_settings(config);
        case ExperimentKind::LqCompare: return run_lq_compare(config);
        case ExperimentKind::DualityCheck: return run_duality_check(config);
    }
    throw std::logic_error("run_experiment: unhandled experiment kind");
}

std::string to_csv(const std::vector<ReportRow>& rows) {
    std::string out = "experiment,method,delta,n,metric,mean,std,std_defined,replications\n";
    for (const ReportRow& row : rows) {
        out += row.experiment;
        out += ',';
        out += row.method;
        out += ',';
        out += row.delta;
        out += ',';
        out += row.n;
        out += ',';
        out += row.metric;
        out += ',';
        out += format_num(row.mean);
        out += ',';
        if (row.std_defined) out += format_num(row.std_dev);
        out += ',';
        out += row.std_defined ? "true" : "false";
        out += ',';
        out += std::to_string(row.replications);
        out += '\n';
    }
    return out;
}

std::string to_json_summary(const ExperimentConfig& config, const ExperimentReport& report) {
    nlohmann::json j;
    j["schema"] = 1;
    j["experiment"] = to_string(config.experiment);
    j["seed"] = config.seed;
    j["full"] = config.full_scale;
    j["replications"] = config.replications;
    j["rows"] = report.rows.size();
    j["csv"] = to_string(config.experiment) + ".csv";
    nlohmann::json checks = nlohmann::json::array();
    for (const PropertyCheck& c : report.checks) {
        checks.push_back({{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
    }
    j["checks"] = checks;
    j["all_pass"] = report.all_pass();
    return j.dump(2) + "\n";
}

std::pair<std::string, std::string> write_report(const ExperimentConfig& config,
                                                 const ExperimentReport& report) {
    std::filesystem::create_directories(config.out_dir);
    const std::string base = to_string(config.experiment);
    const std::string csv_path = config.out_dir + "/" + base + ".csv";
    const std::string json_path = config.out_dir + "/" + base + "_summary.json";
    {
        std::ofstream out(csv_path, std::ios::binary);
        if (!out) throw std::runtime_error("write_report: cannot open " + csv_path);
        out << to_csv(report.rows);
    }
    {
        std::ofstream out(json_path, std::ios::binary);
        if (!out) throw std::runtime_error("write_report: cannot open " + json_path);
        out << to_json_summary(config, report);
    }
    return {csv_path, json_path};
}

}  // namespace drbc
