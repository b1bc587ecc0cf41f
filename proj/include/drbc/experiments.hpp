// ============================================================================
// experiments.hpp - Batch experiment harness: configs, runners, reports
// ============================================================================
//
// Six batch studies over the library:
//
//   rate_table    : robust-value estimator mean/std versus outer sample size
//                   for a fixed learned policy (CLT-rate study).
//   gap_vs_delta  : utility gap to the true optimum under a known cosine
//                   drift, robust-control baseline versus re-weighted-prior
//                   Bayesian control, across uncertainty radii.
//   setting1      : random-drift market, Bayes policies under the correct /
//                   incorrect prior versus the re-weighted prior.
//   setting2      : degenerate (point-mass) market, point-mass Bayes and
//                   constant robust-control baselines versus the re-weighted
//                   prior.
//   lq_compare    : linear-quadratic control with single-trajectory
//                   identification; certainty-equivalent plug-in versus the
//                   robust gain-class learner versus the oracle.
//   duality_check : dual convex-optimization values versus independent primal
//                   oracles on random finite instances.
//
// Configs are flat key = value text (one pair per line, '#' comments).  Every
// numeric default has a desk-scale value and, where the studies are heavier,
// a full-scale value selected by `full = true`; explicit keys always win.
// Reports are a CSV (one line per ReportRow) plus a JSON summary carrying a
// schema version and one pass/fail entry per asserted property.  Both files
// are byte-identical across reruns with the same config and seed, at any
// worker count.
// ============================================================================

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace drbc {

enum class ExperimentKind {
    RateTable,
    GapVsDelta,
    Setting1,
    Setting2,
    LqCompare,
    DualityCheck,
};

// "rate_table", "gap_vs_delta", "setting1", "setting2", "lq_compare",
// "duality_check"
std::string to_string(ExperimentKind kind);
ExperimentKind experiment_kind_from(const std::string& name);

// ----------------------------------------------------------------------------
// Per-experiment parameter blocks (values after default resolution)
// ----------------------------------------------------------------------------
struct MertonBlock {
    double alpha = 0.5;  // utility exponent, strictly in (0, 1)
    double sigma = 0.4;  // volatility, > 0
    double rate = 0.05;  // riskless rate
};

struct RateTableParams {
    MertonBlock market;
    std::vector<double> prior_values = {0.01, 0.46, 0.30, 0.21, 0.27};
    std::vector<double> prior_probs = {0.05, 0.35, 0.35, 0.15, 0.1};
    std::vector<double> delta_grid;      // desk {0.01}, full {0.01, 0.05, 0.1}
    std::vector<std::size_t> n_grid;     // desk {100, 10000}, full adds 1000
    int steps = 250;                     // wealth-path steps (full 1000)
    int paths_per_sample = 1;            // inner paths averaged per sample (full 100)
    double r_geo = 0.65;                 // level law, strictly in (1/2, 3/4)
    int n0 = 3;                          // base level
    std::size_t ascent_n = 2000;         // outer draws per ascent iteration
    int ascent_iters = 40;
    double ascent_alpha0 = 0.01;
    double learn_lambda = 100.0;         // penalty for the policy-producing run
    double learn_alpha = 1e-5;
    double learn_h = 1e-6;
    double learn_tol = 1e-5;
    int learn_max_iters = 200000;
    int table_nt = 251;                  // tabulated-policy resolution
    int table_ny = 401;
    double y_lo = -6.0;
    double y_hi = 7.0;
};

struct GapParams {
    MertonBlock market;
    std::vector<double> prior_values = {0.01, 0.46, 0.30, 0.21, 0.27};
    std::vector<double> prior_probs = {0.5, 0.05, 0.2, 0.15, 0.1};
    std::vector<double> delta_grid = {0.02, 0.05, 0.1, 0.2, 0.4};
    int steps = 250;          // full 1000
    double drift_b0 = 0.6;    // cosine truth B(t) = b0/2 (1 + cos(kappa t))
    double drift_kappa = 6.283185307179586476925287;
    double lambda_scale = 0.33;  // penalty lambda = lambda_scale / sqrt(delta)
    double learn_alpha = 1e-5;
    double learn_h = 1e-6;
    double learn_tol = 1e-5;
    int learn_max_iters = 200000;
};

struct SettingsParams {
    MertonBlock market;
    std::vector<double> prior_values = {0.01, 0.46, 0.30, 0.21, 0.27};
    std::vector<double> correct_probs = {0.05, 0.5, 0.1, 0.15, 0.2};
    std::vector<double> incorrect_probs = {0.5, 0.05, 0.2, 0.15, 0.1};
    std::vector<double> delta_grid = {1e-3, 1e-2};
    double truth_atom = 0.46;  // degenerate truth (setting2)
    int steps = 1000;
    double lambda_scale = 0.33;
    double learn_alpha = 1e-5;
    double learn_h = 1e-6;
    double learn_tol = 1e-5;
    int learn_max_iters = 200000;
};

struct LqParams {
    int d = 4;          // state dimension (full 10)
    int k_inputs = 2;   // control dimension (full 5)
    int m_params = 4;   // drift parameters (full 10)
    int steps = 100;
    double horizon = 2.0;
    double sigma_scale = 0.7;
    double q_scale = 3.0;
    double qt_scale = 3.0;
    double r_scale = 1.0;
    std::uint64_t family_seed = 12345;
    double theta_star_std = 0.5;   // ground-truth draw scale
    double prior_std = 1.0;        // nominal (misspecified) prior scale
    double explore_scale = 0.3;    // identification feedback entries
    double ridge = 1e-8;
    std::vector<double> delta_grid = {0.01, 0.05, 0.1};
    std::size_t b_eval = 128;      // common-noise evaluation rollouts (full 512)
    int n_theta = 16;              // learner outer draws (full 32)
    int b_traj = 32;               // learner rollouts per draw (full 64)
    int s_in = 120;                // learner gradient steps (full 200)
    double eta = 0.01;
    double c_lam = 1.0;
    double u_clip = 50.0;
    double spsa_c = 0.05;
    double grad_clip = 10.0;
};

struct DualityParams {
    int atoms_min = 2;
    int atoms_max = 10;
    double z_lo = -5.0;
    double z_hi = 5.0;
    double delta_lo = 1e-3;   // log-uniform radius range
    double delta_hi = 2.0;
    double cr_order = 2.0;    // Cressie-Read order checked against the oracle
    int zero_radius_every = 10;  // every j-th instance uses radius zero
};

// ----------------------------------------------------------------------------
// Config
// ----------------------------------------------------------------------------
struct ExperimentConfig {
    ExperimentKind experiment = ExperimentKind::DualityCheck;
    std::uint64_t seed = 0;
    std::size_t replications = 1;  // reps / paths / runs / instances
    bool full_scale = false;
    int workers = 1;
    std::string out_dir = ".";

    RateTableParams rate;
    GapParams gap;
    SettingsParams settings;
    LqParams lq;
    DualityParams duality;
};

// Parses flat key = value text.  `overrides` are applied on top of the file
// content (command-line precedence); unknown keys, malformed lines, and
// invalid values raise std::invalid_argument with an actionable message.
// Defaults are resolved for the selected experiment and scale, then the
// result is validated.
ExperimentConfig parse_config_text(const std::string& text,
                                   const std::map<std::string, std::string>& overrides = {});
ExperimentConfig parse_config_file(const std::string& path,
                                   const std::map<std::string, std::string>& overrides = {});

// Re-checks every invariant on an assembled config (parse_config_* already
// validates; public for configs built in code).
void validate_config(const ExperimentConfig& config);

// ----------------------------------------------------------------------------
// Report
// ----------------------------------------------------------------------------
struct ReportRow {
    std::string experiment;  // experiment id
    std::string method;      // policy / dual family the row describes
    std::string delta;       // radius, formatted; empty when not applicable
    std::string n;           // size parameter, formatted; empty when n/a
    std::string metric;      // metric name
    double mean = 0.0;
    double std_dev = 0.0;    // ignored when !std_defined
    bool std_defined = true; // single-replication batches flag std undefined
    std::size_t replications = 0;
};

struct PropertyCheck {
    std::string name;
    bool pass = false;
    std::string detail;
};

struct ExperimentReport {
    std::vector<ReportRow> rows;
    std::vector<PropertyCheck> checks;

    bool all_pass() const;
};

// Dispatch on config.experiment.
ExperimentReport run_experiment(const ExperimentConfig& config);

ExperimentReport run_rate_table(const ExperimentConfig& config);
ExperimentReport run_gap_vs_delta(const ExperimentConfig& config);
ExperimentReport run_settings(const ExperimentConfig& config);  // setting1 / setting2
ExperimentReport run_lq_compare(const ExperimentConfig& config);
ExperimentReport run_duality_check(const ExperimentConfig& config);

// CSV with a fixed header; all numerics through the shared shortest-roundtrip
// formatter, so the bytes are reproducible.
std::string to_csv(const std::vector<ReportRow>& rows);

// {"schema": 1, "experiment": ..., "seed": ..., "rows": ..., "checks":
//  [{"name","pass","detail"}...], "all_pass": ...}
std::string to_json_summary(const ExperimentConfig& config, const ExperimentReport& report);

// Writes <out_dir>/<experiment>.csv and <out_dir>/<experiment>_summary.json,
// creating out_dir if needed.  Returns {csv_path, json_path}.
std::pair<std::string, std::string> write_report(const ExperimentConfig& config,
                                                 const ExperimentReport& report);

}  // namespace drbc
