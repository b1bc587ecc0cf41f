#include "drbc/sde.hpp"

#include <cmath>

namespace drbc {

namespace {

inline void check_wealth(double x) {
    if (!std::isfinite(x) || std::abs(x) > kStateBlowupGuard || x <= 0.0)
        throw NonFinitePath("simulate_wealth: wealth left the admissible region");
}

inline void check_market(double sigma, double x0) {
    if (!(sigma > 0.0)) throw std::invalid_argument("simulate_wealth: sigma must be > 0");
    if (!(x0 > 0.0)) throw std::invalid_argument("simulate_wealth: x0 must be > 0");
}

}  // namespace

NoiseBlock make_noise(const TimeGrid& grid, int dim, std::size_t n_paths, std::uint64_t seed) {
    grid.validate();
    if (dim < 1) throw std::invalid_argument("make_noise: dim must be >= 1");
    NoiseBlock block;
    block.steps = grid.steps;
    block.dim = dim;
    block.data.resize(n_paths);
    for (std::size_t p = 0; p < n_paths; ++p) fill_noise_path(grid, dim, seed, p, block.data[p]);
    return block;
}

void fill_noise_path(const TimeGrid& grid, int dim, std::uint64_t seed,
                     std::uint64_t path_index, std::vector<double>& out) {
    const double sdt = std::sqrt(grid.dt());
    auto rng = make_rng(derive_seed(seed, path_index));
    std::normal_distribution<double> normal(0.0, 1.0);
    out.resize(static_cast<std::size_t>(grid.steps) * static_cast<std::size_t>(dim));
    for (double& v : out) v = sdt * normal(rng);
}

WealthPath simulate_wealth(const TimeGrid& grid, double r, double sigma, double b,
                           double x0, const FractionFn& policy, const double* dw) {
    return simulate_wealth_drift(
        grid, r, sigma, [b](double) { return b; }, x0, policy, dw);
}

WealthPath simulate_wealth(const TimeGrid& grid, double r, double sigma, double b,
                           double x0, const FractionFn& policy, std::uint64_t seed,
                           std::uint64_t path_index) {
    std::vector<double> dw;
    fill_noise_path(grid, 1, seed, path_index, dw);
    return simulate_wealth(grid, r, sigma, b, x0, policy, dw.data());
}

WealthPath simulate_wealth_drift(const TimeGrid& grid, double r, double sigma,
                                 const DriftFn& b_of_t, double x0,
                                 const FractionFn& policy, const double* dw) {
    grid.validate();
    check_market(sigma, x0);
    const double dt = grid.dt();
    const int n = grid.steps;

    WealthPath path;
    path.t.resize(static_cast<std::size_t>(n) + 1);
    path.x.resize(static_cast<std::size_t>(n) + 1);
    path.y.resize(static_cast<std::size_t>(n) + 1);
    path.t[0] = grid.t0;
    path.x[0] = x0;
    path.y[0] = 0.0;

    double x = x0;
    double y = 0.0;
    for (int k = 0; k < n; ++k) {
        const double t = grid.time(k);
        const double b = b_of_t(t);
        const double pi = policy(t, y);
        x += x * ((r + pi * (b - r)) * dt + sigma * dw[k]);
        check_wealth(x);
        // Observation process shares the same Brownian increments as the
        // wealth path (common-noise evaluation design).
        y += (b - r) / sigma * dt + dw[k];
        path.t[static_cast<std::size_t>(k) + 1] = grid.time(k + 1);
        path.x[static_cast<std::size_t>(k) + 1] = x;
        path.y[static_cast<std::size_t>(k) + 1] = y;
    }
    return path;
}

double simulate_wealth_terminal(const TimeGrid& grid, double r, double sigma, double b,
                                double x0, const FractionFn& policy, std::mt19937_64& rng) {
    const double dt = grid.dt();
    const double sdt = std::sqrt(dt);
    const double drift_y = (b - r) / sigma * dt;
    const int n = grid.steps;
    std::normal_distribution<double> normal(0.0, 1.0);

    double x = x0;
    double y = 0.0;
    double t = grid.t0;
    for (int k = 0; k < n; ++k) {
        const double dwk = sdt * normal(rng);
        const double pi = policy(t, y);
        x += x * ((r + pi * (b - r)) * dt + sigma * dwk);
        if (!std::isfinite(x) || std::abs(x) > kStateBlowupGuard || x <= 0.0)
            throw NonFinitePath("simulate_wealth_terminal: wealth left the admissible region");
        y += drift_y + dwk;
        t += dt;
    }
    return x;
}

LqTrajectory simulate_lq(const LqDynamics& dyn, const LqCost& cost, const TimeGrid& grid,
                         const Eigen::VectorXd& x0, const LqPolicyFn& policy, double u_clip,
                         const double* dw) {
    grid.validate();
    const Eigen::Index d = dyn.A.rows();
    const Eigen::Index m = dyn.G.cols();
    if (dyn.A.cols() != d || dyn.G.rows() != d || dyn.Sigma.rows() != d || dyn.Sigma.cols() != d)
        throw std::invalid_argument("simulate_lq: dynamics dimensions are inconsistent");
    if (cost.Q.rows() != d || cost.Q.cols() != d || cost.QT.rows() != d || cost.QT.cols() != d ||
        cost.R.rows() != m || cost.R.cols() != m)
        throw std::invalid_argument("simulate_lq: cost dimensions are inconsistent");
    if (x0.size() != d) throw std::invalid_argument("simulate_lq: x0 dimension mismatch");
    if (!(u_clip > 0.0)) throw std::invalid_argument("simulate_lq: u_clip must be > 0");

    const int n = grid.steps;
    const double dt = grid.dt();

    LqTrajectory traj;
    traj.x.resize(d, n + 1);
    traj.u.resize(m, n);
    traj.x.col(0) = x0;

    Eigen::VectorXd x = x0;
    Eigen::VectorXd noise(d);
    double running = 0.0;
    for (int k = 0; k < n; ++k) {
        const double t = grid.time(k);
        Eigen::VectorXd u = policy(k, t, x);
        if (u.size() != m) throw std::invalid_argument("simulate_lq: policy control dimension mismatch");
        for (Eigen::Index j = 0; j < m; ++j) u(j) = std::clamp(u(j), -u_clip, u_clip);

        running += (x.dot(cost.Q * x) + u.dot(cost.R * u)) * dt;
        for (Eigen::Index j = 0; j < d; ++j)
            noise(j) = dw[static_cast<std::size_t>(k) * static_cast<std::size_t>(d) +
                          static_cast<std::size_t>(j)];
        x = x + (dyn.A * x + dyn.G * u) * dt + dyn.Sigma * noise;
        if (!x.allFinite() || x.cwiseAbs().maxCoeff() > kStateBlowupGuard)
            throw NonFinitePath("simulate_lq: state exceeded the blowup guard");

        traj.u.col(k) = u;
        traj.x.col(k + 1) = x;
    }
    traj.cost = running + x.dot(cost.QT * x);
    return traj;
}

std::vector<double> price_to_y(const std::vector<double>& log_returns, const TimeGrid& grid,
                               double r, double sigma) {
    grid.validate();
    if (!(sigma > 0.0)) throw std::invalid_argument("price_to_y: sigma must be > 0");
    if (log_returns.size() != static_cast<std::size_t>(grid.steps) + 1)
        throw std::invalid_argument("price_to_y: expected steps+1 log-return entries");
    std::vector<double> y(log_returns.size());
    for (std::size_t k = 0; k < y.size(); ++k) {
        const double t = grid.time(static_cast<int>(k)) - grid.t0;
        y[k] = (log_returns[k] + 0.5 * sigma * sigma * t - r * t) / sigma;
    }
    return y;
}

}  // namespace drbc
