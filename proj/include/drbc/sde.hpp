// ============================================================================
// sde.hpp - Euler-Maruyama simulation on a uniform time grid
// ============================================================================
//
// Types:
//  - TimeGrid:     uniform grid on [t0, t1] with `steps` intervals
//  - NoiseBlock:   materialized Brownian increments for a batch of paths
//                  (shared across policies for common-random-number designs)
//  - WealthPath:   wealth path X_t plus the observation process Y_t
//  - LqTrajectory: state/control series and accumulated quadratic cost
//
// Dynamics:
//  - Wealth (evaluation form): dX = X (r + pi_t (b - r)) dt + X sigma dW,
//    with the fraction policy pi_t evaluated at (t, Y_t) from the path
//    simulated so far (no look-ahead).  The observation process is
//    Y_t = (1/sigma) (b - r) t + W_t, identical to the price transform of
//    the risky asset dS = S (b dt + sigma dW).
//  - Linear-quadratic: dX = (A X + G u) dt + Sigma dW with u = policy(k,t,x)
//    clamped componentwise to [-u_clip, u_clip]; cost accumulates
//    (X' Q X + u' R u) dt at the left endpoint plus X_T' QT X_T.
//
// Guards: any non-finite state, |X| > 1e12, or non-positive wealth raises
// NonFinitePath.
// ============================================================================
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <vector>

#include "drbc/common.hpp"

namespace drbc {

// Blowup guard shared by all simulators.
constexpr double kStateBlowupGuard = 1e12;

struct TimeGrid {
    double t0 = 0.0;
    double t1 = 1.0;
    int steps = 1;

    double dt() const { return (t1 - t0) / static_cast<double>(steps); }
    double time(int k) const { return t0 + dt() * static_cast<double>(k); }
    void validate() const {
        if (steps < 1) throw std::invalid_argument("TimeGrid: steps must be >= 1");
        if (!(t1 > t0)) throw std::invalid_argument("TimeGrid: t1 must exceed t0");
    }
};

// Brownian increments, already scaled by sqrt(dt): data[p][k*dim + j] is the
// j-th component of path p's increment over [t_k, t_{k+1}].  Each path's
// stream is derived from (seed, path index), so the block is identical for
// any worker count and any subset of paths simulated.
struct NoiseBlock {
    int steps = 0;
    int dim = 0;
    std::vector<std::vector<double>> data;

    std::size_t paths() const { return data.size(); }
    const double* path(std::size_t p) const { return data[p].data(); }
};

NoiseBlock make_noise(const TimeGrid& grid, int dim, std::size_t n_paths, std::uint64_t seed);

// Fills `out` (size steps*dim) with one path's scaled increments; the same
// values NoiseBlock stores for (seed, path_index).
void fill_noise_path(const TimeGrid& grid, int dim, std::uint64_t seed,
                     std::uint64_t path_index, std::vector<double>& out);

struct WealthPath {
    std::vector<double> t;  // grid times, steps+1
    std::vector<double> x;  // wealth
    std::vector<double> y;  // observation process
};

using FractionFn = std::function<double(double t, double y)>;
using DriftFn = std::function<double(double t)>;

// Constant-drift wealth path using the provided increments (steps entries,
// sqrt(dt)-scaled).  `policy` is evaluated at every grid point with the path
// simulated so far.
WealthPath simulate_wealth(const TimeGrid& grid, double r, double sigma, double b,
                           double x0, const FractionFn& policy, const double* dw);

// Convenience overload: draws the increments from (seed, path_index).
WealthPath simulate_wealth(const TimeGrid& grid, double r, double sigma, double b,
                           double x0, const FractionFn& policy, std::uint64_t seed,
                           std::uint64_t path_index = 0);

// Time-varying deterministic drift b(t) (used by the drift-ablation truth).
WealthPath simulate_wealth_drift(const TimeGrid& grid, double r, double sigma,
                                 const DriftFn& b_of_t, double x0,
                                 const FractionFn& policy, const double* dw);

// Lean terminal-wealth-only variant for high-volume inner sampling; draws
// its own increments from rng.
double simulate_wealth_terminal(const TimeGrid& grid, double r, double sigma, double b,
                                double x0, const FractionFn& policy, std::mt19937_64& rng);

// Fixed-parameter linear dynamics and quadratic cost for one rollout.
struct LqDynamics {
    Eigen::MatrixXd A;      // d x d
    Eigen::MatrixXd G;      // d x k
    Eigen::MatrixXd Sigma;  // d x d diffusion coefficient
};

struct LqCost {
    Eigen::MatrixXd Q;   // d x d running state weight
    Eigen::MatrixXd R;   // k x k running control weight
    Eigen::MatrixXd QT;  // d x d terminal weight
};

struct LqTrajectory {
    Eigen::MatrixXd x;  // d x (steps+1)
    Eigen::MatrixXd u;  // k x steps
    double cost = 0.0;  // integral cost + terminal cost
};

// policy(k, t, x) -> control (k is the step index); components clamped to
// [-u_clip, u_clip] before being applied and costed.
using LqPolicyFn = std::function<Eigen::VectorXd(int k, double t, const Eigen::VectorXd& x)>;

LqTrajectory simulate_lq(const LqDynamics& dyn, const LqCost& cost, const TimeGrid& grid,
                         const Eigen::VectorXd& x0, const LqPolicyFn& policy, double u_clip,
                         const double* dw);

// Observation transform from cumulative log prices: given log(S_{t_k}/S_0)
// at the grid nodes (length steps+1, first entry 0), returns
// Y_{t_k} = (log(S/S0) + sigma^2 t / 2 - r t) / sigma.
std::vector<double> price_to_y(const std::vector<double>& log_returns, const TimeGrid& grid,
                               double r, double sigma);

}  // namespace drbc
