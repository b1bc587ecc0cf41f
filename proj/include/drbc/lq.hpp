// ============================================================================
// lq.hpp - Linear-quadratic control: Riccati solver, drift identification,
//          certainty-equivalent baseline, and robust policy learning
// ============================================================================
//
// The model is dX = (A(theta) X + G u) dt + Sigma dW with the drift unknown
// through a low-dimensional parameterization A(theta) = A0 + sum_j theta_j A_j
// and a quadratic cost int (X'QX + u'R u) dt + X_T' QT X_T.  Reward is the
// negated cost throughout.
//
// Pieces:
//  - riccati_solve:      backward RK4 for -P' = Q + A'P + PA - PGR^{-1}G'P,
//                        P(T) = QT; feedback gain K(t) = R^{-1}G'P(t); also
//                        exposes the exact mean cost of that controller.
//  - gls_estimate:       whitened (Sigma^{-1}) least squares for theta from
//                        one recorded trajectory; the control contribution
//                        G u_k dt is subtracted from the increments before
//                        regressing on the features [A_1 X_k, ..., A_m X_k].
//  - plugin_controller:  gls_estimate then riccati_solve at A(theta_hat)
//                        (the certainty-equivalent baseline).
//  - drbc_lq_learn:      maximizes the fixed-lambda dual objective
//                        -lambda*delta - lambda*log E_theta[exp(-Z/lambda)]
//                        with lambda = C_lam/sqrt(delta) over a linear-in-
//                        features gain class, by two-point simultaneous-
//                        perturbation gradient estimates fed to Adam.  The
//                        same state/noise draws are used at both perturbation
//                        endpoints, so a flat objective yields an exactly
//                        zero gradient estimate.
//
// The learned gain is K_psi(t) = sum_{p,c} psi[p,c] * (t/T)^p * g_c where
// g = [1, clamp(theta_hat, -3, 3)] are frozen belief features: a fixed
// polynomial-in-time basis crossed with an affine map of the (bounded,
// scale-normalized) drift estimate.  psi[p,c] are k x d matrices.  The
// time-constant block is initialized by a least-squares fit to the
// certainty-equivalent gains so the search starts from a sane policy.
// ============================================================================
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "drbc/common.hpp"
#include "drbc/sde.hpp"

namespace drbc {

struct LqModel {
    Eigen::MatrixXd A0;                   // d x d base drift
    std::vector<Eigen::MatrixXd> A_list;  // m drift directions, each d x d
    Eigen::MatrixXd G;                    // d x k actuation
    Eigen::MatrixXd Sigma;                // d x d diffusion
    Eigen::MatrixXd Q;                    // d x d running state weight (PSD)
    Eigen::MatrixXd QT;                   // d x d terminal weight (PSD)
    Eigen::MatrixXd Rmat;                 // k x k running control weight (PD)
    TimeGrid grid;

    int d() const { return static_cast<int>(A0.rows()); }
    int k() const { return static_cast<int>(G.cols()); }
    int m() const { return static_cast<int>(A_list.size()); }

    // A0 + sum_j theta_j A_j; theta must have m() entries.
    Eigen::MatrixXd A_of(const Eigen::VectorXd& theta) const;

    LqCost cost() const { return LqCost{Q, Rmat, QT}; }
    LqDynamics dynamics(const Eigen::VectorXd& theta) const {
        return LqDynamics{A_of(theta), G, Sigma};
    }

    // Checks dimension consistency, symmetry/PSD of Q and QT, PD of Rmat,
    // and the grid.  Throws std::invalid_argument on violation.
    void validate() const;
};

// Time-varying linear state feedback u = -K(t_j) x with componentwise clipping
// to [-clip, clip]; one gain per grid node (steps + 1 entries, the terminal
// gain is never applied but makes K(T) inspectable).
struct LqPolicy {
    std::vector<Eigen::MatrixXd> gains;  // each k x d
    double clip = std::numeric_limits<double>::infinity();

    void validate(const TimeGrid& grid) const;
};

// Adapter for sde::simulate_lq: u(k, t, x) = -gains[k] * x.
LqPolicyFn lq_policy_fn(const LqPolicy& policy);

// Drift estimate and its (unridged) information matrix.
struct BeliefFeatures {
    Eigen::VectorXd theta_hat;  // m
    Eigen::MatrixXd S_prec;     // m x m, symmetric PSD
};

struct RiccatiSolution {
    std::vector<Eigen::MatrixXd> P;  // value matrices, one per grid node
    LqPolicy policy;                 // K(t_j) = R^{-1} G' P(t_j), no clipping

    // Exact expected cost of this controller under the solved drift:
    // x0'P(0)x0 + int_0^T tr(Sigma Sigma' P(t)) dt (trapezoid in t).
    double mean_cost(const Eigen::VectorXd& x0, const LqModel& model) const;
    // Same with X0 ~ N(0, cov): tr(P(0) cov) + the trace integral.
    double mean_cost_cov(const Eigen::MatrixXd& cov, const LqModel& model) const;
};

// Backward RK4 integration of the Riccati equation on the model grid for the
// given drift matrix A.  Throws RiccatiBlowup if any node exceeds 1e12 in
// max-abs norm.  Every returned P is symmetrized; PSD up to roundoff.
RiccatiSolution riccati_solve(const LqModel& model, const Eigen::MatrixXd& A);

// Whitened least-squares drift identification from one trajectory:
//   r_k   = (X_{k+1} - X_k - G u_k dt)/dt - A0 X_k
//   Phi_k = [A_1 X_k, ..., A_m X_k]
//   theta_hat = (sum Phi~'Phi~ + ridge I)^{-1} sum Phi~'r~,  ~ = Sigma^{-1}(.)
// S_prec is the unridged normal matrix.  Throws SingularInformation when the
// ridge-regularized normal matrix is numerically singular.
BeliefFeatures gls_estimate(const LqTrajectory& traj, const LqModel& model, double ridge);

// Certainty-equivalent baseline: identify theta, then solve the Riccati
// equation at A(theta_hat).  Errors from both stages propagate.
LqPolicy plugin_controller(const LqTrajectory& traj, const LqModel& model, double ridge);

// Isotropic Gaussian parameter prior theta ~ N(mean, stddev^2 I); stddev = 0
// is a point mass at mean.
struct LqPrior {
    Eigen::VectorXd mean;
    double stddev = 1.0;

    Eigen::VectorXd sample(std::mt19937_64& rng) const;
};

struct LqLearnConfig {
    double C_lam = 1.0;     // lambda = C_lam / sqrt(delta)
    int N_theta = 32;       // prior draws per learning step
    int B_traj = 64;        // rollouts averaged per draw
    int S_in = 200;         // learning steps
    double eta = 0.01;      // Adam learning rate
    int basis_size = 3;     // max degree of the time-polynomial basis
    double u_clip = 50.0;   // componentwise control clip
    double spsa_c = 0.05;   // perturbation half-width
    double grad_clip = 10.0;   // gradient norm clip
    double x0_scale = 1.0;     // rollout starts X0 ~ N(0, x0_scale^2 I)
    double reward_floor = -1e6;  // contribution of an exploded rollout
    int workers = 1;
};

struct LqLearnResult {
    LqPolicy policy;
    Eigen::VectorXd psi;                 // flattened gain coefficients
    std::vector<double> objective_trace;  // dual objective estimate per step
    double final_grad_norm = 0.0;         // last raw (unclipped) SPSA estimate
    double lambda = 0.0;
};

// Robust policy learning against the fixed-lambda KL dual objective.  Belief
// features are frozen for the whole run; identical (X0, noise) draws are used
// at both perturbation endpoints of every step.  Requires delta > 0.
LqLearnResult drbc_lq_learn(const LqModel& model, const LqPrior& prior, double delta,
                            const LqLearnConfig& config, const BeliefFeatures& belief,
                            std::uint64_t seed);

// Reward convention: the negated accumulated cost of a completed rollout.
double lq_reward(const LqTrajectory& traj);

// Synthetic drift family used by the benchmark experiments: A0 tridiagonal
// (diag, upper, lower bands), each A_j = aj_diag * D_j + aj_off * O_j with
// D_j a random diagonal and O_j a random zero-diagonal matrix, both
// Frobenius-normalized; G actuates the first k coordinates.
struct DriftFamily {
    Eigen::MatrixXd A0;
    std::vector<Eigen::MatrixXd> A_list;
    Eigen::MatrixXd G;
};

DriftFamily synthetic_drift_family(int d, int k, int m, std::uint64_t seed,
                                   double diag = -0.6, double upper = 0.15,
                                   double lower = -0.1, double aj_diag = 0.2,
                                   double aj_off = 0.05);

// JSON round trip: matrices as row-major arrays.
std::string to_json_string(const LqModel& model);
LqModel lq_model_from_json(const std::string& text);
std::string to_json_string(const LqPolicy& policy, const TimeGrid& grid);

}  // namespace drbc
