#include "drbc/lq.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace drbc {

namespace {

void require_symmetric(const Eigen::MatrixXd& M, const char* name) {
    const double scale = 1.0 + M.cwiseAbs().maxCoeff();
    if ((M - M.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
        throw std::invalid_argument(std::string("LqModel: ") + name + " must be symmetric");
    }
}

double min_eigenvalue(const Eigen::MatrixXd& M) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M, Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

// tr(Sigma Sigma' P) for symmetric P.
double noise_trace(const Eigen::MatrixXd& sig_sq, const Eigen::MatrixXd& P) {
    return sig_sq.cwiseProduct(P).sum();
}

}  // namespace

Eigen::MatrixXd LqModel::A_of(const Eigen::VectorXd& theta) const {
    if (theta.size() != m()) {
        throw std::invalid_argument("LqModel::A_of: theta has wrong dimension");
    }
    Eigen::MatrixXd A = A0;
    for (int j = 0; j < m(); ++j) A += theta[j] * A_list[static_cast<std::size_t>(j)];
    return A;
}

void LqModel::validate() const {
    const int dd = d();
    const int kk = k();
    if (dd < 1 || kk < 1) throw std::invalid_argument("LqModel: empty state or control space");
    if (A0.rows() != dd || A0.cols() != dd)
        throw std::invalid_argument("LqModel: A0 must be square");
    for (const auto& Aj : A_list) {
        if (Aj.rows() != dd || Aj.cols() != dd)
            throw std::invalid_argument("LqModel: every A_j must be d x d");
    }
    if (G.rows() != dd) throw std::invalid_argument("LqModel: G must have d rows");
    if (Sigma.rows() != dd || Sigma.cols() != dd)
        throw std::invalid_argument("LqModel: Sigma must be d x d");
    if (Q.rows() != dd || Q.cols() != dd || QT.rows() != dd || QT.cols() != dd)
        throw std::invalid_argument("LqModel: Q and QT must be d x d");
    if (Rmat.rows() != kk || Rmat.cols() != kk)
        throw std::invalid_argument("LqModel: R must be k x k");
    require_symmetric(Q, "Q");
    require_symmetric(QT, "QT");
    require_symmetric(Rmat, "R");
    const double qeps = -1e-10 * (1.0 + Q.cwiseAbs().maxCoeff());
    if (min_eigenvalue(Q) < qeps) throw std::invalid_argument("LqModel: Q must be PSD");
    const double qteps = -1e-10 * (1.0 + QT.cwiseAbs().maxCoeff());
    if (min_eigenvalue(QT) < qteps) throw std::invalid_argument("LqModel: QT must be PSD");
    if (min_eigenvalue(Rmat) <= 0.0) throw std::invalid_argument("LqModel: R must be PD");
    grid.validate();
}

void LqPolicy::validate(const TimeGrid& grid) const {
    if (gains.size() != static_cast<std::size_t>(grid.steps + 1)) {
        throw std::invalid_argument("LqPolicy: need one gain per grid node");
    }
    for (const auto& K : gains) {
        if (!K.allFinite()) throw std::invalid_argument("LqPolicy: non-finite gain");
    }
}

LqPolicyFn lq_policy_fn(const LqPolicy& policy) {
    // Copy the gains so the callable outlives the policy object.
    auto gains = std::make_shared<std::vector<Eigen::MatrixXd>>(policy.gains);
    return [gains](int k, double /*t*/, const Eigen::VectorXd& x) -> Eigen::VectorXd {
        return -(*gains)[static_cast<std::size_t>(k)] * x;
    };
}

double RiccatiSolution::mean_cost(const Eigen::VectorXd& x0, const LqModel& model) const {
    return x0.dot(P.front() * x0) + mean_cost_cov(Eigen::MatrixXd::Zero(model.d(), model.d()), model);
}

double RiccatiSolution::mean_cost_cov(const Eigen::MatrixXd& cov, const LqModel& model) const {
    const Eigen::MatrixXd sig_sq = model.Sigma * model.Sigma.transpose();
    const double dt = model.grid.dt();
    double integral = 0.5 * (noise_trace(sig_sq, P.front()) + noise_trace(sig_sq, P.back()));
    for (std::size_t j = 1; j + 1 < P.size(); ++j) integral += noise_trace(sig_sq, P[j]);
    return (P.front().cwiseProduct(cov)).sum() + dt * integral;
}

RiccatiSolution riccati_solve(const LqModel& model, const Eigen::MatrixXd& A) {
    model.validate();
    if (A.rows() != model.d() || A.cols() != model.d()) {
        throw std::invalid_argument("riccati_solve: A must be d x d");
    }
    const int steps = model.grid.steps;
    const double dt = model.grid.dt();
    const Eigen::LLT<Eigen::MatrixXd> r_llt(model.Rmat);
    const Eigen::MatrixXd GRG = model.G * r_llt.solve(model.G.transpose());

    // -P' = Q + A'P + PA - P GRG P; integrate in time-to-go s = T - t, where
    // dP/ds equals the right-hand side.
    const auto rhs = [&](const Eigen::MatrixXd& P) -> Eigen::MatrixXd {
        return model.Q + A.transpose() * P + P * A - P * GRG * P;
    };

    std::vector<Eigen::MatrixXd> P(static_cast<std::size_t>(steps) + 1);
    P[static_cast<std::size_t>(steps)] = model.QT;
    for (int j = steps; j >= 1; --j) {
        const Eigen::MatrixXd& cur = P[static_cast<std::size_t>(j)];
        const Eigen::MatrixXd k1 = rhs(cur);
        const Eigen::MatrixXd k2 = rhs(cur + 0.5 * dt * k1);
        const Eigen::MatrixXd k3 = rhs(cur + 0.5 * dt * k2);
        const Eigen::MatrixXd k4 = rhs(cur + dt * k3);
        Eigen::MatrixXd next = cur + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        next = 0.5 * (next + next.transpose()).eval();
        if (!next.allFinite() || next.cwiseAbs().maxCoeff() > kStateBlowupGuard) {
            throw RiccatiBlowup("riccati_solve: value matrix exceeded the blowup guard");
        }
        P[static_cast<std::size_t>(j - 1)] = std::move(next);
    }

    RiccatiSolution sol;
    sol.policy.gains.resize(P.size());
    for (std::size_t j = 0; j < P.size(); ++j) {
        sol.policy.gains[j] = r_llt.solve(model.G.transpose() * P[j]);
    }
    sol.P = std::move(P);
    return sol;
}

BeliefFeatures gls_estimate(const LqTrajectory& traj, const LqModel& model, double ridge) {
    model.validate();
    if (ridge < 0.0) throw std::invalid_argument("gls_estimate: ridge must be >= 0");
    const int m = model.m();
    const int dd = model.d();
    const int steps = static_cast<int>(traj.u.cols());
    if (traj.x.cols() != steps + 1 || traj.x.rows() != dd) {
        throw std::invalid_argument("gls_estimate: trajectory shape mismatch");
    }
    if (m == 0) return BeliefFeatures{Eigen::VectorXd(0), Eigen::MatrixXd(0, 0)};

    const double dt = model.grid.dt();
    const Eigen::PartialPivLU<Eigen::MatrixXd> sigma_lu(model.Sigma);
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(m, m);
    Eigen::VectorXd v = Eigen::VectorXd::Zero(m);
    Eigen::MatrixXd phi(dd, m);
    for (int k = 0; k < steps; ++k) {
        const Eigen::VectorXd xk = traj.x.col(k);
        const Eigen::VectorXd dy = traj.x.col(k + 1) - xk - model.G * traj.u.col(k) * dt;
        const Eigen::VectorXd r = dy / dt - model.A0 * xk;
        for (int j = 0; j < m; ++j) phi.col(j) = model.A_list[static_cast<std::size_t>(j)] * xk;
        const Eigen::MatrixXd phi_w = sigma_lu.solve(phi);
        const Eigen::VectorXd r_w = sigma_lu.solve(r);
        M.noalias() += phi_w.transpose() * phi_w;
        v.noalias() += phi_w.transpose() * r_w;
    }

    const Eigen::MatrixXd M_ridge = M + ridge * Eigen::MatrixXd::Identity(m, m);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M_ridge, Eigen::EigenvaluesOnly);
    const double max_eig = es.eigenvalues().maxCoeff();
    if (es.eigenvalues().minCoeff() <= 1e-12 * std::max(1.0, max_eig)) {
        throw SingularInformation("gls_estimate: normal matrix is numerically singular");
    }
    BeliefFeatures belief;
    belief.theta_hat = M_ridge.ldlt().solve(v);
    belief.S_prec = M;
    return belief;
}

LqPolicy plugin_controller(const LqTrajectory& traj, const LqModel& model, double ridge) {
    const BeliefFeatures belief = gls_estimate(traj, model, ridge);
    return riccati_solve(model, model.A_of(belief.theta_hat)).policy;
}

Eigen::VectorXd LqPrior::sample(std::mt19937_64& rng) const {
    Eigen::VectorXd theta = mean;
    if (stddev != 0.0) {
        std::normal_distribution<double> normal(0.0, 1.0);
        for (Eigen::Index j = 0; j < theta.size(); ++j) theta[j] += stddev * normal(rng);
    }
    return theta;
}

double lq_reward(const LqTrajectory& traj) { return -traj.cost; }

namespace {

// Gain basis: coefficient (p, c) at node j is (t_j normalized)^p * g_c, with
// g the frozen belief feature vector [1, clamp(theta_hat, -3, 3)].
struct GainBasis {
    Eigen::MatrixXd coeff;  // (steps + 1) x n_basis
    int k = 0;
    int d = 0;

    int n_basis() const { return static_cast<int>(coeff.cols()); }
    int n_params() const { return n_basis() * k * d; }

    // psi is flat, blocked by basis index: entry (idx, a, b) at
    // psi[(idx * k + a) * d + b].
    std::vector<Eigen::MatrixXd> materialize(const Eigen::VectorXd& psi) const {
        const int nodes = static_cast<int>(coeff.rows());
        std::vector<Eigen::MatrixXd> gains(static_cast<std::size_t>(nodes));
        for (int j = 0; j < nodes; ++j) {
            Eigen::MatrixXd K = Eigen::MatrixXd::Zero(k, d);
            for (int idx = 0; idx < n_basis(); ++idx) {
                const double w = coeff(j, idx);
                if (w == 0.0) continue;
                K += w * Eigen::Map<const Eigen::MatrixXd>(
                             psi.data() + static_cast<std::ptrdiff_t>(idx) * k * d, d, k)
                             .transpose();
            }
            gains[static_cast<std::size_t>(j)] = K;
        }
        return gains;
    }
};

GainBasis make_gain_basis(const LqModel& model, const BeliefFeatures& belief, int basis_size) {
    const int m = model.m();
    if (belief.theta_hat.size() != m) {
        throw std::invalid_argument("drbc_lq_learn: belief dimension mismatch");
    }
    Eigen::VectorXd g(m + 1);
    g[0] = 1.0;
    for (int j = 0; j < m; ++j) g[j + 1] = std::clamp(belief.theta_hat[j], -3.0, 3.0);

    const int nodes = model.grid.steps + 1;
    const int degrees = basis_size + 1;
    GainBasis basis;
    basis.k = model.k();
    basis.d = model.d();
    basis.coeff.resize(nodes, degrees * (m + 1));
    const double span = model.grid.t1 - model.grid.t0;
    for (int j = 0; j < nodes; ++j) {
        const double tau = (model.grid.time(j) - model.grid.t0) / span;
        double tp = 1.0;
        for (int p = 0; p < degrees; ++p) {
            for (int c = 0; c <= m; ++c) basis.coeff(j, p * (m + 1) + c) = tp * g[c];
            tp *= tau;
        }
    }
    return basis;
}

// Least-squares fit of the basis to a target gain sequence (used to start the
// search at the certainty-equivalent controller).  The crossed basis is
// rank-deficient for a fixed belief, so a small ridge picks one solution.
Eigen::VectorXd fit_basis_to_gains(const GainBasis& basis,
                                   const std::vector<Eigen::MatrixXd>& target) {
    const int nodes = static_cast<int>(basis.coeff.rows());
    const int nb = basis.n_basis();
    const int kd = basis.k * basis.d;
    Eigen::MatrixXd Y(nodes, kd);
    for (int j = 0; j < nodes; ++j) {
        for (int a = 0; a < basis.k; ++a)
            for (int b = 0; b < basis.d; ++b)
                Y(j, a * basis.d + b) = target[static_cast<std::size_t>(j)](a, b);
    }
    const Eigen::MatrixXd gram = basis.coeff.transpose() * basis.coeff +
                                 1e-8 * Eigen::MatrixXd::Identity(nb, nb);
    const Eigen::MatrixXd B = gram.ldlt().solve(basis.coeff.transpose() * Y);
    Eigen::VectorXd psi = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(nb) * kd);
    for (int idx = 0; idx < nb; ++idx)
        for (int a = 0; a < basis.k; ++a)
            for (int b = 0; b < basis.d; ++b)
                psi[(static_cast<Eigen::Index>(idx) * basis.k + a) * basis.d + b] =
                    B(idx, a * basis.d + b);
    return psi;
}

}  // namespace

LqLearnResult drbc_lq_learn(const LqModel& model, const LqPrior& prior, double delta,
                            const LqLearnConfig& config, const BeliefFeatures& belief,
                            std::uint64_t seed) {
    model.validate();
    if (!(delta > 0.0)) throw std::invalid_argument("drbc_lq_learn: delta must be positive");
    if (config.N_theta < 1 || config.B_traj < 1 || config.S_in < 1 || config.basis_size < 0) {
        throw std::invalid_argument("drbc_lq_learn: invalid learning configuration");
    }
    if (prior.mean.size() != model.m() || prior.stddev < 0.0) {
        throw std::invalid_argument("drbc_lq_learn: invalid prior");
    }
    const double lambda = config.C_lam / std::sqrt(delta);
    const GainBasis basis = make_gain_basis(model, belief, config.basis_size);
    const int n_params = basis.n_params();
    const int dd = model.d();
    const int steps = model.grid.steps;
    const double sqrt_dt = std::sqrt(model.grid.dt());
    const LqCost cost = model.cost();

    // Start from the certainty-equivalent gains at the (clamped) estimate;
    // fall back to the zero policy if that Riccati solve blows up.
    Eigen::VectorXd psi = Eigen::VectorXd::Zero(n_params);
    {
        Eigen::VectorXd theta_c = belief.theta_hat;
        for (Eigen::Index j = 0; j < theta_c.size(); ++j)
            theta_c[j] = std::clamp(theta_c[j], -3.0, 3.0);
        try {
            psi = fit_basis_to_gains(basis, riccati_solve(model, model.A_of(theta_c)).policy.gains);
        } catch (const RiccatiBlowup&) {
            psi.setZero();
        }
    }

    // Dual objective -lambda*delta - lambda*log mean_i exp(-Z_i/lambda) for a
    // fixed draw set; each Z_i averages B_traj rollouts whose (X0, noise)
    // streams are derived from noise_seed, shared across both perturbation
    // endpoints of a step (common random numbers).
    const auto objective = [&](const Eigen::VectorXd& psi_eval,
                               const std::vector<Eigen::VectorXd>& thetas,
                               std::uint64_t noise_seed) -> double {
        const auto gains = basis.materialize(psi_eval);
        const LqPolicyFn policy = [&gains](int k, double, const Eigen::VectorXd& x) {
            return Eigen::VectorXd(-gains[static_cast<std::size_t>(k)] * x);
        };
        const std::size_t n_roll =
            static_cast<std::size_t>(config.N_theta) * static_cast<std::size_t>(config.B_traj);
        std::vector<double> rewards(n_roll);
        parallel_for(n_roll, config.workers, [&](std::size_t id) {
            const std::size_t i = id / static_cast<std::size_t>(config.B_traj);
            auto rng = make_rng(derive_seed(noise_seed, id));
            std::normal_distribution<double> normal(0.0, 1.0);
            Eigen::VectorXd x0(dd);
            for (int a = 0; a < dd; ++a) x0[a] = config.x0_scale * normal(rng);
            std::vector<double> dw(static_cast<std::size_t>(steps) * dd);
            for (double& w : dw) w = sqrt_dt * normal(rng);
            const LqDynamics dyn = model.dynamics(thetas[i]);
            try {
                rewards[id] =
                    lq_reward(simulate_lq(dyn, cost, model.grid, x0, policy, config.u_clip,
                                          dw.data()));
            } catch (const NonFinitePath&) {
                rewards[id] = config.reward_floor;
            }
        });
        std::vector<double> scaled(static_cast<std::size_t>(config.N_theta));
        for (int i = 0; i < config.N_theta; ++i) {
            double z = 0.0;
            for (int b = 0; b < config.B_traj; ++b)
                z += rewards[static_cast<std::size_t>(i) * config.B_traj + b];
            z /= config.B_traj;
            scaled[static_cast<std::size_t>(i)] = -z / lambda;
        }
        return -lambda * delta -
               lambda * (logsumexp(scaled) - std::log(static_cast<double>(config.N_theta)));
    };

    LqLearnResult result;
    result.lambda = lambda;
    result.objective_trace.reserve(static_cast<std::size_t>(config.S_in));

    Eigen::VectorXd adam_m = Eigen::VectorXd::Zero(n_params);
    Eigen::VectorXd adam_v = Eigen::VectorXd::Zero(n_params);
    const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

    std::vector<Eigen::VectorXd> thetas(static_cast<std::size_t>(config.N_theta));
    Eigen::VectorXd direction(n_params);
    for (int s = 0; s < config.S_in; ++s) {
        const std::uint64_t step_seed = derive_seed(seed, static_cast<std::uint64_t>(s));
        auto rng = make_rng(derive_seed(step_seed, 1));
        for (auto& theta : thetas) theta = prior.sample(rng);
        for (int q = 0; q < n_params; ++q)
            direction[q] = (rng() & 1u) ? 1.0 : -1.0;
        const std::uint64_t noise_seed = derive_seed(step_seed, 2);

        const double j_plus = objective(psi + config.spsa_c * direction, thetas, noise_seed);
        const double j_minus = objective(psi - config.spsa_c * direction, thetas, noise_seed);
        Eigen::VectorXd grad = ((j_plus - j_minus) / (2.0 * config.spsa_c)) * direction;
        result.final_grad_norm = grad.norm();
        if (result.final_grad_norm > config.grad_clip) {
            grad *= config.grad_clip / result.final_grad_norm;
        }

        adam_m = beta1 * adam_m + (1.0 - beta1) * grad;
        adam_v = beta2 * adam_v + (1.0 - beta2) * grad.cwiseAbs2();
        const double bias1 = 1.0 - std::pow(beta1, s + 1);
        const double bias2 = 1.0 - std::pow(beta2, s + 1);
        for (int q = 0; q < n_params; ++q) {
            psi[q] += config.eta * (adam_m[q] / bias1) /
                      (std::sqrt(adam_v[q] / bias2) + adam_eps);
        }
        result.objective_trace.push_back(0.5 * (j_plus + j_minus));
    }

    result.psi = psi;
    result.policy.gains = basis.materialize(psi);
    result.policy.clip = config.u_clip;
    return result;
}

DriftFamily synthetic_drift_family(int d, int k, int m, std::uint64_t seed, double diag,
                                   double upper, double lower, double aj_diag, double aj_off) {
    if (d < 1 || k < 1 || k > d || m < 0) {
        throw std::invalid_argument("synthetic_drift_family: bad dimensions");
    }
    DriftFamily fam;
    fam.A0 = Eigen::MatrixXd::Zero(d, d);
    for (int i = 0; i < d; ++i) {
        fam.A0(i, i) = diag;
        if (i + 1 < d) {
            fam.A0(i, i + 1) = upper;
            fam.A0(i + 1, i) = lower;
        }
    }
    auto rng = make_rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    fam.A_list.reserve(static_cast<std::size_t>(m));
    for (int j = 0; j < m; ++j) {
        Eigen::MatrixXd D = Eigen::MatrixXd::Zero(d, d);
        for (int i = 0; i < d; ++i) D(i, i) = normal(rng);
        D /= D.norm();
        Eigen::MatrixXd O = Eigen::MatrixXd::Zero(d, d);
        for (int r = 0; r < d; ++r)
            for (int c = 0; c < d; ++c)
                if (r != c) O(r, c) = normal(rng);
        O /= O.norm();
        fam.A_list.push_back(aj_diag * D + aj_off * O);
    }
    fam.G = Eigen::MatrixXd::Zero(d, k);
    for (int i = 0; i < k; ++i) fam.G(i, i) = 1.0;
    return fam;
}

namespace {

nlohmann::json mat_to_json(const Eigen::MatrixXd& M) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < M.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < M.cols(); ++c) row.push_back(M(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

Eigen::MatrixXd mat_from_json(const nlohmann::json& rows) {
    const auto n_rows = rows.size();
    if (n_rows == 0) return Eigen::MatrixXd(0, 0);
    const auto n_cols = rows.at(0).size();
    Eigen::MatrixXd M(static_cast<Eigen::Index>(n_rows), static_cast<Eigen::Index>(n_cols));
    for (std::size_t r = 0; r < n_rows; ++r) {
        if (rows.at(r).size() != n_cols) throw Error("lq json: ragged matrix rows");
        for (std::size_t c = 0; c < n_cols; ++c)
            M(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                rows.at(r).at(c).get<double>();
    }
    return M;
}

}  // namespace

std::string to_json_string(const LqModel& model) {
    nlohmann::json j;
    j["A0"] = mat_to_json(model.A0);
    j["A_list"] = nlohmann::json::array();
    for (const auto& Aj : model.A_list) j["A_list"].push_back(mat_to_json(Aj));
    j["G"] = mat_to_json(model.G);
    j["Sigma"] = mat_to_json(model.Sigma);
    j["Q"] = mat_to_json(model.Q);
    j["QT"] = mat_to_json(model.QT);
    j["R"] = mat_to_json(model.Rmat);
    j["grid"] = {{"t0", model.grid.t0}, {"t1", model.grid.t1}, {"steps", model.grid.steps}};
    return j.dump(2);
}

LqModel lq_model_from_json(const std::string& text) {
    const nlohmann::json j = nlohmann::json::parse(text);
    LqModel model;
    model.A0 = mat_from_json(j.at("A0"));
    for (const auto& aj : j.at("A_list")) model.A_list.push_back(mat_from_json(aj));
    model.G = mat_from_json(j.at("G"));
    model.Sigma = mat_from_json(j.at("Sigma"));
    model.Q = mat_from_json(j.at("Q"));
    model.QT = mat_from_json(j.at("QT"));
    model.Rmat = mat_from_json(j.at("R"));
    model.grid.t0 = j.at("grid").at("t0").get<double>();
    model.grid.t1 = j.at("grid").at("t1").get<double>();
    model.grid.steps = j.at("grid").at("steps").get<int>();
    model.validate();
    return model;
}

std::string to_json_string(const LqPolicy& policy, const TimeGrid& grid) {
    policy.validate(grid);
    nlohmann::json j;
    j["clip"] = policy.clip;
    j["times"] = nlohmann::json::array();
    j["gains"] = nlohmann::json::array();
    for (std::size_t idx = 0; idx < policy.gains.size(); ++idx) {
        j["times"].push_back(grid.time(static_cast<int>(idx)));
        j["gains"].push_back(mat_to_json(policy.gains[idx]));
    }
    return j.dump(2);
}

}  // namespace drbc
