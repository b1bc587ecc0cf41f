#include <doctest.h>

#include "drbc/common.hpp"
#include "drbc/dual.hpp"
#include "drbc/priors.hpp"
#include "oracles.hpp"

#include <cmath>
#include <memory>
#include <vector>

using namespace drbc;

namespace {

FinitePrior demo_prior() {
    return FinitePrior::from_scalars({0.01, 0.46, 0.30, 0.21, 0.27},
                                     {0.05, 0.35, 0.35, 0.15, 0.10});
}

double demo_z(double b) { return (b - 0.2) * (b - 0.2) + 0.1 * b; }

// Inner simulator whose conditional mean given b is b(0): samples are
// b(0) + Uniform[-h, h].
InnerSimulator noisy_inner(double halfwidth) {
    InnerSimulator sim;
    sim.lower_bound = std::nullopt;
    sim.open = [halfwidth](const Eigen::VectorXd& b, std::uint64_t seed) -> InnerStream {
        auto rng = std::make_shared<std::mt19937_64>(make_rng(seed));
        const double z = b(0);
        return [rng, z, halfwidth]() {
            std::uniform_real_distribution<double> u(-halfwidth, halfwidth);
            return z + u(*rng);
        };
    };
    return sim;
}

OuterSampler constant_outer(double b) {
    return [b](std::size_t n, std::uint64_t) {
        return std::vector<Eigen::VectorXd>(n, Eigen::VectorXd::Constant(1, b));
    };
}

}  // namespace

TEST_CASE("RmlmcParams validation enforces the geometric-rate window") {
    CHECK_THROWS_AS((RmlmcParams{-1, 0.65}.validate()), std::invalid_argument);
    CHECK_THROWS_AS((RmlmcParams{3, 0.50}.validate()), std::invalid_argument);
    CHECK_THROWS_AS((RmlmcParams{3, 0.75}.validate()), std::invalid_argument);
    CHECK_NOTHROW((RmlmcParams{3, 0.6501}.validate()));
}

TEST_CASE("rmlmc_draw collapses when the inner simulator is exact") {
    const InnerSimulator inner = make_exact_inner([](const Eigen::VectorXd& b) {
        return demo_z(b(0));
    });
    const RmlmcParams params{3, 0.65};
    const Eigen::VectorXd b = Eigen::VectorXd::Constant(1, 0.46);
    for (std::uint64_t s = 0; s < 50; ++s) {
        const RmlmcDraw d = rmlmc_draw(inner, b, params, s);
        const double z = demo_z(0.46);
        CHECK(d.base_avg == doctest::Approx(z).epsilon(1e-14));
        CHECK(d.fine_avg == doctest::Approx(z).epsilon(1e-14));
        CHECK(d.odd_avg == doctest::Approx(z).epsilon(1e-14));
        CHECK(d.even_avg == doctest::Approx(z).epsilon(1e-14));
        // zero inner variance: the multilevel correction vanishes up to
        // rounding noise amplified by the inverse level probability
        CHECK(rmlmc_apply(d, 0.7) == doctest::Approx(std::exp(-z / 0.7)).epsilon(1e-9));
    }
}

TEST_CASE("rmlmc_draw levels follow the geometric law") {
    const InnerSimulator inner = make_exact_inner([](const Eigen::VectorXd&) { return 1.0; });
    const RmlmcParams params{3, 0.65};
    const Eigen::VectorXd b = Eigen::VectorXd::Zero(1);
    const int n = 200000;
    std::vector<int> counts(12, 0);
    for (int i = 0; i < n; ++i) {
        const RmlmcDraw d = rmlmc_draw(inner, b, params, derive_seed(17, i));
        const int j = d.level - params.n0;
        REQUIRE(j >= 0);
        if (j < static_cast<int>(counts.size())) ++counts[j];
        CHECK(d.p_level ==
              doctest::Approx(0.65 * std::pow(0.35, j)).epsilon(1e-12));
    }
    for (int j = 0; j < 6; ++j) {
        const double want = 0.65 * std::pow(0.35, j);
        const double got = counts[j] / static_cast<double>(n);
        CHECK(std::abs(got - want) < 0.005);
    }
}

TEST_CASE("rmlmc estimator is unbiased where the naive plug-in is biased") {
    // Fixed outer parameter b = 2, inner noise Uniform[-1, 1]: the target is
    // exp(-2/lambda).  The plug-in transform of a finite average carries a
    // strictly positive Jensen bias; the multilevel correction removes it.
    const double lambda = 1.0;
    const double target = std::exp(-2.0);
    const RmlmcParams params{3, 0.65};
    const InnerSimulator inner = noisy_inner(1.0);
    const RmlmcBatch batch = rmlmc_batch(inner, constant_outer(2.0), 300000, params, 91, 4);

    RunningStat corrected, plugin;
    for (const RmlmcDraw& d : batch.draws) {
        corrected.add(rmlmc_apply(d, lambda));
        plugin.add(phi_transform(d.base_avg, lambda));
    }
    CHECK(std::abs(corrected.mean() - target) < 5.0 * corrected.std_error());
    CHECK(plugin.mean() - target > 10.0 * plugin.std_error());
}

TEST_CASE("rmlmc batches are deterministic for any worker count") {
    const RmlmcParams params{3, 0.65};
    const InnerSimulator inner = noisy_inner(0.5);
    OuterSampler outer = [](std::size_t n, std::uint64_t seed) {
        return sample_prior(demo_prior(), n, seed);
    };
    const RmlmcBatch a = rmlmc_batch(inner, outer, 5000, params, 123, 1);
    const RmlmcBatch b = rmlmc_batch(inner, outer, 5000, params, 123, 4);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a.draws[i].level == b.draws[i].level);
        CHECK(a.draws[i].base_avg == b.draws[i].base_avg);
        CHECK(a.draws[i].fine_avg == b.draws[i].fine_avg);
        CHECK(a.draws[i].odd_avg == b.draws[i].odd_avg);
        CHECK(a.draws[i].even_avg == b.draws[i].even_avg);
    }
    // single-draw convenience wrapper reuses the same per-seed stream
    const Eigen::VectorXd bvec = Eigen::VectorXd::Constant(1, 0.3);
    CHECK(rmlmc_single(inner, bvec, 0.8, params, 5) ==
          rmlmc_apply(rmlmc_draw(inner, bvec, params, 5), 0.8));
}

TEST_CASE("rmlmc_derivative matches a finite difference on the same batch") {
    const RmlmcParams params{3, 0.65};
    const InnerSimulator inner = noisy_inner(0.5);
    const RmlmcBatch batch = rmlmc_batch(inner, constant_outer(1.5), 2000, params, 7, 2);
    for (double lambda : {0.6, 1.0, 2.5}) {
        const double h = 1e-5 * lambda;
        const double fd = (rmlmc_estimate_M(batch, lambda + h).m -
                           rmlmc_estimate_M(batch, lambda - h).m) /
                          (2.0 * h);
        CHECK(rmlmc_derivative(batch, lambda).m == doctest::Approx(fd).epsilon(1e-6));
    }
}

TEST_CASE("kl_dual_objective and the lambda bounds behave at the edges") {
    CHECK(kl_dual_objective(2.0, 0.1, 0.5) ==
          doctest::Approx(-2.0 * 0.1 - 2.0 * std::log(0.5)));
    CHECK_THROWS_AS(kl_dual_objective(2.0, 0.1, 0.0), NonPositiveM);
    CHECK_THROWS_AS(kl_dual_objective(2.0, 0.1, -1.0), NonPositiveM);
    CHECK(lambda_upper_bound(3.0, 1.0, 0.5) == doctest::Approx(4.0));
    CHECK(std::isinf(lambda_upper_bound(3.0, 1.0, 0.0)));
    CHECK(lambda_upper_bound(1.0, 1.0, 0.5) == 0.0);
    CHECK(lambda_floor(0.0) == doctest::Approx(1e-6));
    CHECK(lambda_floor(-50.0) == doctest::Approx(5e-5));
}

TEST_CASE("kl_dual_value_finite matches the dense-grid oracle") {
    const FinitePrior prior = demo_prior();
    const std::vector<double> z{1.0, 4.0, 2.5, 0.5, 3.0};
    for (double delta : {0.01, 0.1, 0.5, 2.0}) {
        const DualValue got = kl_dual_value_finite(prior, z, delta);
        const double want = oracles::kl_dual_grid(prior.probs, z, delta);
        CHECK(got.value == doctest::Approx(want).epsilon(1e-6));
    }
}

TEST_CASE("kl_dual_value_finite agrees with the primal worst case") {
    // strong duality: the dual over lambda equals the tilted primal infimum
    const FinitePrior prior = demo_prior();
    const std::vector<double> z{1.0, 4.0, 2.5, 0.5, 3.0};
    for (double delta : {0.05, 0.3}) {
        const double dual = kl_dual_value_finite(prior, z, delta).value;
        const double primal = primal_inner_inf(prior, z, delta).value;
        CHECK(dual == doctest::Approx(primal).epsilon(1e-6));
    }
}

TEST_CASE("kl_dual_value_finite handles the radius extremes") {
    const FinitePrior prior = demo_prior();
    const std::vector<double> z{1.0, 4.0, 2.5, 0.5, 3.0};
    double mean = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) mean += prior.probs[i] * z[i];

    const DualValue at_zero = kl_dual_value_finite(prior, z, 0.0);
    CHECK(at_zero.value == doctest::Approx(mean));
    CHECK(std::isinf(at_zero.lambda_star));

    // enormous radius: the worst case concentrates near the smallest payoff
    CHECK(kl_dual_value_finite(prior, z, 50.0).value == doctest::Approx(0.5).epsilon(5e-3));

    // radius monotonicity
    double prev = mean;
    for (double delta : {0.01, 0.1, 0.5, 2.0}) {
        const double v = kl_dual_value_finite(prior, z, delta).value;
        CHECK(v < prev + 1e-12);
        prev = v;
    }

    // constant payoffs: the value is that constant for every radius
    CHECK(kl_dual_value_finite(prior, {2.0, 2.0, 2.0, 2.0, 2.0}, 0.7).value ==
          doctest::Approx(2.0).epsilon(1e-9));

    CHECK_THROWS_AS(kl_dual_value_finite(prior, {1.0, 2.0}, 0.1), SupportMismatch);
}

TEST_CASE("evaluate_policy_kl recovers the exact dual value with an exact inner") {
    const FinitePrior prior = demo_prior();
    std::vector<double> z_atoms;
    for (std::size_t i = 0; i < prior.size(); ++i)
        z_atoms.push_back(demo_z(prior.scalar_atom(i)));
    const InnerSimulator inner = make_exact_inner([](const Eigen::VectorXd& b) {
        return demo_z(b(0));
    });
    const RmlmcParams params{3, 0.65};

    const double delta = 0.1;
    const double truth = kl_dual_value_finite(prior, z_atoms, delta).value;

    AscentConfig cfg;
    cfg.n_outer = 20000;
    cfg.max_iters = 25;
    cfg.seed = 3;
    cfg.workers = 2;
    const DualEvalResult res = evaluate_policy_kl(inner, prior, delta, params, cfg);
    CHECK(std::abs(res.robust_value - truth) < 6.0 * res.std_err + 1e-3);
    CHECK(res.lambda_star > 0.0);
    CHECK(res.std_err > 0.0);
    CHECK(res.n_outer >= cfg.n_outer);

    // the robust value must sit strictly below the plain expected payoff
    double mean = 0.0;
    for (std::size_t i = 0; i < prior.size(); ++i) mean += prior.probs[i] * z_atoms[i];
    CHECK(res.robust_value < mean);
}

TEST_CASE("evaluate_policy_kl at radius zero reduces to the plain mean") {
    const FinitePrior prior = demo_prior();
    const InnerSimulator inner = noisy_inner(0.5);
    const RmlmcParams params{3, 0.65};
    AscentConfig cfg;
    cfg.n_outer = 50000;
    cfg.seed = 8;
    cfg.workers = 2;
    const DualEvalResult res = evaluate_policy_kl(inner, prior, 0.0, params, cfg);
    double mean = 0.0;
    for (std::size_t i = 0; i < prior.size(); ++i)
        mean += prior.probs[i] * prior.scalar_atom(i);
    CHECK(std::abs(res.robust_value - mean) < 5.0 * res.std_err);
    CHECK(std::isinf(res.lambda_star));
    CHECK(res.iterations == 0);
}

TEST_CASE("evaluate_policy_kl is deterministic and honours fixed batches") {
    const FinitePrior prior = demo_prior();
    const InnerSimulator inner = noisy_inner(0.5);
    const RmlmcParams params{3, 0.65};
    AscentConfig cfg;
    cfg.n_outer = 2000;
    cfg.max_iters = 10;
    cfg.seed = 21;
    const DualEvalResult r1 = evaluate_policy_kl(inner, prior, 0.2, params, cfg);
    const DualEvalResult r2 = evaluate_policy_kl(inner, prior, 0.2, params, cfg);
    CHECK(r1.robust_value == r2.robust_value);
    CHECK(r1.lambda_star == r2.lambda_star);

    cfg.workers = 3;
    const DualEvalResult r3 = evaluate_policy_kl(inner, prior, 0.2, params, cfg);
    CHECK(r3.robust_value == r1.robust_value);

    cfg.fixed_batch = true;
    const DualEvalResult f1 = evaluate_policy_kl(inner, prior, 0.2, params, cfg);
    const DualEvalResult f2 = evaluate_policy_kl(inner, prior, 0.2, params, cfg);
    CHECK(f1.robust_value == f2.robust_value);
}

TEST_CASE("DualEvalResult serializes with a null lambda at radius zero") {
    DualEvalResult res;
    res.robust_value = 1.5;
    res.lambda_star = std::numeric_limits<double>::infinity();
    res.std_err = 0.01;
    res.n_outer = 100;
    res.iterations = 0;
    const std::string j = to_json_string(res);
    CHECK(j.find("\"lambda_star\":null") != std::string::npos);
    CHECK(j.find("\"robust_value\":1.5") != std::string::npos);
}

TEST_CASE("cressie_read_dual matches the primal KKT oracle at order two") {
    const std::vector<double> p{0.2, 0.3, 0.5};
    const std::vector<double> z{1.0, 4.0, 2.5};
    for (double delta : {0.01, 0.1, 0.3}) {
        const CressieReadResult got = cressie_read_dual(z, p, 2.0, delta);
        const double want = oracles::chi2_primal_min(p, z, delta);
        CHECK(got.value == doctest::Approx(want).epsilon(1e-7));
    }
}

TEST_CASE("cressie_read_dual keeps the maximizer when it exceeds the largest payoff") {
    // two atoms, tiny radius: the dual maximizer sits far above max z, which
    // a bracket capped at max z would clip
    const std::vector<double> p{0.5, 0.5};
    const std::vector<double> z{0.0, 1.0};
    const double delta = 1e-3;
    const CressieReadResult got = cressie_read_dual(z, p, 2.0, delta);
    const double want = oracles::chi2_primal_min(p, z, delta);
    CHECK(got.value == doctest::Approx(want).epsilon(1e-7));
    CHECK(got.beta_star > 1.0);           // beyond max z
    CHECK(got.beta_star == doctest::Approx(0.5 + 0.5 / std::sqrt(2e-3)).epsilon(1e-3));
}

TEST_CASE("cressie_read_dual handles edge radii and degenerate payoffs") {
    const std::vector<double> p{0.2, 0.3, 0.5};
    const std::vector<double> z{1.0, 4.0, 2.5};
    const double mean = 0.2 * 1.0 + 0.3 * 4.0 + 0.5 * 2.5;
    CHECK(cressie_read_dual(z, p, 2.0, 0.0).value == doctest::Approx(mean));
    CHECK(cressie_read_dual({3.0, 3.0, 3.0}, p, 2.0, 0.4).value == doctest::Approx(3.0));
    // saturating radius: everything moves onto the smallest payoff
    CHECK(cressie_read_dual({0.0, 1.0}, {0.5, 0.5}, 2.0, 0.6).value ==
          doctest::Approx(0.0).epsilon(1e-7));
    // monotone decreasing in both radius and lighter tail order
    CHECK(cressie_read_dual(z, p, 2.0, 0.2).value < mean);
    CHECK_THROWS_AS(cressie_read_dual(z, p, 1.0, 0.1), std::invalid_argument);
    CHECK_THROWS_AS(cressie_read_dual(z, {0.4, 0.4}, 2.0, 0.1), std::invalid_argument);
}
