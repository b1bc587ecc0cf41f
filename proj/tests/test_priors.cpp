#include <doctest.h>

#include "drbc/common.hpp"
#include "drbc/priors.hpp"
#include "oracles.hpp"

#include <cmath>
#include <vector>

using namespace drbc;

namespace {

FinitePrior demo_prior() {
    return FinitePrior::from_scalars({0.01, 0.46, 0.30, 0.21, 0.27},
                                     {0.05, 0.35, 0.35, 0.15, 0.10});
}

}  // namespace

TEST_CASE("FinitePrior validation rejects malformed inputs") {
    CHECK_THROWS_AS(FinitePrior::from_scalars({1.0}, {0.5}).validate(),
                    std::invalid_argument);
    CHECK_THROWS_AS(FinitePrior::from_scalars({1.0, 2.0}, {1.2, -0.2}).validate(),
                    std::invalid_argument);
    FinitePrior ragged;
    ragged.atoms = {Eigen::VectorXd::Zero(2), Eigen::VectorXd::Zero(3)};
    ragged.probs = {0.5, 0.5};
    CHECK_THROWS_AS(ragged.validate(), std::invalid_argument);
    CHECK_NOTHROW(demo_prior().validate());
    CHECK(demo_prior().dim() == 1);
    CHECK(demo_prior().scalar_atom(1) == doctest::Approx(0.46));
}

TEST_CASE("kl_finite matches the direct formula and handles zeros") {
    const std::vector<double> p{0.2, 0.3, 0.5};
    const std::vector<double> q{0.5, 0.25, 0.25};
    CHECK(kl_finite(q, p) == doctest::Approx(oracles::kl(q, p)).epsilon(1e-14));
    CHECK(kl_finite(p, p) == doctest::Approx(0.0));
    CHECK(kl_finite({0.0, 1.0}, {0.5, 0.5}) == doctest::Approx(std::log(2.0)));
    CHECK(std::isinf(kl_finite({0.5, 0.5}, {1.0, 0.0})));
    CHECK_THROWS_AS(kl_finite({1.0}, {0.5, 0.5}), SupportMismatch);
}

TEST_CASE("tilt_worst_mean hits the KL budget and matches the grid oracle") {
    const FinitePrior prior = demo_prior();
    const std::vector<double> scores{2.0, -1.0, 0.5, 3.0, -0.25};
    for (double delta : {0.01, 0.1, 0.5}) {
        const TiltResult res = tilt_worst_mean(prior, scores, delta, TiltSense::Min);
        CHECK(!res.saturated);
        CHECK(res.kl == doctest::Approx(delta).epsilon(1e-6));
        CHECK(res.tilted_mean ==
              doctest::Approx(oracles::tilt_min_mean(prior.probs, scores, delta))
                  .epsilon(1e-7));
        // the library pmf itself must sit on the KL sphere
        CHECK(kl_finite(res.q, prior.probs) == doctest::Approx(delta).epsilon(1e-6));
    }
}

TEST_CASE("tilt_worst_mean is monotone in the radius and respects the sense") {
    const FinitePrior prior = demo_prior();
    const std::vector<double> scores{2.0, -1.0, 0.5, 3.0, -0.25};
    double prior_mean = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i)
        prior_mean += prior.probs[i] * scores[i];

    double prev = prior_mean;
    for (double delta : {0.01, 0.05, 0.2, 0.8}) {
        const double worst = tilt_worst_mean(prior, scores, delta, TiltSense::Min).tilted_mean;
        CHECK(worst < prev + 1e-12);
        prev = worst;
    }
    const TiltResult up = tilt_worst_mean(prior, scores, 0.2, TiltSense::Max);
    CHECK(up.tilted_mean > prior_mean);
    CHECK(up.kl == doctest::Approx(0.2).epsilon(1e-6));
}

TEST_CASE("tilt_worst_mean saturates at the restricted prior") {
    const FinitePrior prior = FinitePrior::from_scalars({0.0, 1.0, 2.0}, {0.25, 0.5, 0.25});
    const std::vector<double> scores{5.0, 1.0, 3.0};
    // Scores minimized at atom 1 (p = 0.5): the KL ceiling is log(1/0.5).
    const double ceiling = std::log(2.0);
    const TiltResult res = tilt_worst_mean(prior, scores, ceiling + 0.5, TiltSense::Min);
    CHECK(res.saturated);
    CHECK(res.tilted_mean == doctest::Approx(1.0));
    CHECK(res.kl == doctest::Approx(ceiling).epsilon(1e-9));
    CHECK(res.q[1] == doctest::Approx(1.0));
}

TEST_CASE("tilt_worst_mean rejects constant scores") {
    const FinitePrior prior = FinitePrior::from_scalars({0.0, 1.0}, {0.5, 0.5});
    CHECK_THROWS_AS(tilt_worst_mean(prior, {2.0, 2.0}, 0.1), DegenerateScores);
}

TEST_CASE("primal_inner_inf equals the tilt oracle and handles edge radii") {
    const FinitePrior prior = demo_prior();
    const std::vector<double> z{1.0, 4.0, 2.5, 0.5, 3.0};
    double prior_mean = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) prior_mean += prior.probs[i] * z[i];

    CHECK(primal_inner_inf(prior, z, 0.0).value == doctest::Approx(prior_mean));
    const InnerInfResult res = primal_inner_inf(prior, z, 0.15);
    CHECK(res.value ==
          doctest::Approx(oracles::tilt_min_mean(prior.probs, z, 0.15)).epsilon(1e-7));
    CHECK(res.value < prior_mean);
    // worst-case pmf shifts mass toward low z
    CHECK(res.q[3] > prior.probs[3]);
    CHECK(res.q[1] < prior.probs[1]);
    // constant payoffs cannot be tilted anywhere
    CHECK(primal_inner_inf(prior, {2.0, 2.0, 2.0, 2.0, 2.0}, 0.3).value ==
          doctest::Approx(2.0));
}

TEST_CASE("sample_prior reproduces finite pmf frequencies deterministically") {
    const FinitePrior prior = demo_prior();
    const std::size_t n = 200000;
    const auto draws = sample_prior(prior, n, 2024);
    std::vector<double> freq(prior.size(), 0.0);
    for (const auto& b : draws) {
        bool matched = false;
        for (std::size_t i = 0; i < prior.size(); ++i) {
            if (b(0) == prior.scalar_atom(i)) {
                freq[i] += 1.0;
                matched = true;
                break;
            }
        }
        CHECK(matched);
    }
    for (std::size_t i = 0; i < prior.size(); ++i)
        CHECK(freq[i] / static_cast<double>(n) ==
              doctest::Approx(prior.probs[i]).epsilon(0.05));
    CHECK(sample_prior(prior, 100, 7) == sample_prior(prior, 100, 7));
}

TEST_CASE("sample_prior for Gaussian priors matches the first two moments") {
    GaussianPrior prior;
    prior.mu0 = Eigen::VectorXd::Constant(1, 0.1);
    prior.sigma0 = 0.5;
    const auto draws = sample_prior(prior, 200000, 11);
    RunningStat st;
    for (const auto& b : draws) st.add(b(0));
    CHECK(st.mean() == doctest::Approx(0.1).epsilon(0.05));
    CHECK(st.stddev() == doctest::Approx(0.5).epsilon(0.02));
}

TEST_CASE("prior JSON round trips") {
    const FinitePrior prior = demo_prior();
    const FinitePrior back = finite_prior_from_json(to_json_string(prior));
    REQUIRE(back.size() == prior.size());
    for (std::size_t i = 0; i < prior.size(); ++i) {
        CHECK(back.scalar_atom(i) == doctest::Approx(prior.scalar_atom(i)));
        CHECK(back.probs[i] == doctest::Approx(prior.probs[i]));
    }
    GaussianPrior g;
    g.mu0 = Eigen::VectorXd::Constant(1, 0.1);
    g.sigma0 = 2.0;
    const GaussianPrior gback = gaussian_prior_from_json(to_json_string(g));
    CHECK(gback.mu0(0) == doctest::Approx(0.1));
    CHECK(gback.sigma0 == doctest::Approx(2.0));
}
