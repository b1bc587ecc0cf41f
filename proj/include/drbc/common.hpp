// ============================================================================
// common.hpp - Shared infrastructure for the DRBC library
// ============================================================================
//
// Error taxonomy, deterministic seed derivation, scalar statistics, stable
// log-sum-exp, 1-d optimization/root-finding helpers, and a deterministic
// parallel map.  Everything here is policy-free numeric plumbing used by the
// sde / priors / dual / lq / merton / experiments modules.
//
// Determinism contract: every stochastic task derives its own RNG stream
// from (master_seed, task_index) via derive_seed(), so batch results are
// byte-identical regardless of how many worker threads execute the batch.
// ============================================================================
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace drbc {

// ----------------------------------------------------------------------------
// Error taxonomy
// ----------------------------------------------------------------------------
// Base class for all structured runtime failures raised by the library.
// Input-contract violations (bad shapes, out-of-range parameters) use
// std::invalid_argument instead.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// A simulated path left the admissible region (non-finite state, |X| beyond
// the blowup guard, or non-positive wealth).
struct NonFinitePath : Error {
    using Error::Error;
};

// Two discrete distributions do not live on a compatible support.
struct SupportMismatch : Error {
    using Error::Error;
};

// All tilting scores coincide, so no exponential tilt can move the mean.
struct DegenerateScores : Error {
    using Error::Error;
};

// The outer Monte Carlo average of the rMLMC estimator was non-positive even
// after the one allowed batch enlargement; log(m_hat) is undefined.
struct NonPositiveM : Error {
    using Error::Error;
};

// An iterative procedure exhausted its iteration budget without meeting its
// convergence criterion where the caller required convergence.
struct NoConvergence : Error {
    using Error::Error;
};

// The Riccati backward sweep exceeded the blowup guard.
struct RiccatiBlowup : Error {
    using Error::Error;
};

// The GLS normal equations are singular (not enough excitation in the data).
struct SingularInformation : Error {
    using Error::Error;
};

// A quadrature produced a vanishing denominator (all mass underflowed).
struct QuadratureUnderflow : Error {
    using Error::Error;
};

// The discriminant in the closed-form exponent coefficients is negative.
struct ComplexRoot : Error {
    using Error::Error;
};

// The closed-form exponent coefficient p fell outside its admissible range.
struct InvalidP : Error {
    using Error::Error;
};

// A statistic that must be strictly positive (a variance / spread) was zero.
struct ZeroVariance : Error {
    using Error::Error;
};

// An optimization bracket is empty or inverted.
struct EmptyBracket : Error {
    using Error::Error;
};

// ----------------------------------------------------------------------------
// Seed derivation
// ----------------------------------------------------------------------------
// splitmix64: fast, well-mixed 64-bit finalizer (public-domain constants).
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Per-task seed: master seed XORed with a hash of the task index.  Tasks are
// addressed by index, never by execution order, so any thread schedule
// reproduces the same streams.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
    return master ^ splitmix64(splitmix64(index) + 0x632BE59BD9B4E019ULL);
}

inline std::mt19937_64 make_rng(std::uint64_t seed) {
    return std::mt19937_64(splitmix64(seed ^ 0xA02BDBF7BB3C0A7ULL));
}

// ----------------------------------------------------------------------------
// Scalar statistics
// ----------------------------------------------------------------------------
// Welford running mean / sample variance.
class RunningStat {
public:
    void add(double x) {
        ++n_;
        const double d = x - mean_;
        mean_ += d / static_cast<double>(n_);
        m2_ += d * (x - mean_);
    }
    std::size_t count() const { return n_; }
    double mean() const { return mean_; }
    // Unbiased sample variance; 0 for fewer than two observations.
    double variance() const {
        return n_ > 1 ? m2_ / static_cast<double>(n_ - 1) : 0.0;
    }
    double stddev() const { return std::sqrt(variance()); }
    double std_error() const {
        return n_ > 0 ? std::sqrt(variance() / static_cast<double>(n_)) : 0.0;
    }

private:
    std::size_t n_ = 0;
    double mean_ = 0.0;
    double m2_ = 0.0;
};

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) throw std::invalid_argument("mean_of: empty vector");
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double sample_std(const std::vector<double>& v) {
    RunningStat st;
    for (double x : v) st.add(x);
    return st.stddev();
}

// log(sum_i exp(x_i)) with the max factored out; -inf for an empty sum.
inline double logsumexp(const std::vector<double>& x) {
    if (x.empty()) return -std::numeric_limits<double>::infinity();
    const double m = *std::max_element(x.begin(), x.end());
    if (!std::isfinite(m)) return m;  // all -inf, or a stray inf/nan dominates
    double s = 0.0;
    for (double xi : x) s += std::exp(xi - m);
    return m + std::log(s);
}

// ----------------------------------------------------------------------------
// 1-d optimization / root finding
// ----------------------------------------------------------------------------
struct ScalarOptimum {
    double x = 0.0;
    double value = 0.0;
};

// Golden-section maximization of a unimodal (here: concave) function on
// [lo, hi].  Tolerance is on the bracket width.
template <class F>
ScalarOptimum golden_section_max(F&& f, double lo, double hi, double tol = 1e-10,
                                 int max_iters = 400) {
    if (!(hi > lo)) throw EmptyBracket("golden_section_max: bracket [lo, hi] is empty");
    constexpr double invphi = 0.6180339887498949;   // 1/phi
    constexpr double invphi2 = 0.3819660112501051;  // 1/phi^2
    double a = lo, b = hi;
    double h = b - a;
    double c = a + invphi2 * h;
    double d = a + invphi * h;
    double fc = f(c), fd = f(d);
    for (int it = 0; it < max_iters && h > tol; ++it) {
        h *= invphi;
        if (fc > fd) {
            b = d;
            d = c;
            fd = fc;
            c = a + invphi2 * h;
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + invphi * h;
            fd = f(d);
        }
    }
    const double xm = 0.5 * (a + b);
    return {xm, f(xm)};
}

// Bisection for a root of a monotone function with f(lo) and f(hi) of
// opposite sign (or zero).  Stops when |f| <= tol_f or after max_iters.
template <class F>
double bisect_root(F&& f, double lo, double hi, double tol_f = 1e-12,
                   int max_iters = 200) {
    double flo = f(lo), fhi = f(hi);
    if (flo == 0.0) return lo;
    if (fhi == 0.0) return hi;
    if ((flo > 0.0) == (fhi > 0.0))
        throw EmptyBracket("bisect_root: f(lo) and f(hi) have the same sign");
    double mid = lo;
    for (int it = 0; it < max_iters; ++it) {
        mid = 0.5 * (lo + hi);
        const double fm = f(mid);
        if (std::abs(fm) <= tol_f) return mid;
        if ((fm > 0.0) == (flo > 0.0)) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    return mid;
}

// ----------------------------------------------------------------------------
// Deterministic parallel map
// ----------------------------------------------------------------------------
// Runs fn(i) for i in [0, n).  Tasks pull indices from a shared counter, so
// load-balancing is dynamic, but every task derives all randomness from its
// own index: results are identical for any worker count (including 1).
inline void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
    if (n == 0) return;
    const int hw = static_cast<int>(std::thread::hardware_concurrency());
    int w = workers > 0 ? workers : (hw > 0 ? hw : 1);
    w = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(w), n));
    if (w <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error = nullptr;
    std::mutex err_mutex;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(w));
    for (int t = 0; t < w; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

// ----------------------------------------------------------------------------
// Formatting
// ----------------------------------------------------------------------------
// Fixed numeric rendering for report files; the single source of truth that
// makes CSV output byte-identical across runs and worker counts.
inline std::string format_num(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", x);
    return std::string(buf);
}

}  // namespace drbc
