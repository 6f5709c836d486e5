// Independent reference solvers used to ground the trained results: a
// Runge-Kutta integration of the LQ Riccati system, Monte Carlo evaluation
// of the log-transformed control value, the exact volatility-uncertainty
// expectation with finite-difference validators, and a sampled checker for
// the monotonicity conditions that guarantee a unique adapted FBSDE
// solution.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "smpsolve/autodiff.hpp"
#include "smpsolve/rng.hpp"

namespace smp {

// Classical RK4 over matrix-valued states.
template <typename State, typename DerivFn>
State rk4_step(const State& y, double h, const DerivFn& f) {
    const State k1 = f(y);
    const State k2 = f(y + 0.5 * h * k1);
    const State k3 = f(y + 0.5 * h * k2);
    const State k4 = f(y + h * k3);
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

enum class LqTerminal { kIdentity, kOnes };

struct RiccatiSolution {
    int n = 0;
    double horizon = 0.0;
    int steps = 0;
    std::vector<Eigen::MatrixXd> K_path;  // K_path[i] = K(i * T / steps)
    std::vector<Eigen::MatrixXd> M_path;
    Eigen::MatrixXd K0, M0;
    Eigen::VectorXd p0;  // -K0 x0

    const Eigen::MatrixXd& K_at_index(int i) const { return K_path[i]; }
    Eigen::MatrixXd K_at(double t) const { return interpolate(K_path, t); }
    Eigen::MatrixXd M_at(double t) const { return interpolate(M_path, t); }

  private:
    Eigen::MatrixXd interpolate(const std::vector<Eigen::MatrixXd>& path, double t) const {
        const double s = std::min(std::max(t / horizon, 0.0), 1.0) * steps;
        const int i = std::min(static_cast<int>(s), steps - 1);
        const double w = s - i;
        return (1.0 - w) * path[i] + w * path[i + 1];
    }
};

namespace detail {

// M solves (K/2 + I) M = K/5 - K^2/2; it is algebraic in K.
inline Eigen::MatrixXd riccati_m(const Eigen::MatrixXd& K) {
    const int n = static_cast<int>(K.rows());
    const Eigen::MatrixXd lhs = 0.5 * K + Eigen::MatrixXd::Identity(n, n);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(lhs);
    if (!lu.isInvertible())
        throw TapeError("riccati_rk4: singular (K/2 + I) encountered");
    return lu.solve(0.2 * K - 0.5 * K * K);
}

inline Eigen::MatrixXd riccati_kdot(const Eigen::MatrixXd& K) {
    const int n = static_cast<int>(K.rows());
    const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
    const Eigen::MatrixXd M = riccati_m(K);
    return 0.5 * K * K + 0.5 * K - (0.2 * I - 0.5 * K) * M - 0.5 * I;
}

}  // namespace detail

// Integrates the Riccati pair backward from K(T) = Q with classical RK4 on a
// uniform grid of `steps` intervals and returns the full path.
inline RiccatiSolution riccati_rk4(int n, double horizon, LqTerminal terminal, int steps,
                                   std::optional<Eigen::VectorXd> x0 = std::nullopt) {
    if (steps < 100) throw TapeError("riccati_rk4: need at least 100 steps");
    if (n < 1 || horizon <= 0.0) throw TapeError("riccati_rk4: bad dimensions");
    RiccatiSolution sol;
    sol.n = n;
    sol.horizon = horizon;
    sol.steps = steps;
    sol.K_path.resize(steps + 1);
    sol.M_path.resize(steps + 1);
    const Eigen::MatrixXd Q = terminal == LqTerminal::kIdentity
                                  ? Eigen::MatrixXd::Identity(n, n).eval()
                                  : Eigen::MatrixXd::Ones(n, n).eval();
    const double h = horizon / steps;
    Eigen::MatrixXd K = Q;
    sol.K_path[steps] = K;
    sol.M_path[steps] = detail::riccati_m(K);
    for (int i = steps - 1; i >= 0; --i) {
        // Backward in t means forward in s = T - t with dK/ds = -Kdot.
        K = rk4_step(K, h, [](const Eigen::MatrixXd& y) {
            return (-detail::riccati_kdot(y)).eval();
        });
        K = 0.5 * (K + K.transpose());
        sol.K_path[i] = K;
        sol.M_path[i] = detail::riccati_m(K);
    }
    sol.K0 = sol.K_path[0];
    sol.M0 = sol.M_path[0];
    const Eigen::VectorXd x0v = x0.value_or(Eigen::VectorXd::Ones(n));
    sol.p0 = -sol.K0 * x0v;
    return sol;
}

// Optimal LQ cost for initial state x0 given the integrated Riccati pair.
// The relation J* = x0^T K0 x0 / 2 is validated against a Monte Carlo run of
// the feedback policy before the suite relies on it.
inline double lq_optimal_cost(const RiccatiSolution& sol, const Eigen::VectorXd& x0) {
    return 0.5 * x0.dot(sol.K0 * x0);
}

struct MonteCarloValue {
    double value = 0.0;
    double std_error = 0.0;
    long samples = 0;
};

// J = -ln E[exp(-h(x0 + sqrt(2) W_T))] by plain Monte Carlo with a
// delta-method standard error. Defaults to h(x) = ln((1 + |x|^2)/2).
inline MonteCarloValue hopf_cole_mc(
    int n, const std::vector<double>& x0, double horizon, long samples, std::uint64_t seed,
    const std::function<double(const std::vector<double>&)>& h = nullptr) {
    if (samples < 10'000) throw TapeError("hopf_cole_mc: need at least 1e4 samples");
    auto h_fn = h ? h : [](const std::vector<double>& x) {
        double s = 0.0;
        for (double xi : x) s += xi * xi;
        return std::log(0.5 * (1.0 + s));
    };
    const rng::Stream stream = rng::Stream(seed).child(0x486f7066ULL);
    const double scale = std::sqrt(2.0 * horizon);
    double sum = 0.0, sumsq = 0.0;
    std::vector<double> x(n);
    for (long j = 0; j < samples; ++j) {
        for (int l = 0; l < n; ++l)
            x[l] = x0[l] + scale * stream.normal(static_cast<std::uint64_t>(j) *
                                                     static_cast<std::uint64_t>(n) +
                                                 l);
        const double g = std::exp(-h_fn(x));
        sum += g;
        sumsq += g * g;
    }
    const double m = sum / samples;
    const double var = std::max(0.0, sumsq / samples - m * m);
    MonteCarloValue out;
    out.value = -std::log(m);
    out.std_error = std::sqrt(var / samples) / m;
    out.samples = samples;
    return out;
}

// Sub-linear expectation of phi(x) = sum_i x_i^2 under volatility
// uncertainty [sigma_lo, sigma_hi]: the convex payoff selects the upper
// volatility in every coordinate, giving n * sigma_hi^2. The finite
// difference validators below back this formula at desk scale.
inline double gexp_exact_quadratic(int n, double sigma_hi) { return n * sigma_hi * sigma_hi; }

// Explicit finite-difference solve of u_t = G(u_xx) on [-L, L] with
// G(a) = (sigma_hi^2 a^+ - sigma_lo^2 a^-) / 2 and u(0, x) = x^2.
// Returns u(T, 0). Boundary nodes copy the curvature of their neighbor.
inline double gheat_fd_1d(double sigma_lo, double sigma_hi, double horizon = 1.0,
                          double half_width = 10.0, int nodes = 2000) {
    const double dx = 2.0 * half_width / (nodes - 1);
    const double dt_cfl = 0.4 * dx * dx / (sigma_hi * sigma_hi);
    const int steps = static_cast<int>(std::ceil(horizon / dt_cfl));
    const double dt = horizon / steps;
    std::vector<double> u(nodes), un(nodes), uxx(nodes);
    for (int i = 0; i < nodes; ++i) {
        const double x = -half_width + i * dx;
        u[i] = x * x;
    }
    auto g_of = [&](double a) {
        return 0.5 * (sigma_hi * sigma_hi * std::max(a, 0.0) +
                      sigma_lo * sigma_lo * std::min(a, 0.0));
    };
    for (int s = 0; s < steps; ++s) {
        for (int i = 1; i + 1 < nodes; ++i)
            uxx[i] = (u[i - 1] - 2.0 * u[i] + u[i + 1]) / (dx * dx);
        uxx[0] = uxx[1];
        uxx[nodes - 1] = uxx[nodes - 2];
        for (int i = 0; i < nodes; ++i) un[i] = u[i] + dt * g_of(uxx[i]);
        u.swap(un);
    }
    return u[(nodes - 1) / 2];
}

// Two-dimensional analogue with coordinatewise volatility uncertainty;
// validates that the quadratic payoff separates across coordinates.
inline double gheat_fd_2d(double sigma_lo, double sigma_hi, double horizon = 1.0,
                          double half_width = 8.0, int nodes = 161) {
    const double dx = 2.0 * half_width / (nodes - 1);
    const double dt_cfl = 0.2 * dx * dx / (sigma_hi * sigma_hi);
    const int steps = static_cast<int>(std::ceil(horizon / dt_cfl));
    const double dt = horizon / steps;
    auto idx = [nodes](int i, int j) { return static_cast<std::size_t>(i) * nodes + j; };
    std::vector<double> u(static_cast<std::size_t>(nodes) * nodes);
    for (int i = 0; i < nodes; ++i)
        for (int j = 0; j < nodes; ++j) {
            const double x = -half_width + i * dx;
            const double y = -half_width + j * dx;
            u[idx(i, j)] = x * x + y * y;
        }
    auto g_of = [&](double a) {
        return 0.5 * (sigma_hi * sigma_hi * std::max(a, 0.0) +
                      sigma_lo * sigma_lo * std::min(a, 0.0));
    };
    std::vector<double> un(u.size());
    for (int s = 0; s < steps; ++s) {
        for (int i = 0; i < nodes; ++i)
            for (int j = 0; j < nodes; ++j) {
                const int ic = std::min(std::max(i, 1), nodes - 2);
                const int jc = std::min(std::max(j, 1), nodes - 2);
                const double uxx = (u[idx(ic - 1, j)] - 2.0 * u[idx(ic, j)] + u[idx(ic + 1, j)]) /
                                   (dx * dx);
                const double uyy = (u[idx(i, jc - 1)] - 2.0 * u[idx(i, jc)] + u[idx(i, jc + 1)]) /
                                   (dx * dx);
                un[idx(i, j)] = u[idx(i, j)] + dt * (g_of(uxx) + g_of(uyy));
            }
        u.swap(un);
    }
    return u[idx((nodes - 1) / 2, (nodes - 1) / 2)];
}

// --- monotonicity checker ----------------------------------------------------
//
// For the FBSDE coefficient map A(u) = (-f, b, sigma) over u = (x, y, z) and
// terminal map g, samples pairs and reports the empirical margins of
//   <A(u) - A(u'), u - u'> <= -nu1 |dx|^2 - nu2 |dy + dz|^2,
//   <g(x) - g(x'), x - x'> >= 0.
struct MonotonicityReport {
    double nu1_margin = 0.0;       // inf of -<dA, du>/|dx|^2 over dy + dz = 0 pairs
    double nu2_margin = 0.0;       // inf of -<dA, du>/|dy + dz|^2 over dx = 0 pairs
    double worst_a_violation = 0.0;  // max over pairs of <dA, du>
    double worst_g_violation = 0.0;  // max over pairs of -<dg, dx>
    int first_violation_sample = -1;
    int samples = 0;
    bool pass = false;
};

struct FbsdeCoefficients {
    int nx = 0, ny = 0, nz = 0;
    // A over the stacked vector (x, y, z); returns a stacked vector.
    std::function<Eigen::VectorXd(const Eigen::VectorXd&)> A;
    // Terminal map over x.
    std::function<Eigen::VectorXd(const Eigen::VectorXd&)> g;
};

inline MonotonicityReport monotonicity_check(const FbsdeCoefficients& spec, int samples,
                                             std::uint64_t seed, double radius = 10.0) {
    MonotonicityReport rep;
    rep.samples = samples;
    rep.nu1_margin = std::numeric_limits<double>::infinity();
    rep.nu2_margin = std::numeric_limits<double>::infinity();
    const rng::Stream stream = rng::Stream(seed).child(0x4d6f6e6fULL);
    const int total = spec.nx + spec.ny + spec.nz;
    auto draw = [&](std::uint64_t tag, std::uint64_t rep_i, int len) {
        Eigen::VectorXd v(len);
        const rng::Stream s = stream.child(tag);
        for (int i = 0; i < len; ++i)
            v[i] = radius * 0.5 * s.normal(rep_i * static_cast<std::uint64_t>(len) + i);
        return v;
    };
    for (int r = 0; r < samples; ++r) {
        const std::uint64_t ri = static_cast<std::uint64_t>(r);
        // General pair: inequality check with nu = 0.
        const Eigen::VectorXd u1 = draw(1, ri, total);
        const Eigen::VectorXd u2 = draw(2, ri, total);
        const double inner = (spec.A(u1) - spec.A(u2)).dot(u1 - u2);
        if (inner > rep.worst_a_violation) rep.worst_a_violation = inner;
        if (inner > 1e-10 && rep.first_violation_sample < 0) rep.first_violation_sample = r;

        // Terminal monotonicity.
        const Eigen::VectorXd x1 = draw(3, ri, spec.nx);
        const Eigen::VectorXd x2 = draw(4, ri, spec.nx);
        const double gin = -(spec.g(x1) - spec.g(x2)).dot(x1 - x2);
        if (gin > rep.worst_g_violation) rep.worst_g_violation = gin;
        if (gin > 1e-10 && rep.first_violation_sample < 0) rep.first_violation_sample = r;

        // nu1 margin: perturb x only.
        Eigen::VectorXd v1 = draw(5, ri, total);
        Eigen::VectorXd v2 = v1;
        const Eigen::VectorXd dx = draw(6, ri, spec.nx);
        v2.head(spec.nx) += dx;
        if (dx.squaredNorm() > 1e-12) {
            const double m1 = -(spec.A(v2) - spec.A(v1)).dot(v2 - v1) / dx.squaredNorm();
            rep.nu1_margin = std::min(rep.nu1_margin, m1);
        }

        // nu2 margin: perturb (y, z) with dy + dz != 0.
        Eigen::VectorXd w2 = v1;
        const Eigen::VectorXd dy = draw(7, ri, spec.ny);
        const Eigen::VectorXd dz = draw(8, ri, spec.nz);
        w2.segment(spec.nx, spec.ny) += dy;
        w2.tail(spec.nz) += dz;
        const double denom = (dy + dz).squaredNorm();
        if (denom > 1e-12) {
            const double m2 = -(spec.A(w2) - spec.A(v1)).dot(w2 - v1) / denom;
            rep.nu2_margin = std::min(rep.nu2_margin, m2);
        }
    }
    rep.pass = rep.worst_a_violation <= 1e-10 && rep.worst_g_violation <= 1e-10;
    return rep;
}

// Coefficients of the LQ Hamiltonian system in the monotone FBSDE frame.
// The adjoint pair enters negated (y, z) = (-p, -q) so that the terminal map
// g(x) = Q x is monotone increasing; the maximizing control (p + q)/2
// becomes -(y + z)/2.
inline FbsdeCoefficients lq_monotonicity_coefficients(int n,
                                                      LqTerminal terminal = LqTerminal::kIdentity) {
    FbsdeCoefficients spec;
    spec.nx = n;
    spec.ny = n;
    spec.nz = n;
    const Eigen::MatrixXd Q = terminal == LqTerminal::kIdentity
                                  ? Eigen::MatrixXd::Identity(n, n).eval()
                                  : Eigen::MatrixXd::Ones(n, n).eval();
    spec.A = [n](const Eigen::VectorXd& u) {
        const Eigen::VectorXd x = u.head(n);
        const Eigen::VectorXd y = u.segment(n, n);
        const Eigen::VectorXd z = u.tail(n);
        const Eigen::VectorXd ctrl = -0.5 * (y + z);
        Eigen::VectorXd out(3 * n);
        out.head(n) = -(0.5 * x - 0.25 * y + 0.2 * z);  // -f = H_x(x, -y, -z)
        out.segment(n, n) = -0.25 * x + ctrl;           // drift at the argmax
        out.tail(n) = 0.2 * x + ctrl;                   // diffusion at the argmax
        return out;
    };
    spec.g = [Q](const Eigen::VectorXd& x) { return (Q * x).eval(); };
    return spec;
}

}  // namespace smp
