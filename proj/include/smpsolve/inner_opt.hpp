// Deterministic maximization of the Hamiltonian over the control domain:
// L-BFGS with a quadratic-interpolating Armijo line search on free domains,
// projected gradient ascent on boxes. Stateless per call.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <deque>
#include <functional>
#include <optional>

#include "smpsolve/autodiff.hpp"
#include "smpsolve/problems.hpp"

namespace smp {

struct OptOptions {
    int memory = 10;
    int max_iters = 50;
    double grad_tol = 1e-8;
};

struct OptResult {
    Eigen::VectorXd u;
    double value = 0.0;
    double grad_norm = 0.0;
    int iters = 0;
};

using ValueFn = std::function<double(const Eigen::VectorXd&)>;
using GradFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

inline Eigen::VectorXd project_box(const Eigen::VectorXd& u, const Eigen::VectorXd& lo,
                                   const Eigen::VectorXd& hi) {
    if (lo.size() != u.size() || hi.size() != u.size())
        throw TapeError("project_box: bound length mismatch");
    Eigen::VectorXd out(u.size());
    for (Eigen::Index i = 0; i < u.size(); ++i) {
        if (lo[i] > hi[i]) throw TapeError("project_box: lo > hi");
        out[i] = std::min(std::max(u[i], lo[i]), hi[i]);
    }
    return out;
}

struct BoxBounds {
    Eigen::VectorXd lo, hi;
};

namespace detail {

// Armijo condition with c = 1e-4 on the ascent problem.
inline bool armijo_ok(double f0, double slope, double alpha, double f_alpha) {
    return f_alpha >= f0 + 1e-4 * alpha * slope;
}

}  // namespace detail

// Maximizes value_fn from u0. On free domains this is L-BFGS (two-loop
// recursion); the line search tries the unit step and the quadratic
// interpolation of (f(0), f'(0), f(1)), which is exact on quadratics, then
// backtracks by halving. Box domains fall back to projected gradient ascent.
// Returns the best iterate found; the returned value never falls below
// value_fn(u0).
inline OptResult lbfgs_maximize(const ValueFn& value_fn, const GradFn& grad_fn,
                                const Eigen::VectorXd& u0,
                                const std::optional<BoxBounds>& box = std::nullopt,
                                const OptOptions& opts = {}) {
    if (opts.memory < 1 || opts.grad_tol <= 0.0)
        throw TapeError("lbfgs_maximize: bad options");
    Eigen::VectorXd u = box ? project_box(u0, box->lo, box->hi) : u0;
    double f = value_fn(u);
    if (!std::isfinite(f)) throw TapeError("lbfgs_maximize: non-finite objective at u0");

    OptResult best{u, f, std::numeric_limits<double>::infinity(), 0};

    if (box) {
        // Projected gradient ascent with backtracking.
        for (int it = 0; it < opts.max_iters; ++it) {
            const Eigen::VectorXd g = grad_fn(u);
            const Eigen::VectorXd pg = project_box(u + g, box->lo, box->hi) - u;
            best.grad_norm = pg.norm();
            best.iters = it;
            if (pg.norm() <= opts.grad_tol) break;
            double alpha = 1.0;
            bool moved = false;
            for (int bt = 0; bt < 40; ++bt) {
                const Eigen::VectorXd cand = project_box(u + alpha * g, box->lo, box->hi);
                const double fc = value_fn(cand);
                if (std::isfinite(fc) && fc >= f + 1e-4 * g.dot(cand - u) && fc >= f) {
                    u = cand;
                    f = fc;
                    moved = true;
                    break;
                }
                alpha *= 0.5;
            }
            if (!moved) break;
            if (f > best.value) {
                best.u = u;
                best.value = f;
            }
        }
        const Eigen::VectorXd g = grad_fn(best.u);
        best.grad_norm = (project_box(best.u + g, box->lo, box->hi) - best.u).norm();
        return best;
    }

    std::deque<Eigen::VectorXd> s_hist, y_hist;
    Eigen::VectorXd g = grad_fn(u);
    best.grad_norm = g.norm();
    for (int it = 0; it < opts.max_iters; ++it) {
        best.iters = it;
        if (g.norm() <= opts.grad_tol) break;

        // Two-loop recursion on the descent problem for -f.
        Eigen::VectorXd q = g;
        std::vector<double> alphas(s_hist.size());
        for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
            const double rho = 1.0 / y_hist[i].dot(s_hist[i]);
            alphas[i] = rho * s_hist[i].dot(q);
            q -= alphas[i] * y_hist[i];
        }
        if (!s_hist.empty()) {
            const double gamma =
                s_hist.back().dot(y_hist.back()) / y_hist.back().dot(y_hist.back());
            q *= gamma;
        }
        for (std::size_t i = 0; i < s_hist.size(); ++i) {
            const double rho = 1.0 / y_hist[i].dot(s_hist[i]);
            const double beta = rho * y_hist[i].dot(q);
            q += (alphas[i] - beta) * s_hist[i];
        }
        Eigen::VectorXd dir = q;  // ascent direction
        double slope = g.dot(dir);
        if (slope <= 0.0) {
            dir = g;
            slope = g.dot(dir);
            if (slope <= 0.0) break;
        }

        // Line search: unit step, quadratic interpolation, then halving.
        double alpha = 1.0;
        double f1 = value_fn(u + dir);
        double chosen = -1.0, f_chosen = f;
        const double denom = f - f1 + slope;  // positive when curvature is negative
        if (std::isfinite(f1) && denom > 0.0) {
            const double aq = slope / (2.0 * denom);
            if (aq > 1e-12 && std::isfinite(aq)) {
                const double fq = value_fn(u + aq * dir);
                if (std::isfinite(fq) && detail::armijo_ok(f, slope, aq, fq)) {
                    chosen = aq;
                    f_chosen = fq;
                }
            }
        }
        if (std::isfinite(f1) && detail::armijo_ok(f, slope, 1.0, f1) && f1 > f_chosen) {
            chosen = 1.0;
            f_chosen = f1;
        }
        if (chosen < 0.0) {
            alpha = 0.5;
            for (int bt = 0; bt < 50; ++bt) {
                const double fa = value_fn(u + alpha * dir);
                if (std::isfinite(fa) && detail::armijo_ok(f, slope, alpha, fa)) {
                    chosen = alpha;
                    f_chosen = fa;
                    break;
                }
                alpha *= 0.5;
            }
        }
        if (chosen < 0.0) break;  // no acceptable step along this direction

        const Eigen::VectorXd u_new = u + chosen * dir;
        const Eigen::VectorXd g_new = grad_fn(u_new);
        const Eigen::VectorXd s = u_new - u;
        const Eigen::VectorXd y = g - g_new;  // curvature pair of the descent problem
        if (y.dot(s) > 1e-14 * s.norm() * y.norm()) {
            s_hist.push_back(s);
            y_hist.push_back(y);
            if (static_cast<int>(s_hist.size()) > opts.memory) {
                s_hist.pop_front();
                y_hist.pop_front();
            }
        }
        u = u_new;
        f = f_chosen;
        g = g_new;
        if (f > best.value) {
            best.u = u;
            best.value = f;
            best.grad_norm = g.norm();
        }
        best.iters = it + 1;
    }
    best.grad_norm = grad_fn(best.u).norm();
    return best;
}

// Hamiltonian value/gradient closures at a fixed (t, x, p, q) for use with
// lbfgs_maximize; gradients come from the problem's recorded callbacks.
inline std::pair<ValueFn, GradFn> hamiltonian_objective(const ProblemSpec& prob, double t,
                                                        std::vector<double> x,
                                                        std::vector<double> p,
                                                        std::vector<double> q) {
    auto eval = [&prob, t, x = std::move(x), p = std::move(p),
                 q = std::move(q)](const Eigen::VectorXd& u) {
        std::vector<double> uv(u.data(), u.data() + u.size());
        return hamiltonian(prob, t, x, uv, p, q);
    };
    ValueFn value = [eval](const Eigen::VectorXd& u) { return eval(u).value; };
    GradFn grad = [eval](const Eigen::VectorXd& u) {
        const HamiltonianEval h = eval(u);
        return Eigen::Map<const Eigen::VectorXd>(h.grad_u.data(),
                                                 static_cast<Eigen::Index>(h.grad_u.size()))
            .eval();
    };
    return {value, grad};
}

}  // namespace smp
