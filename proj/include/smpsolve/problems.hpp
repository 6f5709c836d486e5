// Control-problem abstraction: dynamics, costs, Hamiltonian derivatives and
// the control domain, plus the built-in benchmark problems. All callbacks
// build tape expressions over batched states (rows are Brownian samples), so
// the same definitions serve simulation, training and point evaluation.
#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "smpsolve/autodiff.hpp"

namespace smp {

enum class ControlDomain { kFree, kBox };

struct HamiltonianEval {
    double value = 0.0;
    std::vector<double> grad_x;
    std::vector<double> grad_u;
};

struct ProblemSpec {
    std::string name;
    int n = 0;  // state dimension
    int d = 0;  // Brownian dimension
    int k = 0;  // control dimension
    std::vector<double> x0;
    double horizon = 0.0;
    ControlDomain domain = ControlDomain::kFree;
    std::vector<double> box_lo, box_hi;

    // Batched tape callbacks. X: Bxn, U: Bxk, P: Bxn, Q: Bx(n*d).
    using Dyn = std::function<NodeId(Tape&, double, NodeId, NodeId)>;           // (t, X, U)
    using Term = std::function<NodeId(Tape&, NodeId)>;                          // (X)
    using HamDeriv = std::function<NodeId(Tape&, double, NodeId, NodeId, NodeId, NodeId)>;
    using Feedback = std::function<NodeId(Tape&, double, NodeId, NodeId, NodeId)>;  // (t,X,P,Q)

    Dyn drift;             // b -> Bxn
    Dyn diffusion;         // sigma -> Bx(n*d), row-major n x d per sample
    Dyn running_cost;      // f -> Bx1
    Term terminal_cost;    // h -> Bx1
    Term terminal_grad;    // h_x -> Bxn
    Term terminal_hess;    // h_xx -> Bx(n*n), optional
    HamDeriv ham_x;        // H_x closed form -> Bxn
    HamDeriv ham_u;        // H_u closed form -> Bxk, optional
    Feedback explicit_argmax;  // u*(t,x,p,q) -> Bxk, optional
    Feedback hbar_value;   // optional, Bx1
    Feedback hbar_x;       // optional triple: Bxn
    Feedback hbar_p;       //                  Bxn
    Feedback hbar_q;       //                  Bx(n*d)

    // Constant second-order coefficients; present when Algorithm 4 applies.
    std::optional<Tensor> bx;                 // n x n
    std::optional<std::vector<Tensor>> sigx;  // d matrices, n x n
    std::optional<Tensor> hxx;                // n x n

    bool has_ham_u() const { return static_cast<bool>(ham_u); }
    bool has_argmax() const { return static_cast<bool>(explicit_argmax); }
    bool has_hbar() const { return hbar_x && hbar_p && hbar_q; }
    bool has_second_order() const {
        return bx.has_value() && sigx.has_value() && hxx.has_value() &&
               static_cast<bool>(terminal_hess);
    }
};

// H(t,x,u,p,q) = <p, b> + tr[q^T sigma] - f evaluated at a single point,
// with grad_x and grad_u obtained from the recorded callbacks by autodiff.
inline HamiltonianEval hamiltonian(const ProblemSpec& prob, double t,
                                   const std::vector<double>& x, const std::vector<double>& u,
                                   const std::vector<double>& p, const std::vector<double>& q) {
    if (static_cast<int>(x.size()) != prob.n || static_cast<int>(u.size()) != prob.k ||
        static_cast<int>(p.size()) != prob.n ||
        static_cast<int>(q.size()) != prob.n * prob.d)
        throw TapeError("hamiltonian: argument shape mismatch");
    Tape tape;
    const NodeId X = tape.leaf(Tensor::row(x), true);
    const NodeId U = tape.leaf(Tensor::row(u), true);
    const NodeId P = tape.constant(Tensor::row(p));
    const NodeId Q = tape.constant(Tensor::row(q));
    const NodeId b = prob.drift(tape, t, X, U);
    const NodeId sig = prob.diffusion(tape, t, X, U);
    const NodeId f = prob.running_cost(tape, t, X, U);
    const NodeId value = tape.sub(
        tape.add(tape.sum(tape.mul(P, b)), tape.sum(tape.mul(Q, sig))), tape.sum(f));
    Tape::Gradients grads = tape.backward(value);
    HamiltonianEval out;
    out.value = tape.val(value).item();
    out.grad_x = grads.at(X).v;
    out.grad_u = grads.at(U).v;
    return out;
}

// h_x at a single point (used to seed the adjoint initial value).
inline std::vector<double> terminal_grad_at(const ProblemSpec& prob,
                                            const std::vector<double>& x) {
    Tape tape;
    const NodeId X = tape.constant(Tensor::row(x));
    return tape.val(prob.terminal_grad(tape, X)).v;
}

namespace detail {

inline std::vector<int> diag_indices(int n) {
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i * n + i;
    return idx;
}

inline Tensor identity_matrix(int n, double scale = 1.0) {
    Tensor t(n, n);
    for (int i = 0; i < n; ++i) t.at(i, i) = scale;
    return t;
}

}  // namespace detail

struct BuiltinParams {
    double sigma_lo = 1.0;                     // gexp only
    double sigma_hi = 2.0;                     // gexp only
    std::optional<double> horizon;             // override the per-problem default
    std::optional<std::vector<double>> x0;     // override the per-problem default
};

// Built-in problems: lq / lq_ones (linear-quadratic, terminal Q = I or the
// all-ones matrix), nonlinear (log terminal cost), gexp (volatility
// uncertainty over [sigma_lo, sigma_hi]) and transcendental (sin-drift
// control without a closed-form maximizer).
inline ProblemSpec make_builtin(const std::string& name, int n, BuiltinParams params = {}) {
    if (n < 1) throw TapeError("make_builtin: dimension must be >= 1");
    ProblemSpec prob;
    prob.name = name;
    prob.n = n;

    if (name == "lq" || name == "lq_ones") {
        const bool ones = name == "lq_ones";
        prob.d = 1;
        prob.k = n;
        prob.horizon = params.horizon.value_or(0.1);
        prob.x0 = params.x0.value_or(std::vector<double>(n, 1.0));
        prob.domain = ControlDomain::kFree;
        prob.drift = [](Tape& t, double, NodeId X, NodeId U) {
            return t.add(t.scale(X, -0.25), U);
        };
        prob.diffusion = [](Tape& t, double, NodeId X, NodeId U) {
            return t.add(t.scale(X, 0.2), U);
        };
        prob.running_cost = [](Tape& t, double, NodeId X, NodeId U) {
            return t.add(t.scale(t.sum_cols(t.mul(X, X)), 0.25), t.sum_cols(t.mul(U, U)));
        };
        if (!ones) {
            prob.terminal_cost = [](Tape& t, NodeId X) {
                return t.scale(t.sum_cols(t.mul(X, X)), 0.5);
            };
            prob.terminal_grad = [](Tape&, NodeId X) { return X; };
        } else {
            prob.terminal_cost = [](Tape& t, NodeId X) {
                return t.scale(t.square(t.sum_cols(X)), 0.5);
            };
            prob.terminal_grad = [n](Tape& t, NodeId X) {
                return t.broadcast_cols(t.sum_cols(X), n);
            };
        }
        prob.terminal_hess = [n, ones](Tape& t, NodeId X) {
            const int batch = t.val(X).rows;
            const Tensor q = ones ? Tensor::full(n, n, 1.0) : detail::identity_matrix(n);
            return t.broadcast_rows(t.constant(Tensor(1, n * n, q.v)), batch);
        };
        prob.ham_x = [](Tape& t, double, NodeId X, NodeId, NodeId P, NodeId Q) {
            return t.add(t.add(t.scale(P, -0.25), t.scale(Q, 0.2)), t.scale(X, -0.5));
        };
        prob.ham_u = [](Tape& t, double, NodeId, NodeId U, NodeId P, NodeId Q) {
            return t.sub(t.add(P, Q), t.scale(U, 2.0));
        };
        prob.explicit_argmax = [](Tape& t, double, NodeId, NodeId P, NodeId Q) {
            return t.scale(t.add(P, Q), 0.5);
        };
        prob.hbar_value = [](Tape& t, double, NodeId X, NodeId P, NodeId Q) {
            const NodeId pq = t.add(P, Q);
            return t.add(
                t.add(t.scale(t.sum_cols(t.mul(X, X)), -0.25),
                      t.scale(t.sum_cols(t.mul(pq, pq)), 0.25)),
                t.add(t.scale(t.sum_cols(t.mul(P, X)), -0.25),
                      t.scale(t.sum_cols(t.mul(Q, X)), 0.2)));
        };
        prob.hbar_x = [](Tape& t, double, NodeId X, NodeId P, NodeId Q) {
            return t.add(t.add(t.scale(P, -0.25), t.scale(Q, 0.2)), t.scale(X, -0.5));
        };
        prob.hbar_p = [](Tape& t, double, NodeId X, NodeId P, NodeId Q) {
            return t.add(t.scale(X, -0.25), t.scale(t.add(P, Q), 0.5));
        };
        prob.hbar_q = [](Tape& t, double, NodeId X, NodeId P, NodeId Q) {
            return t.add(t.scale(X, 0.2), t.scale(t.add(P, Q), 0.5));
        };
        prob.bx = detail::identity_matrix(n, -0.25);
        prob.sigx = std::vector<Tensor>{detail::identity_matrix(n, 0.2)};
        prob.hxx = detail::identity_matrix(n, -0.5);
        return prob;
    }

    if (name == "nonlinear") {
        prob.d = n;
        prob.k = n;
        prob.horizon = params.horizon.value_or(1.0);
        prob.x0 = params.x0.value_or(std::vector<double>(n, 0.0));
        prob.domain = ControlDomain::kFree;
        prob.drift = [](Tape& t, double, NodeId, NodeId U) { return t.scale(U, 2.0); };
        prob.diffusion = [n](Tape& t, double, NodeId X, NodeId) {
            const int batch = t.val(X).rows;
            const Tensor sig(1, n * n, detail::identity_matrix(n, std::sqrt(2.0)).v);
            return t.broadcast_rows(t.constant(sig), batch);
        };
        prob.running_cost = [](Tape& t, double, NodeId, NodeId U) {
            return t.sum_cols(t.mul(U, U));
        };
        auto half_one_plus = [](Tape& t, NodeId X) {
            return t.add_scalar(t.scale(t.sum_cols(t.mul(X, X)), 0.5), 0.5);
        };
        prob.terminal_cost = [half_one_plus](Tape& t, NodeId X) {
            return t.log(half_one_plus(t, X));
        };
        prob.terminal_grad = [half_one_plus, n](Tape& t, NodeId X) {
            return t.mul(X, t.broadcast_cols(t.pow(half_one_plus(t, X), -1.0), n));
        };
        prob.ham_x = [n](Tape& t, double, NodeId X, NodeId, NodeId, NodeId) {
            return t.constant(Tensor(t.val(X).rows, n));
        };
        prob.ham_u = [](Tape& t, double, NodeId, NodeId U, NodeId P, NodeId) {
            return t.scale(t.sub(P, U), 2.0);
        };
        prob.explicit_argmax = [](Tape&, double, NodeId, NodeId P, NodeId) { return P; };
        prob.hbar_value = [n](Tape& t, double, NodeId, NodeId P, NodeId Q) {
            const NodeId trq = t.sum_cols(t.gather_cols(Q, detail::diag_indices(n)));
            return t.add(t.sum_cols(t.mul(P, P)), t.scale(trq, std::sqrt(2.0)));
        };
        prob.hbar_x = [n](Tape& t, double, NodeId X, NodeId, NodeId) {
            return t.constant(Tensor(t.val(X).rows, n));
        };
        prob.hbar_p = [](Tape& t, double, NodeId, NodeId P, NodeId) { return t.scale(P, 2.0); };
        prob.hbar_q = [n](Tape& t, double, NodeId X, NodeId, NodeId) {
            const int batch = t.val(X).rows;
            const Tensor sig(1, n * n, detail::identity_matrix(n, std::sqrt(2.0)).v);
            return t.broadcast_rows(t.constant(sig), batch);
        };
        return prob;
    }

    if (name == "gexp") {
        if (!(0.0 < params.sigma_lo && params.sigma_lo <= params.sigma_hi))
            throw TapeError("make_builtin: gexp needs 0 < sigma_lo <= sigma_hi");
        const double lo = params.sigma_lo, hi = params.sigma_hi;
        prob.d = n;
        prob.k = n;
        prob.horizon = params.horizon.value_or(1.0);
        prob.x0 = params.x0.value_or(std::vector<double>(n, 0.0));
        prob.domain = ControlDomain::kBox;
        prob.box_lo.assign(n, lo);
        prob.box_hi.assign(n, hi);
        prob.drift = [n](Tape& t, double, NodeId X, NodeId) {
            return t.constant(Tensor(t.val(X).rows, n));
        };
        prob.diffusion = [n](Tape& t, double, NodeId, NodeId U) {
            return t.scatter_diag(U, n);
        };
        prob.running_cost = [](Tape& t, double, NodeId X, NodeId) {
            return t.constant(Tensor(t.val(X).rows, 1));
        };
        // Minimize E[-phi] with phi(x) = sum_i x_i^2; reported values negate
        // the cost back to the sub-linear expectation of phi.
        prob.terminal_cost = [](Tape& t, NodeId X) {
            return t.scale(t.sum_cols(t.mul(X, X)), -1.0);
        };
        prob.terminal_grad = [](Tape& t, NodeId X) { return t.scale(X, -2.0); };
        prob.ham_x = [n](Tape& t, double, NodeId X, NodeId, NodeId, NodeId) {
            return t.constant(Tensor(t.val(X).rows, n));
        };
        // H_theta = diag(q) carries no theta term, so no ham_u is registered
        // and penalty-based training is rejected for this problem.
        auto theta_star = [n, lo, hi](Tape& t, NodeId Q) {
            return t.select_sign(t.gather_cols(Q, detail::diag_indices(n)), hi, lo);
        };
        prob.explicit_argmax = [theta_star](Tape& t, double, NodeId, NodeId, NodeId Q) {
            return theta_star(t, Q);
        };
        prob.hbar_value = [theta_star, n](Tape& t, double, NodeId, NodeId, NodeId Q) {
            const NodeId qd = t.gather_cols(Q, detail::diag_indices(n));
            return t.sum_cols(t.mul(theta_star(t, Q), qd));
        };
        prob.hbar_x = [n](Tape& t, double, NodeId X, NodeId, NodeId) {
            return t.constant(Tensor(t.val(X).rows, n));
        };
        prob.hbar_p = [n](Tape& t, double, NodeId X, NodeId, NodeId) {
            return t.constant(Tensor(t.val(X).rows, n));
        };
        prob.hbar_q = [theta_star, n](Tape& t, double, NodeId, NodeId, NodeId Q) {
            return t.scatter_diag(theta_star(t, Q), n);
        };
        return prob;
    }

    if (name == "transcendental") {
        prob.d = n;
        prob.k = n;
        prob.horizon = params.horizon.value_or(0.1);
        prob.x0 = params.x0.value_or(std::vector<double>(n, 1.0));
        prob.domain = ControlDomain::kFree;
        prob.drift = [](Tape& t, double, NodeId, NodeId U) { return t.sin(U); };
        prob.diffusion = [n](Tape& t, double, NodeId X, NodeId) {
            return t.scatter_diag(X, n);
        };
        prob.running_cost = [](Tape& t, double, NodeId, NodeId U) {
            return t.sum_cols(t.mul(U, U));
        };
        prob.terminal_cost = [](Tape& t, NodeId X) {
            return t.scale(t.sum_cols(t.mul(X, X)), 0.5);
        };
        prob.terminal_grad = [](Tape&, NodeId X) { return X; };
        prob.ham_x = [n](Tape& t, double, NodeId, NodeId, NodeId, NodeId Q) {
            return t.gather_cols(Q, detail::diag_indices(n));
        };
        prob.ham_u = [](Tape& t, double, NodeId, NodeId U, NodeId P, NodeId) {
            return t.sub(t.mul(P, t.cos(U)), t.scale(U, 2.0));
        };
        return prob;
    }

    throw TapeError("make_builtin: unknown problem '" + name + "'");
}

}  // namespace smp
