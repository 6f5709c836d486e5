// Euler-Maruyama simulation of the first- and second-order Hamiltonian
// systems on a tape, plus the terminal-matching loss and the cost
// functional. All coefficients are evaluated at the left endpoint of each
// step. Paths are bit-reproducible for a fixed (seed, config).
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "smpsolve/autodiff.hpp"
#include "smpsolve/problems.hpp"
#include "smpsolve/rng.hpp"

namespace smp {

struct TimeGrid {
    double horizon = 0.0;
    int steps = 0;

    TimeGrid(double T, int N) : horizon(T), steps(N) {
        if (N < 1 || T <= 0.0) throw TapeError("TimeGrid: need N >= 1 and T > 0");
    }
    double dt() const { return horizon / steps; }
    double t(int i) const { return i * horizon / steps; }
};

// Brownian increments for a batch of samples. Entry (sample, step, dim) is a
// pure function of (stream, sample, step, dim), so batches are identical no
// matter how the work is partitioned.
struct BrownianBatch {
    int samples = 0, steps = 0, dim = 0;
    std::vector<double> dw;  // samples x steps x dim, row-major

    double at(int sample, int step, int l) const {
        return dw[(static_cast<std::size_t>(sample) * steps + step) * dim + l];
    }
    Tensor step_tensor(int step) const {
        Tensor t(samples, dim);
        for (int s = 0; s < samples; ++s)
            for (int l = 0; l < dim; ++l) t.at(s, l) = at(s, step, l);
        return t;
    }
};

inline BrownianBatch sample_brownian(const TimeGrid& grid, int samples, int dim,
                                     rng::Stream stream) {
    if (samples < 1) throw TapeError("sample_brownian: need at least one sample");
    BrownianBatch b;
    b.samples = samples;
    b.steps = grid.steps;
    b.dim = dim;
    b.dw.resize(static_cast<std::size_t>(samples) * grid.steps * dim);
    const double sqrt_dt = std::sqrt(grid.dt());
    for (int s = 0; s < samples; ++s)
        for (int i = 0; i < grid.steps; ++i)
            for (int l = 0; l < dim; ++l) {
                const std::uint64_t counter =
                    (static_cast<std::uint64_t>(s) << 24) ^
                    (static_cast<std::uint64_t>(i) << 8) ^ static_cast<std::uint64_t>(l);
                b.dw[(static_cast<std::size_t>(s) * grid.steps + i) * dim + l] =
                    sqrt_dt * stream.normal(counter);
            }
    return b;
}

// Feedback policies build tape expressions per step.
using QPolicy = std::function<NodeId(Tape&, int step, double t, NodeId X, NodeId P)>;
using UPolicy = std::function<NodeId(Tape&, int step, double t, NodeId X, NodeId P, NodeId Q)>;
using UPolicy2 =
    std::function<NodeId(Tape&, int step, double t, NodeId X, NodeId P, NodeId Q, NodeId Pmat)>;

struct PathBatch {
    int samples = 0, steps = 0;
    std::vector<NodeId> x, p;    // steps + 1 states, Bxn
    std::vector<NodeId> q;       // per-step controls, Bx(n*d)
    std::vector<NodeId> u;       // per-step controls, Bxk (empty for hbar rollouts)
    std::vector<NodeId> P2;      // second-order state, Bx(n*n)
    std::vector<NodeId> Q2;      // second-order control, Bx(n*n*d)
    NodeId penalty = -1;         // Bx1 accumulated H_u^2, unweighted
};

namespace detail {

[[noreturn]] inline void rethrow_at_step(const TapeError& e, int step) {
    throw TapeError("rollout step " + std::to_string(step) + ": " + e.what());
}

inline NodeId stage_x0(const ProblemSpec& prob, Tape& tape, int batch) {
    return tape.broadcast_rows(tape.constant(Tensor::row(prob.x0)), batch);
}

}  // namespace detail

// First-order system: x and p stepped with the problem coefficients; when
// accumulate_penalty is set, H_u(t_i,.)^2 is summed per sample (the lambda
// and the merged T/N factor are applied by the caller).
inline PathBatch rollout_first_order(const ProblemSpec& prob, Tape& tape, const TimeGrid& grid,
                                     const BrownianBatch& dw, const QPolicy& q_policy,
                                     const UPolicy& u_policy, NodeId p0,
                                     bool accumulate_penalty = false) {
    const int batch = dw.samples;
    PathBatch paths;
    paths.samples = batch;
    paths.steps = grid.steps;
    paths.x.push_back(detail::stage_x0(prob, tape, batch));
    paths.p.push_back(tape.val(p0).rows == batch ? p0 : tape.broadcast_rows(p0, batch));
    if (accumulate_penalty && !prob.has_ham_u())
        throw TapeError("rollout_first_order: problem registers no H_u for the penalty");
    const double dt = grid.dt();
    for (int i = 0; i < grid.steps; ++i) {
        try {
            const double ti = grid.t(i);
            const NodeId xi = paths.x.back();
            const NodeId pi = paths.p.back();
            const NodeId dwi = tape.constant(dw.step_tensor(i));
            const NodeId qi = q_policy(tape, i, ti, xi, pi);
            const NodeId ui = u_policy(tape, i, ti, xi, pi, qi);
            const NodeId b = prob.drift(tape, ti, xi, ui);
            const NodeId sig = prob.diffusion(tape, ti, xi, ui);
            const NodeId hx = prob.ham_x(tape, ti, xi, ui, pi, qi);
            paths.q.push_back(qi);
            paths.u.push_back(ui);
            paths.x.push_back(tape.add(
                xi, tape.add(tape.scale(b, dt), tape.contract_dw(sig, dwi, prob.n, prob.d))));
            paths.p.push_back(tape.add(
                pi,
                tape.add(tape.scale(hx, -dt), tape.contract_dw(qi, dwi, prob.n, prob.d))));
            if (accumulate_penalty) {
                const NodeId hu = prob.ham_u(tape, ti, xi, ui, pi, qi);
                const NodeId sq = tape.sum_cols(tape.mul(hu, hu));
                paths.penalty = paths.penalty < 0 ? sq : tape.add(paths.penalty, sq);
            }
        } catch (const TapeError& e) {
            detail::rethrow_at_step(e, i);
        }
    }
    return paths;
}

// Pure-FBSDE form driven by the Hbar derivative triple; no control process.
inline PathBatch rollout_hbar(const ProblemSpec& prob, Tape& tape, const TimeGrid& grid,
                              const BrownianBatch& dw, const QPolicy& q_policy, NodeId p0) {
    if (!prob.has_hbar()) throw TapeError("rollout_hbar: problem registers no Hbar triple");
    const int batch = dw.samples;
    PathBatch paths;
    paths.samples = batch;
    paths.steps = grid.steps;
    paths.x.push_back(detail::stage_x0(prob, tape, batch));
    paths.p.push_back(tape.val(p0).rows == batch ? p0 : tape.broadcast_rows(p0, batch));
    const double dt = grid.dt();
    for (int i = 0; i < grid.steps; ++i) {
        try {
            const double ti = grid.t(i);
            const NodeId xi = paths.x.back();
            const NodeId pi = paths.p.back();
            const NodeId dwi = tape.constant(dw.step_tensor(i));
            const NodeId qi = q_policy(tape, i, ti, xi, pi);
            const NodeId hp = prob.hbar_p(tape, ti, xi, pi, qi);
            const NodeId hq = prob.hbar_q(tape, ti, xi, pi, qi);
            const NodeId hx = prob.hbar_x(tape, ti, xi, pi, qi);
            paths.q.push_back(qi);
            paths.x.push_back(tape.add(
                xi, tape.add(tape.scale(hp, dt), tape.contract_dw(hq, dwi, prob.n, prob.d))));
            paths.p.push_back(tape.add(
                pi,
                tape.add(tape.scale(hx, -dt), tape.contract_dw(qi, dwi, prob.n, prob.d))));
        } catch (const TapeError& e) {
            detail::rethrow_at_step(e, i);
        }
    }
    return paths;
}

// Second-order system: adds P and Q with drift
//   F = b_x^T P + P b_x + sum_j s_j^T P s_j + sum_j (s_j^T Q_j + Q_j s_j) + H_xx,
// with the constant coefficient matrices registered on the problem. P slices
// are symmetrized as (A + A^T)/2 after every step.
inline PathBatch rollout_second_order(const ProblemSpec& prob, Tape& tape, const TimeGrid& grid,
                                      const BrownianBatch& dw, const QPolicy& q_policy,
                                      const QPolicy& bigq_policy, const UPolicy2& u_policy,
                                      NodeId p0, NodeId big_p0) {
    if (!prob.has_second_order())
        throw TapeError("rollout_second_order: problem lacks second-order coefficients");
    const int batch = dw.samples;
    const int n = prob.n, d = prob.d;
    PathBatch paths;
    paths.samples = batch;
    paths.steps = grid.steps;
    paths.x.push_back(detail::stage_x0(prob, tape, batch));
    paths.p.push_back(tape.val(p0).rows == batch ? p0 : tape.broadcast_rows(p0, batch));
    paths.P2.push_back(tape.val(big_p0).rows == batch ? big_p0
                                                      : tape.broadcast_rows(big_p0, batch));

    Tensor bx_t(n, n), hxx_row(1, n * n, prob.hxx->v);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) bx_t.at(i, j) = prob.bx->at(j, i);
    const NodeId bx_id = tape.constant(*prob.bx);
    const NodeId bxT_id = tape.constant(bx_t);
    std::vector<NodeId> sigx_ids, sigxT_ids;
    for (const Tensor& s : *prob.sigx) {
        Tensor st(n, n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) st.at(i, j) = s.at(j, i);
        sigx_ids.push_back(tape.constant(s));
        sigxT_ids.push_back(tape.constant(st));
    }
    const NodeId hxx_id = tape.broadcast_rows(tape.constant(hxx_row), batch);

    const double dt = grid.dt();
    for (int i = 0; i < grid.steps; ++i) {
        try {
            const double ti = grid.t(i);
            const NodeId xi = paths.x.back();
            const NodeId pi = paths.p.back();
            const NodeId Pi = paths.P2.back();
            const NodeId dwi = tape.constant(dw.step_tensor(i));
            const NodeId qi = q_policy(tape, i, ti, xi, pi);
            const NodeId Qi_raw = bigq_policy(tape, i, ti, xi, pi);
            const NodeId ui = u_policy(tape, i, ti, xi, pi, qi, Pi);
            paths.q.push_back(qi);
            paths.u.push_back(ui);

            // Symmetrized per-j slices of Q, and their dW contraction.
            std::vector<NodeId> q_slices;
            NodeId q_dw = -1;
            for (int j = 0; j < d; ++j) {
                NodeId slice;
                if (d == 1) {
                    slice = Qi_raw;
                } else {
                    std::vector<int> idx(n * n);
                    for (int e = 0; e < n * n; ++e) idx[e] = e * d + j;
                    slice = tape.gather_cols(Qi_raw, idx);
                }
                slice = tape.per_sample_symmetrize(slice, n);
                q_slices.push_back(slice);
                const NodeId dwj = tape.broadcast_cols(tape.gather_cols(dwi, {j}), n * n);
                const NodeId term = tape.mul(slice, dwj);
                q_dw = q_dw < 0 ? term : tape.add(q_dw, term);
            }
            paths.Q2.push_back(d == 1 ? q_slices[0] : Qi_raw);

            NodeId F = tape.add(tape.per_sample_lmul(bxT_id, Pi, n, n),
                                tape.per_sample_rmul(Pi, bx_id, n, n));
            for (int j = 0; j < d; ++j) {
                F = tape.add(F, tape.per_sample_lmul(
                                    sigxT_ids[j],
                                    tape.per_sample_rmul(Pi, sigx_ids[j], n, n), n, n));
                F = tape.add(F, tape.per_sample_lmul(sigxT_ids[j], q_slices[j], n, n));
                F = tape.add(F, tape.per_sample_rmul(q_slices[j], sigx_ids[j], n, n));
            }
            F = tape.add(F, hxx_id);

            const NodeId b = prob.drift(tape, ti, xi, ui);
            const NodeId sig = prob.diffusion(tape, ti, xi, ui);
            const NodeId hx = prob.ham_x(tape, ti, xi, ui, pi, qi);
            paths.x.push_back(tape.add(
                xi, tape.add(tape.scale(b, dt), tape.contract_dw(sig, dwi, n, d))));
            paths.p.push_back(tape.add(
                pi, tape.add(tape.scale(hx, -dt), tape.contract_dw(qi, dwi, n, d))));
            paths.P2.push_back(tape.per_sample_symmetrize(
                tape.add(Pi, tape.add(tape.scale(F, -dt), q_dw)), n));
        } catch (const TapeError& e) {
            detail::rethrow_at_step(e, i);
        }
    }
    return paths;
}

struct LossVariant {
    enum Kind { kFirst, kFirstPlusPenalty, kFirstPlusSecond } kind = kFirst;
    double lambda = 0.0;

    static LossVariant first() { return {kFirst, 0.0}; }
    static LossVariant first_plus_penalty(double lambda) { return {kFirstPlusPenalty, lambda}; }
    static LossVariant first_plus_second() { return {kFirstPlusSecond, 0.0}; }
};

// (1/M) sum |-h_x(x_T) - p_T|^2 [+ lambda * penalty] [+ |-h_xx(x_T) - P_T|^2_F].
inline NodeId terminal_loss(const ProblemSpec& prob, Tape& tape, const PathBatch& paths,
                            LossVariant variant) {
    const NodeId xT = paths.x.back();
    const NodeId err = tape.add(prob.terminal_grad(tape, xT), paths.p.back());
    NodeId loss = tape.mean(tape.sum_cols(tape.mul(err, err)));
    if (variant.kind == LossVariant::kFirstPlusPenalty) {
        if (paths.penalty < 0) throw TapeError("terminal_loss: paths carry no penalty");
        loss = tape.add(loss, tape.scale(tape.mean(paths.penalty), variant.lambda));
    }
    if (variant.kind == LossVariant::kFirstPlusSecond) {
        if (paths.P2.empty()) throw TapeError("terminal_loss: paths carry no second-order state");
        const NodeId errP = tape.add(prob.terminal_hess(tape, xT), paths.P2.back());
        loss = tape.add(loss, tape.mean(tape.sum_cols(tape.mul(errP, errP))));
    }
    return loss;
}

// J = (1/M) sum_j [ (T/N) sum_i f(t_i, x_i, u_i) + h(x_T) ], left endpoints.
inline NodeId cost_functional(const ProblemSpec& prob, Tape& tape, const TimeGrid& grid,
                              const PathBatch& paths) {
    if (paths.u.size() != static_cast<std::size_t>(paths.steps))
        throw TapeError("cost_functional: paths carry no control process");
    NodeId acc = -1;
    for (int i = 0; i < paths.steps; ++i) {
        const NodeId fi = prob.running_cost(tape, grid.t(i), paths.x[i], paths.u[i]);
        acc = acc < 0 ? fi : tape.add(acc, fi);
    }
    const NodeId h = prob.terminal_cost(tape, paths.x.back());
    return tape.mean(tape.add(tape.scale(acc, grid.dt()), h));
}

}  // namespace smp
