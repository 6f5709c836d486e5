// End-to-end gradient validation: the penalty-form training loss assembled
// exactly as the solver does, differentiated by the tape and compared
// against central finite differences over every trainable parameter.
#pragma once

#include <cstdint>
#include <vector>

#include "smpsolve/nn.hpp"
#include "smpsolve/problems.hpp"
#include "smpsolve/rollout.hpp"
#include "smpsolve/solvers.hpp"

namespace smp {

struct GradCheckResult {
    double max_rel_error = 0.0;
    int parameters = 0;
};

// Max relative error of the recorded gradient of the algorithm-2 loss
// (terminal matching plus lambda-weighted H_u^2 penalty) against central
// finite differences. Normalization layers are disabled: per-batch
// statistics would make single-parameter differences ill-posed.
inline GradCheckResult gradcheck_alg2_loss(int n = 2, int steps = 2, int batch = 8,
                                           double lambda = 0.01, std::uint64_t seed = 3,
                                           double fd_step = 1e-6) {
    const ProblemSpec prob = make_builtin("lq", n);
    const TimeGrid grid(prob.horizon, steps);
    const BrownianBatch dw =
        sample_brownian(grid, batch, prob.d, rng::Stream(seed).child(1));

    Mlp q_net = Mlp::create(net_widths(2, prob.n, prob.d, prob.k, false), seed + 10, false);
    Mlp u_net = Mlp::create(net_widths(2, prob.n, prob.d, prob.k, true), seed + 11, false);
    Tensor p0(1, n);
    const std::vector<double> hx = terminal_grad_at(prob, prob.x0);
    for (int i = 0; i < n; ++i) p0.at(0, i) = -hx[i];

    struct Assembly {
        NodeId loss;
        std::vector<std::pair<NodeId, Tensor*>> bindings;
    };
    auto assemble = [&](Tape& tape, Mlp& qn, Mlp& un, Tensor& p0v) -> Assembly {
        Assembly out{-1, {}};
        StagedMlp sq = qn.stage(tape);
        StagedMlp su = un.stage(tape);
        const NodeId p0_id = tape.leaf(p0v, true);
        out.bindings = sq.bindings;
        out.bindings.insert(out.bindings.end(), su.bindings.begin(), su.bindings.end());
        out.bindings.emplace_back(p0_id, &p0v);
        QPolicy qp = [&](Tape& t, int, double ti, NodeId X, NodeId) {
            return qn.forward(t, sq, t.concat_cols(t.constant(Tensor::full(t.val(X).rows, 1, ti)), X),
                              NetMode::kTrain);
        };
        UPolicy up = [&](Tape& t, int, double ti, NodeId X, NodeId, NodeId) {
            return un.forward(t, su, t.concat_cols(t.constant(Tensor::full(t.val(X).rows, 1, ti)), X),
                              NetMode::kTrain);
        };
        const PathBatch paths = rollout_first_order(prob, tape, grid, dw, qp, up, p0_id, true);
        out.loss = terminal_loss(prob, tape, paths, LossVariant::first_plus_penalty(lambda));
        return out;
    };

    // Analytic gradients at the base point.
    Tape tape;
    Assembly base = assemble(tape, q_net, u_net, p0);
    Tape::Gradients grads = tape.backward(base.loss);
    std::vector<double> flat, analytic;
    for (auto& [id, param] : base.bindings) {
        flat.insert(flat.end(), param->v.begin(), param->v.end());
        const Tensor& g = grads.at(id);
        analytic.insert(analytic.end(), g.v.begin(), g.v.end());
    }

    auto loss_at = [&](const std::vector<double>& values) {
        Mlp qn = q_net;
        Mlp un = u_net;
        Tensor p0v = p0;
        std::size_t k = 0;
        for (Tensor* p : qn.parameters())
            for (double& x : p->v) x = values[k++];
        for (Tensor* p : un.parameters())
            for (double& x : p->v) x = values[k++];
        for (double& x : p0v.v) x = values[k++];
        Tape t;
        return t.val(assemble(t, qn, un, p0v).loss).item();
    };

    GradCheckResult result;
    result.parameters = static_cast<int>(flat.size());
    result.max_rel_error = finite_diff_check(loss_at, flat, analytic, fd_step);
    return result;
}

}  // namespace smp
