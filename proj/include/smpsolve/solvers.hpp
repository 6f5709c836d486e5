// Training algorithms for the terminal-loss reformulation of the stochastic
// control problem:
//   alg 1 - one network for q, maximum condition solved per step (explicit
//           argmax when registered, L-BFGS otherwise),
//   alg 2 - networks for q and u, squared H_u penalty added to the loss,
//   alg 3 - one network for q driving the Hbar-form FBSDE, control recovered
//           by a single argmax pass after training,
//   alg 4 - second-order system with networks for q and Q,
//   alg 0 - direct cost minimization over a control network (baseline).
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "smpsolve/inner_opt.hpp"
#include "smpsolve/nn.hpp"
#include "smpsolve/parallel.hpp"
#include "smpsolve/problems.hpp"
#include "smpsolve/rollout.hpp"

namespace smp {

struct TrainConfig {
    std::string problem = "lq";
    int algorithm = 3;  // 0 = direct baseline, 1..4 as above
    int n = 5;
    BuiltinParams problem_params;
    int time_steps = 25;
    int batch = 64;
    int test_paths = 512;
    int final_eval_paths = 0;  // 0 means test_paths
    int iterations = 2000;
    double learning_rate = 5e-3;
    double lambda = 0.01;
    int eval_interval = 25;
    // A time-shared network normalized with per-call batch statistics cannot
    // carry the time input through training (the constant column cancels in
    // the batch mean), so runs default to plain affine+ReLU layers.
    bool batchnorm = false;
    bool force_lbfgs = false;    // alg 1: solve the maximum condition numerically
    bool randomize_p0 = false;
    bool per_step_nets = false;  // alg 3: a separate network per time point
    std::string checkpoint_prefix;  // when set, trained networks are dumped here

    std::string tag() const {
        std::ostringstream os;
        os << problem << "/alg" << algorithm << "/n" << n << "/N" << time_steps << "/M" << batch
           << "/it" << iterations << "/lr" << learning_rate << "/lam" << lambda << "/bn"
           << batchnorm << "/lbfgs" << force_lbfgs << "/psn" << per_step_nets;
        return os.str();
    }
};

struct EvalPoint {
    int iteration = 0;
    double loss = std::numeric_limits<double>::quiet_NaN();
    double cost = std::numeric_limits<double>::quiet_NaN();
    double p0_mean = std::numeric_limits<double>::quiet_NaN();
    double p0_min = std::numeric_limits<double>::quiet_NaN();
    double p0_max = std::numeric_limits<double>::quiet_NaN();
    double wall_ms = 0.0;
};

struct SolveReport {
    std::uint64_t seed = 0;
    std::string config_tag;
    std::vector<double> p0;  // empty for the direct baseline
    std::vector<EvalPoint> curve;
    double final_loss = std::numeric_limits<double>::quiet_NaN();
    double final_cost = std::numeric_limits<double>::quiet_NaN();
    double mean_abs_hu = std::numeric_limits<double>::quiet_NaN();  // alg 2 only
    double max_p2_asymmetry = std::numeric_limits<double>::quiet_NaN();  // alg 4 only
    double wall_seconds = 0.0;
    bool diverged = false;
    std::string divergence_note;
};

namespace detail {

constexpr std::uint64_t kTrainTag = 0x747261696eULL;
constexpr std::uint64_t kTestTag = 0x74657374ULL;
constexpr std::uint64_t kFinalTag = 0x66696e616cULL;
constexpr std::uint64_t kNetTag = 0x6e6574ULL;
constexpr std::uint64_t kP0Tag = 0x703030ULL;

inline double lr_at(const TrainConfig& cfg, int iteration) {
    // Halved at 40% and 80% of the iteration budget.
    double lr = cfg.learning_rate;
    if (cfg.iterations > 0) {
        if (iteration >= (4 * cfg.iterations) / 10) lr *= 0.5;
        if (iteration >= (8 * cfg.iterations) / 10) lr *= 0.5;
    }
    return lr;
}

inline Tensor initial_p0(const ProblemSpec& prob, const TrainConfig& cfg, std::uint64_t seed) {
    const std::vector<double> hx = terminal_grad_at(prob, prob.x0);
    Tensor p0(1, prob.n);
    for (int i = 0; i < prob.n; ++i) p0.at(0, i) = -hx[i];
    if (cfg.randomize_p0) {
        const rng::Stream s = rng::Stream(seed).child(kP0Tag);
        for (int i = 0; i < prob.n; ++i) p0.at(0, i) += 0.1 * s.normal(i);
    }
    return p0;
}

inline Tensor initial_big_p0(const ProblemSpec& prob) {
    // Packed upper triangle of -h_xx(x0).
    Tape tape;
    const Tensor hxx =
        tape.val(prob.terminal_hess(tape, tape.constant(Tensor::row(prob.x0))));
    const int n = prob.n;
    Tensor packed(1, n * (n + 1) / 2);
    int k = 0;
    for (int i = 0; i < n; ++i)
        for (int j = i; j < n; ++j, ++k) packed.at(0, k) = -hxx.at(0, i * n + j);
    return packed;
}

inline NodeId time_column(Tape& tape, double t, int batch) {
    return tape.constant(Tensor::full(batch, 1, t));
}

// (t, x) network input.
inline NodeId input_tx(Tape& tape, double t, NodeId X) {
    return tape.concat_cols(time_column(tape, t, tape.val(X).rows), X);
}
// (t, x, p) network input.
inline NodeId input_txp(Tape& tape, double t, NodeId X, NodeId P) {
    return tape.concat_cols(input_tx(tape, t, X), P);
}

// Per-sample L-BFGS solve of the maximum condition; the result enters the
// tape as a constant (locally fixed control).
class LbfgsControl {
  public:
    LbfgsControl(const ProblemSpec& prob, int batch) : prob_(prob) {
        warm_.assign(batch, Eigen::VectorXd::Zero(prob.k));
    }

    Tensor solve_batch(double t, const Tensor& xv, const Tensor& pv, const Tensor& qv) {
        const int batch = xv.rows;
        Tensor uv(batch, prob_.k);
        std::optional<BoxBounds> box;
        if (prob_.domain == ControlDomain::kBox) {
            box = BoxBounds{
                Eigen::Map<const Eigen::VectorXd>(prob_.box_lo.data(), prob_.k),
                Eigen::Map<const Eigen::VectorXd>(prob_.box_hi.data(), prob_.k)};
        }
        for (int s = 0; s < batch; ++s) {
            std::vector<double> x(xv.v.begin() + static_cast<std::ptrdiff_t>(s) * prob_.n,
                                  xv.v.begin() + static_cast<std::ptrdiff_t>(s + 1) * prob_.n);
            std::vector<double> p(pv.v.begin() + static_cast<std::ptrdiff_t>(s) * prob_.n,
                                  pv.v.begin() + static_cast<std::ptrdiff_t>(s + 1) * prob_.n);
            std::vector<double> q(
                qv.v.begin() + static_cast<std::ptrdiff_t>(s) * prob_.n * prob_.d,
                qv.v.begin() + static_cast<std::ptrdiff_t>(s + 1) * prob_.n * prob_.d);
            auto [value, grad] = hamiltonian_objective(prob_, t, x, p, q);
            const OptResult r = lbfgs_maximize(value, grad, warm_[s], box);
            warm_[s] = r.u;
            for (int i = 0; i < prob_.k; ++i) uv.at(s, i) = r.u[i];
        }
        return uv;
    }

  private:
    const ProblemSpec& prob_;
    std::vector<Eigen::VectorXd> warm_;
};

// Generalized-Hamiltonian maximization for the second-order system:
//   curly_H(u) = H(t,x,u,p,q) + tr[(sigma(t,x,u) - sigma*)^T P (sigma - sigma*)]/2
// solved to a fixed point in sigma*.
class GeneralizedControl {
  public:
    GeneralizedControl(const ProblemSpec& prob, int batch) : prob_(prob) {
        warm_.assign(batch, Eigen::VectorXd::Zero(prob.k));
    }

    Tensor solve_batch(double t, const Tensor& xv, const Tensor& pv, const Tensor& qv,
                       const Tensor& bigp) {
        const int batch = xv.rows;
        const int n = prob_.n, d = prob_.d, k = prob_.k;
        Tensor uv(batch, k);
        for (int s = 0; s < batch; ++s) {
            const std::vector<double> x(xv.v.begin() + static_cast<std::ptrdiff_t>(s) * n,
                                        xv.v.begin() + static_cast<std::ptrdiff_t>(s + 1) * n);
            const std::vector<double> p(pv.v.begin() + static_cast<std::ptrdiff_t>(s) * n,
                                        pv.v.begin() + static_cast<std::ptrdiff_t>(s + 1) * n);
            const std::vector<double> q(
                qv.v.begin() + static_cast<std::ptrdiff_t>(s) * n * d,
                qv.v.begin() + static_cast<std::ptrdiff_t>(s + 1) * n * d);
            Tensor P(n, n);
            for (int i = 0; i < n * n; ++i)
                P.v[i] = bigp.v[static_cast<std::size_t>(s) * n * n + i];

            Eigen::VectorXd u = warm_[s];
            if (prob_.has_argmax()) {
                Tape tp;
                const Tensor us = tp.val(prob_.explicit_argmax(
                    tp, t, tp.constant(Tensor::row(x)), tp.constant(Tensor::row(p)),
                    tp.constant(Tensor::row(q))));
                for (int i = 0; i < k; ++i) u[i] = us.v[i];
            }
            for (int sweep = 0; sweep < 4; ++sweep) {
                const std::vector<double> sigma_star = sigma_at(t, x, u);
                auto objective = [&](const Eigen::VectorXd& uc, bool want_grad)
                    -> std::pair<double, Eigen::VectorXd> {
                    Tape tape;
                    const NodeId X = tape.constant(Tensor::row(x));
                    const NodeId U =
                        tape.leaf(Tensor::row({uc.data(), uc.data() + uc.size()}), true);
                    const NodeId Pn = tape.constant(Tensor::row(p));
                    const NodeId Qn = tape.constant(Tensor::row(q));
                    const NodeId b = prob_.drift(tape, t, X, U);
                    const NodeId sg = prob_.diffusion(tape, t, X, U);
                    const NodeId f = prob_.running_cost(tape, t, X, U);
                    NodeId value = tape.sub(
                        tape.add(tape.sum(tape.mul(Pn, b)), tape.sum(tape.mul(Qn, sg))),
                        tape.sum(f));
                    const NodeId ds =
                        tape.sub(sg, tape.constant(Tensor::row(sigma_star)));
                    // tr[ds^T P ds] summed over the d columns.
                    const NodeId pds = tape.per_sample_lmul(tape.constant(P), ds, n, d);
                    value = tape.add(value, tape.scale(tape.sum(tape.mul(ds, pds)), 0.5));
                    if (!want_grad) return {tape.val(value).item(), {}};
                    Tape::Gradients g = tape.backward(value);
                    const Tensor& gu = g.at(U);
                    return {tape.val(value).item(),
                            Eigen::Map<const Eigen::VectorXd>(gu.v.data(), k)};
                };
                ValueFn value = [&](const Eigen::VectorXd& uc) {
                    return objective(uc, false).first;
                };
                GradFn grad = [&](const Eigen::VectorXd& uc) {
                    return objective(uc, true).second;
                };
                const OptResult r = lbfgs_maximize(value, grad, u);
                const double moved = (r.u - u).norm();
                u = r.u;
                if (moved <= 1e-10) break;
            }
            warm_[s] = u;
            for (int i = 0; i < k; ++i) uv.at(s, i) = u[i];
        }
        return uv;
    }

  private:
    const ProblemSpec& prob_;
    std::vector<Eigen::VectorXd> warm_;

    std::vector<double> sigma_at(double t, const std::vector<double>& x,
                                 const Eigen::VectorXd& u) {
        Tape tape;
        const NodeId X = tape.constant(Tensor::row(x));
        const NodeId U = tape.constant(Tensor::row({u.data(), u.data() + u.size()}));
        return tape.val(prob_.diffusion(tape, t, X, U)).v;
    }
};

struct TrainableLeaf {
    NodeId id;
    Tensor* value;
};

// Collects network bindings plus free trainable tensors and applies Adam.
struct ParamSet {
    std::vector<Tensor*> params;
    std::vector<NodeId> ids;

    void absorb(const StagedMlp& staged) {
        for (const auto& [id, tensor] : staged.bindings) {
            ids.push_back(id);
            params.push_back(tensor);
        }
    }
    void absorb(const TrainableLeaf& leaf) {
        ids.push_back(leaf.id);
        params.push_back(leaf.value);
    }

    void step(Tape& tape, Tape::Gradients& grads, AdamState& state, double lr) const {
        std::vector<Tensor> gs;
        gs.reserve(ids.size());
        for (NodeId id : ids) gs.push_back(grads.at(id));
        (void)tape;
        adam_step(params, gs, state, lr);
    }
};

}  // namespace detail

// Per-algorithm network widths following the benchmark protocol.
inline std::vector<int> net_widths(int algorithm, int n, int d, int k, bool for_control) {
    const int h1 = 10 + 2 * n;
    const int h2 = 10 + n;
    switch (algorithm) {
        case 1:
        case 3:
            return {1 + 2 * n, h1, h1, h1, n * d};
        case 2:
            return for_control ? std::vector<int>{1 + n, h2, h2, h2, k}
                               : std::vector<int>{1 + n, h2, h2, h2, n * d};
        case 4:
            return for_control ? std::vector<int>{1 + n, h1, h1, h1, n * n * d}
                               : std::vector<int>{1 + n, h1, h1, h1, n * d};
        case 0:
            return {1 + n, h1, h1, h1, k};
        default:
            throw TapeError("net_widths: unknown algorithm");
    }
}

inline void validate_dispatch(const ProblemSpec& prob, const TrainConfig& cfg) {
    switch (cfg.algorithm) {
        case 0:
            return;
        case 1:
            return;  // explicit argmax when registered, L-BFGS otherwise
        case 2:
            if (!prob.has_ham_u())
                throw TapeError("algorithm 2 needs H_u with genuine control dependence; '" +
                                prob.name + "' has none (H_theta = q), pick algorithm 1 or 3");
            return;
        case 3:
            if (!prob.has_hbar())
                throw TapeError("algorithm 3 needs the Hbar derivative triple; '" + prob.name +
                                "' does not register one");
            return;
        case 4:
            if (!prob.has_second_order())
                throw TapeError("algorithm 4 needs h_xx, b_x, sigma_x and H_xx; '" + prob.name +
                                "' does not register them");
            return;
        default:
            throw TapeError("unknown algorithm id " + std::to_string(cfg.algorithm));
    }
}

// Trains one run. Deterministic in (cfg, seed).
inline SolveReport solve(const ProblemSpec& prob, const TrainConfig& cfg, std::uint64_t seed) {
    validate_dispatch(prob, cfg);
    const auto t_start = std::chrono::steady_clock::now();
    const TimeGrid grid(prob.horizon, cfg.time_steps);
    const rng::Stream run_stream(seed);

    SolveReport report;
    report.seed = seed;
    report.config_tag = cfg.tag();

    // Networks per algorithm.
    std::vector<Mlp> nets;
    const std::uint64_t net_seed_base = run_stream.child(detail::kNetTag).key();
    auto add_net = [&](int role, const std::vector<int>& widths) {
        nets.push_back(Mlp::create(widths, net_seed_base + role, cfg.batchnorm));
    };
    const int alg = cfg.algorithm;
    if (alg == 1) {
        add_net(0, net_widths(1, prob.n, prob.d, prob.k, false));
    } else if (alg == 2) {
        add_net(0, net_widths(2, prob.n, prob.d, prob.k, false));
        add_net(1, net_widths(2, prob.n, prob.d, prob.k, true));
    } else if (alg == 3) {
        const int copies = cfg.per_step_nets ? cfg.time_steps : 1;
        for (int c = 0; c < copies; ++c) add_net(c, net_widths(3, prob.n, prob.d, prob.k, false));
    } else if (alg == 4) {
        add_net(0, net_widths(4, prob.n, prob.d, prob.k, false));
        add_net(1, net_widths(4, prob.n, prob.d, prob.k, true));
    } else {
        add_net(0, net_widths(0, prob.n, prob.d, prob.k, true));
    }

    Tensor p0 = detail::initial_p0(prob, cfg, seed);
    Tensor big_p0 = (alg == 4) ? detail::initial_big_p0(prob) : Tensor();

    // Adam over all trainables, nets first, then p0 (and P0 for alg 4).
    std::vector<Tensor*> all_params;
    for (Mlp& net : nets)
        for (Tensor* p : net.parameters()) all_params.push_back(p);
    if (alg != 0) all_params.push_back(&p0);
    if (alg == 4) all_params.push_back(&big_p0);
    AdamState adam = AdamState::like(all_params);

    const BrownianBatch test_dw = sample_brownian(
        grid, cfg.test_paths, prob.d, run_stream.child(detail::kTestTag));

    // Assembles loss (and optionally cost) on a fresh tape.
    struct Assembled {
        NodeId loss = -1;
        NodeId cost = -1;
        NodeId penalty = -1;
        double p2_asymmetry = std::numeric_limits<double>::quiet_NaN();
        detail::ParamSet params;
    };
    auto assemble = [&](Tape& tape, const BrownianBatch& dw, NetMode mode,
                        bool want_cost) -> Assembled {
        Assembled out;
        std::vector<StagedMlp> staged;
        staged.reserve(nets.size());
        for (Mlp& net : nets) staged.push_back(net.stage(tape));
        for (const StagedMlp& s : staged) out.params.absorb(s);

        NodeId p0_id = -1;
        if (alg != 0) {
            p0_id = tape.leaf(p0, true);
            out.params.absorb({p0_id, &p0});
        }

        if (alg == 1) {
            QPolicy qp = [&](Tape& t, int, double ti, NodeId X, NodeId P) {
                return nets[0].forward(t, staged[0], detail::input_txp(t, ti, X, P), mode);
            };
            UPolicy up;
            std::shared_ptr<detail::LbfgsControl> inner;
            if (prob.has_argmax() && !cfg.force_lbfgs) {
                up = [&](Tape& t, int, double ti, NodeId X, NodeId P, NodeId Q) {
                    return prob.explicit_argmax(t, ti, X, P, Q);
                };
            } else {
                inner = std::make_shared<detail::LbfgsControl>(prob, dw.samples);
                up = [&, inner](Tape& t, int, double ti, NodeId X, NodeId P, NodeId Q) {
                    return t.constant(
                        inner->solve_batch(ti, t.val(X), t.val(P), t.val(Q)));
                };
            }
            const PathBatch paths = rollout_first_order(prob, tape, grid, dw, qp, up, p0_id);
            out.loss = terminal_loss(prob, tape, paths, LossVariant::first());
            if (want_cost) out.cost = cost_functional(prob, tape, grid, paths);
            return out;
        }

        if (alg == 2) {
            QPolicy qp = [&](Tape& t, int, double ti, NodeId X, NodeId) {
                return nets[0].forward(t, staged[0], detail::input_tx(t, ti, X), mode);
            };
            UPolicy up = [&](Tape& t, int, double ti, NodeId X, NodeId, NodeId) {
                return nets[1].forward(t, staged[1], detail::input_tx(t, ti, X), mode);
            };
            const PathBatch paths =
                rollout_first_order(prob, tape, grid, dw, qp, up, p0_id, true);
            out.loss =
                terminal_loss(prob, tape, paths, LossVariant::first_plus_penalty(cfg.lambda));
            out.penalty = paths.penalty;
            if (want_cost) out.cost = cost_functional(prob, tape, grid, paths);
            return out;
        }

        if (alg == 3) {
            QPolicy qp = [&](Tape& t, int step, double ti, NodeId X, NodeId P) {
                const int which = cfg.per_step_nets ? step : 0;
                return nets[which].forward(t, staged[which],
                                           detail::input_txp(t, ti, X, P), mode);
            };
            PathBatch paths = rollout_hbar(prob, tape, grid, dw, qp, p0_id);
            out.loss = terminal_loss(prob, tape, paths, LossVariant::first());
            if (want_cost) {
                if (prob.has_argmax()) {
                    for (int i = 0; i < grid.steps; ++i)
                        paths.u.push_back(prob.explicit_argmax(tape, grid.t(i), paths.x[i],
                                                               paths.p[i], paths.q[i]));
                } else {
                    detail::LbfgsControl inner(prob, dw.samples);
                    for (int i = 0; i < grid.steps; ++i)
                        paths.u.push_back(tape.constant(
                            inner.solve_batch(grid.t(i), tape.val(paths.x[i]),
                                              tape.val(paths.p[i]), tape.val(paths.q[i]))));
                }
                out.cost = cost_functional(prob, tape, grid, paths);
            }
            return out;
        }

        if (alg == 4) {
            const NodeId packed = tape.leaf(big_p0, true);
            out.params.absorb({packed, &big_p0});
            const NodeId bigp0_id = tape.sym_expand(packed, prob.n);
            QPolicy qp = [&](Tape& t, int, double ti, NodeId X, NodeId) {
                return nets[0].forward(t, staged[0], detail::input_tx(t, ti, X), mode);
            };
            QPolicy bigq = [&](Tape& t, int, double ti, NodeId X, NodeId) {
                return nets[1].forward(t, staged[1], detail::input_tx(t, ti, X), mode);
            };
            auto inner = std::make_shared<detail::GeneralizedControl>(prob, dw.samples);
            UPolicy2 up = [&, inner](Tape& t, int, double ti, NodeId X, NodeId P, NodeId Q,
                                     NodeId Pmat) {
                return t.constant(inner->solve_batch(ti, t.val(X), t.val(P), t.val(Q),
                                                     t.val(Pmat)));
            };
            const PathBatch paths = rollout_second_order(prob, tape, grid, dw, qp, bigq, up,
                                                         p0_id, bigp0_id);
            out.loss = terminal_loss(prob, tape, paths, LossVariant::first_plus_second());
            if (want_cost) out.cost = cost_functional(prob, tape, grid, paths);
            double asym = 0.0;
            for (const NodeId id : paths.P2) {
                const Tensor& P = tape.val(id);
                for (int s = 0; s < P.rows; ++s)
                    for (int i = 0; i < prob.n; ++i)
                        for (int j = i + 1; j < prob.n; ++j)
                            asym = std::max(asym, std::abs(P.at(s, i * prob.n + j) -
                                                           P.at(s, j * prob.n + i)));
            }
            out.p2_asymmetry = asym;
            return out;
        }

        // Direct baseline: simulate x only and minimize the sampled cost.
        {
            PathBatch paths;
            paths.samples = dw.samples;
            paths.steps = grid.steps;
            paths.x.push_back(detail::stage_x0(prob, tape, dw.samples));
            const double dt = grid.dt();
            for (int i = 0; i < grid.steps; ++i) {
                const double ti = grid.t(i);
                const NodeId xi = paths.x.back();
                const NodeId ui =
                    nets[0].forward(tape, staged[0], detail::input_tx(tape, ti, xi), mode);
                const NodeId b = prob.drift(tape, ti, xi, ui);
                const NodeId sig = prob.diffusion(tape, ti, xi, ui);
                const NodeId dwi = tape.constant(dw.step_tensor(i));
                paths.u.push_back(ui);
                paths.x.push_back(tape.add(
                    xi,
                    tape.add(tape.scale(b, dt), tape.contract_dw(sig, dwi, prob.n, prob.d))));
            }
            out.cost = cost_functional(prob, tape, grid, paths);
            out.loss = out.cost;  // the baseline trains on the cost itself
            return out;
        }
    };

    auto evaluate = [&](const BrownianBatch& dw, int iteration) -> EvalPoint {
        Tape tape;
        const Assembled a = assemble(tape, dw, NetMode::kEval, true);
        EvalPoint pt;
        pt.iteration = iteration;
        pt.loss = tape.val(a.loss).item();
        pt.cost = a.cost >= 0 ? tape.val(a.cost).item() : pt.loss;
        if (alg != 0 && !p0.v.empty()) {
            pt.p0_mean = 0.0;
            pt.p0_min = p0.v[0];
            pt.p0_max = p0.v[0];
            for (double v : p0.v) {
                pt.p0_mean += v / static_cast<double>(p0.v.size());
                pt.p0_min = std::min(pt.p0_min, v);
                pt.p0_max = std::max(pt.p0_max, v);
            }
        }
        pt.wall_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - t_start)
                         .count();
        if (alg == 4) report.max_p2_asymmetry = a.p2_asymmetry;
        if (alg == 2 && a.penalty >= 0) {
            // Mean per-step |H_u| over samples and steps, via sqrt of the mean square.
            const double mean_pen = tape.val(tape.mean(a.penalty)).item();
            report.mean_abs_hu =
                std::sqrt(std::max(0.0, mean_pen / (grid.steps * prob.k)));
        }
        return pt;
    };

    try {
        report.curve.push_back(evaluate(test_dw, 0));
        for (int it = 0; it < cfg.iterations; ++it) {
            Tape tape;
            const BrownianBatch dw = sample_brownian(
                grid, cfg.batch, prob.d,
                run_stream.child(detail::kTrainTag).child(static_cast<std::uint64_t>(it)));
            const Assembled a = assemble(tape, dw, NetMode::kTrain, false);
            Tape::Gradients grads = tape.backward(a.loss);
            a.params.step(tape, grads, adam, detail::lr_at(cfg, it));
            if ((it + 1) % cfg.eval_interval == 0 || it + 1 == cfg.iterations)
                report.curve.push_back(evaluate(test_dw, it + 1));
        }
        // Final evaluation, optionally on a larger path set.
        const int final_paths = cfg.final_eval_paths > 0 ? cfg.final_eval_paths : cfg.test_paths;
        const BrownianBatch final_dw = sample_brownian(
            grid, final_paths, prob.d, run_stream.child(detail::kFinalTag));
        const EvalPoint final_pt = evaluate(final_dw, cfg.iterations);
        report.final_loss = final_pt.loss;
        report.final_cost = final_pt.cost;
    } catch (const TapeError& e) {
        report.diverged = true;
        report.divergence_note = e.what();
    }

    if (alg != 0) report.p0.assign(p0.v.begin(), p0.v.end());
    if (!cfg.checkpoint_prefix.empty() && !report.diverged)
        for (std::size_t i = 0; i < nets.size(); ++i)
            nets[i].save_file(cfg.checkpoint_prefix + "_seed" + std::to_string(seed) + "_net" +
                              std::to_string(i) + ".txt");
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return report;
}

// Trains several seeds on a small worker pool; reports come back in seed order.
inline std::vector<SolveReport> solve_seeds(const ProblemSpec& prob, const TrainConfig& cfg,
                                            const std::vector<std::uint64_t>& seeds, int jobs) {
    std::vector<SolveReport> reports(seeds.size());
    parallel_for_index(static_cast<int>(seeds.size()), jobs, [&](int i) {
        reports[static_cast<std::size_t>(i)] =
            solve(prob, cfg, seeds[static_cast<std::size_t>(i)]);
    });
    return reports;
}

// --- aggregation --------------------------------------------------------------
struct RunSummary {
    int runs = 0;
    double p0_mean = 0.0, p0_std = 0.0, p0_min = 0.0, p0_max = 0.0;
    double loss_mean = 0.0;
    double cost_mean = 0.0, cost_std = 0.0, cost_min = 0.0, cost_max = 0.0;
    double wall_mean_s = 0.0, wall_total_s = 0.0;
    double p0_rel_err = std::numeric_limits<double>::quiet_NaN();
    double cost_rel_err = std::numeric_limits<double>::quiet_NaN();
};

// Componentwise statistics over runs; population std by convention. Relative
// errors are computed against the supplied oracle values when present.
inline RunSummary aggregate_runs(const std::vector<SolveReport>& reports,
                                 std::optional<double> oracle_p0 = std::nullopt,
                                 std::optional<double> oracle_cost = std::nullopt) {
    if (reports.empty()) throw TapeError("aggregate_runs: no reports");
    for (const SolveReport& r : reports)
        if (r.config_tag != reports.front().config_tag)
            throw TapeError("aggregate_runs: mismatched run configurations");
    RunSummary s;
    s.runs = static_cast<int>(reports.size());
    std::vector<double> p0_all, costs, losses, walls;
    for (const SolveReport& r : reports) {
        for (double v : r.p0) p0_all.push_back(v);
        costs.push_back(r.final_cost);
        losses.push_back(r.final_loss);
        walls.push_back(r.wall_seconds);
    }
    auto mean_of = [](const std::vector<double>& v) {
        double acc = 0.0;
        for (double x : v) acc += x;
        return acc / static_cast<double>(v.size());
    };
    auto std_of = [&](const std::vector<double>& v, double m) {
        double acc = 0.0;
        for (double x : v) acc += (x - m) * (x - m);
        return std::sqrt(acc / static_cast<double>(v.size()));
    };
    if (!p0_all.empty()) {
        s.p0_mean = mean_of(p0_all);
        s.p0_std = std_of(p0_all, s.p0_mean);
        s.p0_min = *std::min_element(p0_all.begin(), p0_all.end());
        s.p0_max = *std::max_element(p0_all.begin(), p0_all.end());
    }
    s.loss_mean = mean_of(losses);
    s.cost_mean = mean_of(costs);
    s.cost_std = std_of(costs, s.cost_mean);
    s.cost_min = *std::min_element(costs.begin(), costs.end());
    s.cost_max = *std::max_element(costs.begin(), costs.end());
    s.wall_mean_s = mean_of(walls);
    for (double w : walls) s.wall_total_s += w;
    if (oracle_p0 && *oracle_p0 != 0.0)
        s.p0_rel_err = std::abs(s.p0_mean - *oracle_p0) / std::abs(*oracle_p0);
    if (oracle_cost && *oracle_cost != 0.0)
        s.cost_rel_err = std::abs(s.cost_mean - *oracle_cost) / std::abs(*oracle_cost);
    return s;
}

// Per-example tuned configurations: batch, iteration and penalty settings
// follow the benchmark protocol, with per-problem learning rates.
inline TrainConfig preset_config(const std::string& problem, int algorithm, int n) {
    TrainConfig cfg;
    cfg.problem = problem;
    cfg.algorithm = algorithm;
    cfg.n = n;
    if (problem == "lq" || problem == "lq_ones") {
        cfg.iterations = 2000;
        cfg.learning_rate = 5e-3;
        cfg.lambda = n >= 100 ? 0.05 : 0.01;
    } else if (problem == "nonlinear") {
        cfg.iterations = n >= 100 ? 5000 : 3000;
        cfg.learning_rate = 1e-2;
        cfg.lambda = 0.05;
    } else if (problem == "gexp") {
        cfg.iterations = n >= 100 ? 5000 : 3000;
        cfg.learning_rate = 1e-2;
        cfg.lambda = 0.0;
    } else if (problem == "transcendental") {
        cfg.iterations = 3000;
        cfg.learning_rate = 5e-3;
        cfg.lambda = 0.1;
    } else {
        throw TapeError("preset_config: unknown problem '" + problem + "'");
    }
    return cfg;
}

}  // namespace smp
