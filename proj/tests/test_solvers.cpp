#include "test_common.hpp"

#include "smpsolve/oracles.hpp"
#include "smpsolve/solvers.hpp"

using namespace smp;

namespace {

TrainConfig tiny_config(const std::string& problem, int alg, int n) {
    TrainConfig cfg;
    cfg.problem = problem;
    cfg.algorithm = alg;
    cfg.n = n;
    cfg.time_steps = 5;
    cfg.batch = 8;
    cfg.test_paths = 16;
    cfg.iterations = 3;
    cfg.eval_interval = 2;
    return cfg;
}

}  // namespace

TEST_CASE("network widths follow the benchmark protocol") {
    REQUIRE(net_widths(1, 1, 1, 1, false) == std::vector<int>{3, 12, 12, 12, 1});
    REQUIRE(net_widths(2, 5, 1, 5, false) == std::vector<int>{6, 15, 15, 15, 5});
    REQUIRE(net_widths(2, 5, 1, 5, true) == std::vector<int>{6, 15, 15, 15, 5});
    REQUIRE(net_widths(3, 5, 1, 5, false) == std::vector<int>{11, 20, 20, 20, 5});
    REQUIRE(net_widths(4, 2, 1, 2, true) == std::vector<int>{3, 14, 14, 14, 4});
}

TEST_CASE("every algorithm wires up and produces finite results") {
    for (int alg : {0, 1, 2, 3, 4}) {
        TrainConfig cfg = tiny_config("lq", alg, 2);
        const ProblemSpec prob = make_builtin(cfg.problem, cfg.n, cfg.problem_params);
        const SolveReport rep = solve(prob, cfg, 1);
        INFO("alg " << alg);
        REQUIRE_FALSE(rep.diverged);
        REQUIRE(std::isfinite(rep.final_loss));
        REQUIRE(std::isfinite(rep.final_cost));
        if (alg != 0) {
            REQUIRE(rep.p0.size() == 2);
            for (double v : rep.p0) REQUIRE(std::isfinite(v));
        }
        REQUIRE_FALSE(rep.curve.empty());
    }
}

TEST_CASE("algorithm 1 runs with the forced inner solver") {
    TrainConfig cfg = tiny_config("lq", 1, 2);
    cfg.force_lbfgs = true;
    const ProblemSpec prob = make_builtin(cfg.problem, cfg.n, cfg.problem_params);
    const SolveReport rep = solve(prob, cfg, 2);
    REQUIRE_FALSE(rep.diverged);
    REQUIRE(std::isfinite(rep.final_loss));
}

TEST_CASE("transcendental runs under algorithm 1 via L-BFGS and under algorithm 2") {
    for (int alg : {1, 2}) {
        TrainConfig cfg = tiny_config("transcendental", alg, 2);
        const ProblemSpec prob = make_builtin(cfg.problem, cfg.n, cfg.problem_params);
        const SolveReport rep = solve(prob, cfg, 3);
        INFO("alg " << alg);
        REQUIRE_FALSE(rep.diverged);
        REQUIRE(std::isfinite(rep.final_cost));
    }
}

TEST_CASE("dispatch rejects invalid problem and algorithm pairings") {
    const ProblemSpec gexp = make_builtin("gexp", 2);
    try {
        validate_dispatch(gexp, tiny_config("gexp", 2, 2));
        FAIL("expected rejection");
    } catch (const TapeError& e) {
        REQUIRE(std::string(e.what()).find("H_theta") != std::string::npos);
    }
    const ProblemSpec trans = make_builtin("transcendental", 2);
    REQUIRE_THROWS_AS(validate_dispatch(trans, tiny_config("transcendental", 3, 2)), TapeError);
    REQUIRE_THROWS_AS(validate_dispatch(trans, tiny_config("transcendental", 4, 2)), TapeError);
    REQUIRE_NOTHROW(validate_dispatch(gexp, tiny_config("gexp", 3, 2)));
}

TEST_CASE("zero-iteration runs report the initialization, reproducibly") {
    TrainConfig cfg = tiny_config("lq", 3, 2);
    cfg.iterations = 0;
    const ProblemSpec prob = make_builtin(cfg.problem, cfg.n, cfg.problem_params);
    const SolveReport a = solve(prob, cfg, 7);
    const SolveReport b = solve(prob, cfg, 7);
    REQUIRE(a.p0 == b.p0);
    REQUIRE(a.final_loss == b.final_loss);
    REQUIRE(a.final_cost == b.final_cost);
    // p0 starts at -h_x(x0) = -x0.
    REQUIRE(a.p0 == std::vector<double>{-1.0, -1.0});

    TrainConfig direct = tiny_config("lq", 0, 2);
    direct.iterations = 0;
    const SolveReport c = solve(prob, direct, 7);
    const SolveReport d = solve(prob, direct, 7);
    REQUIRE(c.final_cost == d.final_cost);
    REQUIRE(std::isfinite(c.final_cost));
}

TEST_CASE("training runs are deterministic in seed and config") {
    TrainConfig cfg = tiny_config("lq", 2, 2);
    cfg.iterations = 8;
    const ProblemSpec prob = make_builtin(cfg.problem, cfg.n, cfg.problem_params);
    const SolveReport a = solve(prob, cfg, 11);
    const SolveReport b = solve(prob, cfg, 11);
    REQUIRE(a.p0 == b.p0);
    REQUIRE(a.final_loss == b.final_loss);
    const SolveReport c = solve(prob, cfg, 12);
    REQUIRE(a.p0 != c.p0);
}

TEST_CASE("frozen dynamics train to a vanishing combined loss") {
    // b = sigma = f = 0 with quadratic terminal cost; the exact solution is
    // p0 = -x0, P0 = -I and zero network outputs.
    ProblemSpec prob;
    prob.name = "frozen";
    prob.n = 2;
    prob.d = 1;
    prob.k = 2;
    prob.x0 = {1.0, -0.5};
    prob.horizon = 0.1;
    prob.drift = [](Tape& t, double, NodeId X, NodeId) {
        return t.constant(Tensor(t.val(X).rows, 2));
    };
    prob.diffusion = [](Tape& t, double, NodeId X, NodeId) {
        return t.constant(Tensor(t.val(X).rows, 2));
    };
    prob.running_cost = [](Tape& t, double, NodeId X, NodeId) {
        return t.constant(Tensor(t.val(X).rows, 1));
    };
    prob.terminal_cost = [](Tape& t, NodeId X) { return t.scale(t.sum_cols(t.mul(X, X)), 0.5); };
    prob.terminal_grad = [](Tape&, NodeId X) { return X; };
    prob.terminal_hess = [](Tape& t, NodeId X) {
        const int batch = t.val(X).rows;
        return t.broadcast_rows(t.constant(Tensor(1, 4, {1.0, 0.0, 0.0, 1.0})), batch);
    };
    prob.ham_x = [](Tape& t, double, NodeId X, NodeId, NodeId, NodeId) {
        return t.constant(Tensor(t.val(X).rows, 2));
    };
    prob.bx = Tensor(2, 2);
    prob.sigx = std::vector<Tensor>{Tensor(2, 2)};
    prob.hxx = Tensor(2, 2);

    TrainConfig cfg = tiny_config("frozen", 4, 2);
    cfg.batchnorm = false;
    cfg.iterations = 400;
    cfg.learning_rate = 1e-2;
    cfg.eval_interval = 100;
    const SolveReport rep = solve(prob, cfg, 5);
    REQUIRE_FALSE(rep.diverged);
    REQUIRE(rep.final_loss <= 1e-5);
    REQUIRE(rep.p0[0] == Catch::Approx(-1.0).margin(2e-3));
    REQUIRE(rep.p0[1] == Catch::Approx(0.5).margin(2e-3));
}

TEST_CASE("aggregate statistics") {
    SolveReport a;
    a.config_tag = "same";
    a.p0 = {-1.0, -1.0};
    a.final_cost = 2.0;
    a.final_loss = 0.1;
    a.wall_seconds = 1.0;
    SolveReport b = a;
    b.final_cost = 4.0;

    const RunSummary single = aggregate_runs({a});
    REQUIRE(single.runs == 1);
    REQUIRE(single.cost_mean == 2.0);
    REQUIRE(single.cost_std == 0.0);
    REQUIRE(single.p0_mean == -1.0);

    const RunSummary pair = aggregate_runs({a, b}, -0.9586, 2.388);
    REQUIRE(pair.cost_mean == 3.0);
    REQUIRE(pair.cost_std == 1.0);  // population convention
    REQUIRE(std::isfinite(pair.p0_rel_err));

    SolveReport c = a;
    c.config_tag = "different";
    REQUIRE_THROWS_AS(aggregate_runs({a, c}), TapeError);
}

TEST_CASE("loss decreases on a short lq run") {
    TrainConfig cfg = preset_config("lq", 3, 2);
    cfg.iterations = 400;
    cfg.eval_interval = 25;
    const ProblemSpec prob = make_builtin(cfg.problem, cfg.n, cfg.problem_params);
    const SolveReport rep = solve(prob, cfg, 21);
    REQUIRE_FALSE(rep.diverged);
    REQUIRE(rep.curve.size() >= 3);
    REQUIRE(rep.final_loss < rep.curve.front().loss);
}

TEST_CASE("seed pool returns reports in seed order and matches serial runs") {
    TrainConfig cfg = tiny_config("lq", 3, 2);
    cfg.iterations = 6;
    const ProblemSpec prob = make_builtin(cfg.problem, cfg.n, cfg.problem_params);
    const std::vector<std::uint64_t> seeds = {4, 5, 6, 7};
    const std::vector<SolveReport> pooled = solve_seeds(prob, cfg, seeds, 2);
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        REQUIRE(pooled[i].seed == seeds[i]);
        const SolveReport serial = solve(prob, cfg, seeds[i]);
        REQUIRE(pooled[i].p0 == serial.p0);
        REQUIRE(pooled[i].final_loss == serial.final_loss);
    }
}

TEST_CASE("lq with the all-ones terminal trains to the published cost") {
    TrainConfig cfg = preset_config("lq_ones", 2, 1);
    cfg.final_eval_paths = 2048;
    const ProblemSpec prob = make_builtin(cfg.problem, cfg.n, cfg.problem_params);
    const RunSummary s = aggregate_runs(solve_seeds(prob, cfg, {1, 2, 3}, 2));
    REQUIRE(std::abs(s.cost_mean - 0.4812) / 0.4812 <= 0.03);
}
