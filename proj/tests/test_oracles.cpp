#include "test_common.hpp"

#include "smpsolve/oracles.hpp"
#include "smpsolve/rollout.hpp"

using namespace smp;

TEST_CASE("rk4 stepper integrates K' = K to order four") {
    Eigen::MatrixXd k = Eigen::MatrixXd::Constant(1, 1, 1.0);
    const int steps = 10'000;
    const double h = 1.0 / steps;
    for (int i = 0; i < steps; ++i)
        k = rk4_step(k, h, [](const Eigen::MatrixXd& y) { return y; });
    REQUIRE(std::abs(k(0, 0) - std::exp(1.0)) <= 1e-9);
}

TEST_CASE("riccati solution at T = 0.1 with identity terminal") {
    const RiccatiSolution sol = riccati_rk4(1, 0.1, LqTerminal::kIdentity, 1000);
    REQUIRE(std::abs(sol.K0(0, 0) - 0.9586) <= 5e-4);
    REQUIRE(std::abs(sol.p0[0] - (-0.9586)) <= 5e-4);
    REQUIRE(sol.K_path.back()(0, 0) == 1.0);  // K(T) = Q exactly
}

TEST_CASE("riccati reproduces the all-ones terminal benchmarks") {
    const double expected[] = {-0.9586, -1.8275, -4.3638};
    const int dims[] = {1, 2, 5};
    for (int c = 0; c < 3; ++c) {
        const RiccatiSolution sol = riccati_rk4(dims[c], 0.1, LqTerminal::kOnes, 2000);
        for (int i = 0; i < dims[c]; ++i) REQUIRE(std::abs(sol.p0[i] - expected[c]) <= 1e-3);
    }
}

TEST_CASE("riccati path stays symmetric and self-converges") {
    const RiccatiSolution coarse = riccati_rk4(2, 0.1, LqTerminal::kOnes, 10'000);
    const RiccatiSolution fine = riccati_rk4(2, 0.1, LqTerminal::kOnes, 20'000);
    REQUIRE((coarse.K0 - fine.K0).norm() <= 1e-8);
    for (int i = 0; i <= coarse.steps; i += 500) {
        const Eigen::MatrixXd& K = coarse.K_path[i];
        REQUIRE((K - K.transpose()).norm() <= 1e-10);
    }
}

TEST_CASE("riccati input validation") {
    REQUIRE_THROWS_AS(riccati_rk4(1, 0.1, LqTerminal::kIdentity, 50), TapeError);
    REQUIRE_THROWS_AS(riccati_rk4(0, 0.1, LqTerminal::kIdentity, 1000), TapeError);
}

TEST_CASE("optimal-cost relation validated by monte carlo at n = 1") {
    // Simulate the feedback control u = -(K_t + M_t) x / 2 and compare the
    // sampled cost with x0^T K0 x0 / 2.
    const ProblemSpec prob = make_builtin("lq", 1);
    const RiccatiSolution sol = riccati_rk4(1, prob.horizon, LqTerminal::kIdentity, 5000);
    const TimeGrid grid(prob.horizon, 25);
    const int chunk = 20'000, chunks = 5;
    double acc = 0.0;
    for (int c = 0; c < chunks; ++c) {
        Tape tape;
        const BrownianBatch dw =
            sample_brownian(grid, chunk, prob.d, rng::Stream(31415).child(c));
        QPolicy qp = [&](Tape& t, int, double ti, NodeId X, NodeId) {
            return t.scale(X, -sol.M_at(ti)(0, 0));
        };
        UPolicy up = [&](Tape& t, int, double ti, NodeId X, NodeId, NodeId) {
            return t.scale(X, -0.5 * (sol.K_at(ti)(0, 0) + sol.M_at(ti)(0, 0)));
        };
        const PathBatch paths = rollout_first_order(
            prob, tape, grid, dw, qp, up, tape.constant(Tensor::row({sol.p0[0]})));
        acc += tape.val(cost_functional(prob, tape, grid, paths)).item();
    }
    const double j_mc = acc / chunks;
    const double j_riccati = lq_optimal_cost(sol, Eigen::VectorXd::Ones(1));
    REQUIRE(std::abs(j_mc - j_riccati) <= 0.005);
}

TEST_CASE("hopf-cole self-test with a linear terminal cost") {
    // h(x) = x makes E[exp(-h)] = exp(1 - x0), so J = x0 - 1.
    const MonteCarloValue mc =
        hopf_cole_mc(1, {0.0}, 1.0, 200'000, 77,
                     [](const std::vector<double>& x) { return x[0]; });
    REQUIRE(std::abs(mc.value - (-1.0)) <= 3.0 * mc.std_error);
}

TEST_CASE("hopf-cole estimate is stable across seeds") {
    const MonteCarloValue a = hopf_cole_mc(10, std::vector<double>(10, 0.0), 1.0, 100'000, 5);
    const MonteCarloValue b = hopf_cole_mc(10, std::vector<double>(10, 0.0), 1.0, 100'000, 6);
    REQUIRE(std::abs(a.value - b.value) <= 3.0 * (a.std_error + b.std_error));
    REQUIRE_THROWS_AS(hopf_cole_mc(1, {0.0}, 1.0, 100, 5), TapeError);
}

TEST_CASE("quadratic sub-linear expectation formula against pde solves") {
    REQUIRE(gexp_exact_quadratic(100, 2.0) == 400.0);
    REQUIRE(gexp_exact_quadratic(10, 2.0) == 40.0);
    // One-dimensional solve backs the n = 1 value.
    REQUIRE(std::abs(gheat_fd_1d(1.0, 2.0) - 4.0) <= 1e-3);
    // Two-dimensional solve backs coordinate additivity.
    REQUIRE(std::abs(gheat_fd_2d(1.0, 2.0) - 8.0) <= 1e-3);
}

TEST_CASE("lq hamiltonian-system coefficients satisfy the monotone conditions") {
    const FbsdeCoefficients spec = lq_monotonicity_coefficients(2);
    const MonotonicityReport rep = monotonicity_check(spec, 10'000, 123);
    REQUIRE(rep.pass);
    REQUIRE(rep.worst_a_violation <= 1e-10);
    REQUIRE(rep.worst_g_violation <= 1e-10);
    // The hand computation gives margins of exactly one half.
    REQUIRE(rep.nu1_margin == Catch::Approx(0.5).margin(1e-9));
    REQUIRE(rep.nu2_margin == Catch::Approx(0.5).margin(1e-9));
}

TEST_CASE("sign-flipped terminal map is flagged quickly") {
    FbsdeCoefficients spec;
    spec.nx = spec.ny = spec.nz = 1;
    spec.A = [](const Eigen::VectorXd& u) { return Eigen::VectorXd::Zero(u.size()).eval(); };
    spec.g = [](const Eigen::VectorXd& x) { return (-x).eval(); };
    const MonotonicityReport rep = monotonicity_check(spec, 10'000, 9);
    REQUIRE_FALSE(rep.pass);
    REQUIRE(rep.first_violation_sample >= 0);
    REQUIRE(rep.first_violation_sample < 100);
}

TEST_CASE("degenerate coefficients pass with zero margins") {
    FbsdeCoefficients spec;
    spec.nx = spec.ny = spec.nz = 1;
    spec.A = [](const Eigen::VectorXd& u) { return Eigen::VectorXd::Zero(u.size()).eval(); };
    spec.g = [](const Eigen::VectorXd& x) { return x; };
    const MonotonicityReport rep = monotonicity_check(spec, 1000, 11);
    REQUIRE(rep.pass);
    REQUIRE(rep.nu1_margin == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(rep.nu2_margin == Catch::Approx(0.0).margin(1e-12));
}
