#include "test_common.hpp"

#include "smpsolve/inner_opt.hpp"
#include "smpsolve/problems.hpp"

using namespace smp;

namespace {

double dottie_by_bisection() {
    // Root of cos(u) = u on [0, 1].
    double lo = 0.0, hi = 1.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (std::cos(mid) - mid > 0.0 ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

std::vector<double> to_std(const Eigen::VectorXd& v) {
    return {v.data(), v.data() + v.size()};
}

}  // namespace

TEST_CASE("quadratic vertex is found from any start") {
    ValueFn value = [](const Eigen::VectorXd& u) { return -(u[0] - 3.0) * (u[0] - 3.0); };
    GradFn grad = [](const Eigen::VectorXd& u) {
        return Eigen::VectorXd::Constant(1, -2.0 * (u[0] - 3.0)).eval();
    };
    for (double start : {-10.0, 0.0, 2.9, 100.0}) {
        const OptResult r = lbfgs_maximize(value, grad, Eigen::VectorXd::Constant(1, start));
        REQUIRE(std::abs(r.u[0] - 3.0) <= 1e-8);
    }
}

TEST_CASE("lq hamiltonian maximizer matches the closed form") {
    const ProblemSpec prob = make_builtin("lq", 1);
    auto [value, grad] = hamiltonian_objective(prob, 0.0, {0.7}, {1.0}, {1.0});
    const OptResult r = lbfgs_maximize(value, grad, Eigen::VectorXd::Zero(1));
    REQUIRE(std::abs(r.u[0] - 1.0) <= 1e-8);  // u* = (p + q)/2
}

TEST_CASE("transcendental stationary point matches the bisection oracle") {
    const ProblemSpec prob = make_builtin("transcendental", 1);
    auto [value, grad] = hamiltonian_objective(prob, 0.0, {1.0}, {2.0}, {0.0});
    const OptResult r = lbfgs_maximize(value, grad, Eigen::VectorXd::Zero(1));
    REQUIRE(std::abs(r.u[0] - dottie_by_bisection()) <= 1e-6);
}

TEST_CASE("strictly concave quadratics converge within k+1 iterations") {
    for (int k : {2, 3, 4, 6}) {
        const rng::Stream s(100 + k);
        Eigen::MatrixXd R(k, k);
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j)
                R(i, j) = s.normal(static_cast<std::uint64_t>(i) * k + j);
        const Eigen::MatrixXd A =
            R * R.transpose() + 0.3 * Eigen::MatrixXd::Identity(k, k);
        Eigen::VectorXd b(k);
        for (int i = 0; i < k; ++i) b[i] = s.normal(1000 + i);

        ValueFn value = [&](const Eigen::VectorXd& u) {
            return -0.5 * u.dot(A * u) + b.dot(u);
        };
        GradFn grad = [&](const Eigen::VectorXd& u) { return (b - A * u).eval(); };
        OptOptions opts;
        opts.grad_tol = 1e-10;
        const OptResult r = lbfgs_maximize(value, grad, Eigen::VectorXd::Zero(k), {}, opts);
        const Eigen::VectorXd expected = A.fullPivLu().solve(b);
        INFO("k=" << k << " iters=" << r.iters);
        REQUIRE(r.iters <= k + 1);
        REQUIRE((r.u - expected).norm() <= 1e-8);
    }
}

TEST_CASE("returned value never falls below the starting value") {
    // A concave but non-quadratic objective evaluated from many starts.
    ValueFn value = [](const Eigen::VectorXd& u) {
        return -std::cosh(u[0]) - 0.5 * u[1] * u[1] + std::sin(u[0] + u[1]);
    };
    GradFn grad = [](const Eigen::VectorXd& u) {
        Eigen::VectorXd g(2);
        g[0] = -std::sinh(u[0]) + std::cos(u[0] + u[1]);
        g[1] = -u[1] + std::cos(u[0] + u[1]);
        return g;
    };
    const rng::Stream s(9);
    for (int rep = 0; rep < 50; ++rep) {
        Eigen::VectorXd u0(2);
        u0[0] = 2.0 * s.normal(2 * rep);
        u0[1] = 2.0 * s.normal(2 * rep + 1);
        const OptResult r = lbfgs_maximize(value, grad, u0);
        REQUIRE(r.value >= value(u0) - 1e-12);
    }
}

TEST_CASE("lbfgs agrees with the explicit argmax on lq and nonlinear") {
    for (const char* name : {"lq", "nonlinear"}) {
        const int n = 3;
        const ProblemSpec prob = make_builtin(name, n);
        const rng::Stream s(17);
        for (int rep = 0; rep < 100; ++rep) {
            std::vector<double> x(n), p(n), q(n * prob.d);
            for (int i = 0; i < n; ++i) x[i] = s.normal(100 * rep + i);
            for (int i = 0; i < n; ++i) p[i] = s.normal(100 * rep + 10 + i);
            for (int i = 0; i < n * prob.d; ++i) q[i] = s.normal(100 * rep + 20 + i);
            Tape tape;
            const Tensor ustar = tape.val(prob.explicit_argmax(
                tape, 0.03, tape.constant(Tensor::row(x)), tape.constant(Tensor::row(p)),
                tape.constant(Tensor::row(q))));
            auto [value, grad] = hamiltonian_objective(prob, 0.03, x, p, q);
            const OptResult r = lbfgs_maximize(value, grad, Eigen::VectorXd::Zero(n));
            for (int i = 0; i < n; ++i) {
                INFO(name);
                REQUIRE(std::abs(r.u[i] - ustar.v[i]) <= 1e-5);
            }
        }
    }
}

TEST_CASE("warm starts never degrade the objective on lq points") {
    const int n = 2;
    const ProblemSpec prob = make_builtin("lq", n);
    const rng::Stream s(23);
    Eigen::VectorXd warm = Eigen::VectorXd::Zero(n);
    for (int step = 0; step < 30; ++step) {
        std::vector<double> x(n), p(n), q(n);
        // Consecutive points drift slowly, as states do along a path.
        for (int i = 0; i < n; ++i) {
            x[i] = 1.0 + 0.05 * s.normal(100 * step + i);
            p[i] = -1.0 + 0.05 * s.normal(100 * step + 10 + i);
            q[i] = 0.2 + 0.05 * s.normal(100 * step + 20 + i);
        }
        auto [value, grad] = hamiltonian_objective(prob, 0.01 * step, x, p, q);
        const OptResult from_warm = lbfgs_maximize(value, grad, warm);
        const OptResult from_zero = lbfgs_maximize(value, grad, Eigen::VectorXd::Zero(n));
        REQUIRE(from_warm.value >= from_zero.value - 1e-9);
        warm = from_warm.u;
    }
}

TEST_CASE("project_box clamps coordinatewise") {
    Eigen::VectorXd u(2);
    u << 3.0, -1.0;
    const Eigen::VectorXd lo = Eigen::VectorXd::Zero(2);
    const Eigen::VectorXd hi = Eigen::VectorXd::Constant(2, 2.0);
    REQUIRE(to_std(project_box(u, lo, hi)) == std::vector<double>{2.0, 0.0});

    Eigen::VectorXd inside(2);
    inside << 0.5, 1.5;
    REQUIRE(to_std(project_box(inside, lo, hi)) == std::vector<double>{0.5, 1.5});

    const Eigen::VectorXd point = Eigen::VectorXd::Constant(2, 0.7);
    REQUIRE(to_std(project_box(u, point, point)) == std::vector<double>{0.7, 0.7});

    Eigen::VectorXd bad_lo(2), bad_hi(2);
    bad_lo << 1.0, 3.0;
    bad_hi << 2.0, 2.0;
    REQUIRE_THROWS_AS(project_box(u, bad_lo, bad_hi), TapeError);
}

TEST_CASE("projected gradient reaches the right box corner on a linear objective") {
    // Maximize <theta, q> over [1, 2]^3: the corner is picked by sign(q).
    Eigen::VectorXd q(3);
    q << 0.8, -0.3, 0.05;
    ValueFn value = [&](const Eigen::VectorXd& u) { return u.dot(q); };
    GradFn grad = [&](const Eigen::VectorXd&) { return q; };
    BoxBounds box{Eigen::VectorXd::Constant(3, 1.0), Eigen::VectorXd::Constant(3, 2.0)};
    OptOptions opts;
    opts.max_iters = 200;
    const OptResult r =
        lbfgs_maximize(value, grad, Eigen::VectorXd::Constant(3, 1.5), box, opts);
    REQUIRE(std::abs(r.u[0] - 2.0) <= 1e-6);
    REQUIRE(std::abs(r.u[1] - 1.0) <= 1e-6);
    REQUIRE(std::abs(r.u[2] - 2.0) <= 1e-6);
}

TEST_CASE("non-finite objective at the start is rejected") {
    ValueFn value = [](const Eigen::VectorXd& u) { return std::log(u[0]); };
    GradFn grad = [](const Eigen::VectorXd& u) {
        return Eigen::VectorXd::Constant(1, 1.0 / u[0]).eval();
    };
    REQUIRE_THROWS_AS(lbfgs_maximize(value, grad, Eigen::VectorXd::Constant(1, -1.0)),
                      TapeError);
}
