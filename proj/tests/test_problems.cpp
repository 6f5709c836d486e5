#include "test_common.hpp"

#include "smpsolve/problems.hpp"

using namespace smp;
using smp::test::random_tensor;

namespace {

std::vector<double> random_vec(int len, rng::Stream s, double scale = 1.0) {
    std::vector<double> v(len);
    for (int i = 0; i < len; ++i) v[i] = scale * s.normal(i);
    return v;
}

// Evaluates a feedback callback (argmax, hbar derivative, ...) at one point.
std::vector<double> feedback_at(const ProblemSpec& prob, const ProblemSpec::Feedback& fn,
                                double t, const std::vector<double>& x,
                                const std::vector<double>& p, const std::vector<double>& q) {
    Tape tape;
    const NodeId X = tape.constant(Tensor::row(x));
    const NodeId P = tape.constant(Tensor::row(p));
    const NodeId Q = tape.constant(Tensor::row(q));
    return tape.val(fn(tape, t, X, P, Q)).v;
}

double norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("lq hamiltonian value and gradients at a hand-computed point") {
    const ProblemSpec prob = make_builtin("lq", 1);
    const HamiltonianEval h = hamiltonian(prob, 0.0, {1.0}, {0.0}, {1.0}, {1.0});
    REQUIRE(h.value == Catch::Approx(-0.3).margin(1e-12));
    // H_x = -p/4 + q/5 - x/2 = -0.55, H_u = p + q - 2u = 2.
    REQUIRE(h.grad_x[0] == Catch::Approx(-0.55).margin(1e-12));
    REQUIRE(h.grad_u[0] == Catch::Approx(2.0).margin(1e-12));
}

TEST_CASE("nonlinear hamiltonian vanishes when u and q vanish") {
    const ProblemSpec prob = make_builtin("nonlinear", 3);
    const std::vector<double> p = random_vec(3, rng::Stream(1));
    const HamiltonianEval h = hamiltonian(prob, 0.3, random_vec(3, rng::Stream(2)),
                                          {0.0, 0.0, 0.0}, p, std::vector<double>(9, 0.0));
    REQUIRE(h.value == Catch::Approx(0.0).margin(1e-14));
}

TEST_CASE("gexp hamiltonian is theta.q on the diagonal") {
    const ProblemSpec prob = make_builtin("gexp", 1, {.sigma_lo = 1.0, .sigma_hi = 2.0});
    const HamiltonianEval h = hamiltonian(prob, 0.0, {0.5}, {2.0}, {0.3}, {-1.0});
    REQUIRE(h.value == Catch::Approx(-2.0).margin(1e-14));
}

TEST_CASE("transcendental H_u at p=0, u=0 is zero") {
    const ProblemSpec prob = make_builtin("transcendental", 1);
    const HamiltonianEval h = hamiltonian(prob, 0.0, {1.0}, {0.0}, {0.0}, {0.7});
    REQUIRE(h.grad_u[0] == Catch::Approx(0.0).margin(1e-14));
}

TEST_CASE("closed-form hamiltonian derivatives agree with autodiff") {
    for (const char* name : {"lq", "lq_ones", "nonlinear", "transcendental"}) {
        const int n = 3;
        const ProblemSpec prob = make_builtin(name, n);
        const rng::Stream s(71);
        for (int rep = 0; rep < 50; ++rep) {
            const std::vector<double> x = random_vec(n, s.child(4 * rep));
            const std::vector<double> u = random_vec(prob.k, s.child(4 * rep + 1));
            const std::vector<double> p = random_vec(n, s.child(4 * rep + 2));
            const std::vector<double> q = random_vec(n * prob.d, s.child(4 * rep + 3));
            const HamiltonianEval h = hamiltonian(prob, 0.05, x, u, p, q);

            Tape tape;
            const NodeId X = tape.constant(Tensor::row(x));
            const NodeId U = tape.constant(Tensor::row(u));
            const NodeId P = tape.constant(Tensor::row(p));
            const NodeId Q = tape.constant(Tensor::row(q));
            const Tensor hx = tape.val(prob.ham_x(tape, 0.05, X, U, P, Q));
            for (int i = 0; i < n; ++i)
                REQUIRE(h.grad_x[i] == Catch::Approx(hx.v[i]).margin(1e-10));
            if (prob.has_ham_u()) {
                const Tensor hu = tape.val(prob.ham_u(tape, 0.05, X, U, P, Q));
                for (int i = 0; i < prob.k; ++i)
                    REQUIRE(h.grad_u[i] == Catch::Approx(hu.v[i]).margin(1e-10));
            }
        }
    }
}

TEST_CASE("explicit argmax satisfies first-order optimality on free domains") {
    for (const char* name : {"lq", "lq_ones", "nonlinear"}) {
        const int n = 4;
        const ProblemSpec prob = make_builtin(name, n);
        REQUIRE(prob.has_argmax());
        const rng::Stream s(13);
        double worst = 0.0;
        for (int rep = 0; rep < 1000; ++rep) {
            const std::vector<double> x = random_vec(n, s.child(3 * rep));
            const std::vector<double> p = random_vec(n, s.child(3 * rep + 1));
            const std::vector<double> q = random_vec(n * prob.d, s.child(3 * rep + 2));
            const std::vector<double> u =
                feedback_at(prob, prob.explicit_argmax, 0.02, x, p, q);
            const HamiltonianEval h = hamiltonian(prob, 0.02, x, u, p, q);
            worst = std::max(worst, norm(h.grad_u));
        }
        INFO(name);
        REQUIRE(worst <= 1e-8);
    }
}

TEST_CASE("lq explicit argmax at p=q=1 is the all-ones control") {
    const ProblemSpec prob = make_builtin("lq", 5);
    const std::vector<double> ones(5, 1.0);
    const std::vector<double> u = feedback_at(prob, prob.explicit_argmax, 0.0,
                                              random_vec(5, rng::Stream(3)), ones, ones);
    for (double ui : u) REQUIRE(ui == Catch::Approx(1.0).margin(1e-15));
}

TEST_CASE("gexp indicator argmax picks the right branch") {
    const ProblemSpec prob = make_builtin("gexp", 2, {.sigma_lo = 1.0, .sigma_hi = 2.0});
    // Diagonal entries of q are (0.5, -0.5).
    const std::vector<double> q = {0.5, 0.0, 0.0, -0.5};
    const std::vector<double> theta =
        feedback_at(prob, prob.explicit_argmax, 0.0, {0.0, 0.0}, {0.0, 0.0}, q);
    REQUIRE(theta == std::vector<double>{2.0, 1.0});
    // q = 0 takes the upper branch.
    const std::vector<double> at_zero = feedback_at(prob, prob.explicit_argmax, 0.0,
                                                    {0.0, 0.0}, {0.0, 0.0},
                                                    std::vector<double>(4, 0.0));
    REQUIRE(at_zero == std::vector<double>{2.0, 2.0});
}

TEST_CASE("hbar agrees with the hamiltonian at the maximizing control") {
    for (const char* name : {"lq", "lq_ones", "nonlinear", "gexp"}) {
        const int n = 3;
        const ProblemSpec prob = make_builtin(name, n);
        REQUIRE(prob.has_hbar());
        const rng::Stream s(29);
        for (int rep = 0; rep < 200; ++rep) {
            const std::vector<double> x = random_vec(n, s.child(3 * rep));
            const std::vector<double> p = random_vec(n, s.child(3 * rep + 1));
            const std::vector<double> q = random_vec(n * prob.d, s.child(3 * rep + 2));
            const std::vector<double> u =
                feedback_at(prob, prob.explicit_argmax, 0.01, x, p, q);
            const double h = hamiltonian(prob, 0.01, x, u, p, q).value;
            const double hbar = feedback_at(prob, prob.hbar_value, 0.01, x, p, q)[0];
            INFO(name);
            REQUIRE(std::abs(h - hbar) <= 1e-10);
        }
    }
}

TEST_CASE("terminal gradient and hessian callbacks match finite differences of h") {
    for (const char* name : {"lq", "lq_ones", "nonlinear", "gexp", "transcendental"}) {
        const int n = 3;
        const ProblemSpec prob = make_builtin(name, n);
        const rng::Stream s(37);
        for (int rep = 0; rep < 20; ++rep) {
            const std::vector<double> x = random_vec(n, s.child(rep), 1.5);
            auto h_of = [&](const std::vector<double>& xv) {
                Tape tape;
                return tape.val(prob.terminal_cost(tape, tape.constant(Tensor::row(xv)))).item();
            };
            Tape tape;
            const Tensor hx = tape.val(prob.terminal_grad(tape, tape.constant(Tensor::row(x))));
            INFO(name);
            REQUIRE(finite_diff_check(h_of, x, hx.v, 1e-6) <= 1e-6);

            if (prob.terminal_hess) {
                // Each row i of h_xx must match finite differences of (h_x)_i.
                Tape tp;
                const Tensor hxx =
                    tp.val(prob.terminal_hess(tp, tp.constant(Tensor::row(x))));
                for (int i = 0; i < n; ++i) {
                    auto hx_i = [&](const std::vector<double>& xv) {
                        Tape t2;
                        return t2.val(prob.terminal_grad(t2, t2.constant(Tensor::row(xv))))
                            .v[static_cast<std::size_t>(i)];
                    };
                    std::vector<double> row(n);
                    for (int j = 0; j < n; ++j) row[j] = hxx.v[static_cast<std::size_t>(i) * n + j];
                    REQUIRE(finite_diff_check(hx_i, x, row, 1e-6) <= 1e-6);
                }
            }
        }
    }
}

TEST_CASE("construction errors") {
    REQUIRE_THROWS_AS(make_builtin("unknown", 3), TapeError);
    REQUIRE_THROWS_AS(make_builtin("lq", 0), TapeError);
    REQUIRE_THROWS_AS(make_builtin("gexp", 3, {.sigma_lo = 2.0, .sigma_hi = 1.0}), TapeError);
    REQUIRE_THROWS_AS(make_builtin("gexp", 3, {.sigma_lo = 0.0, .sigma_hi = 1.0}), TapeError);
}

TEST_CASE("gexp registers no ham_u and lq registers second-order data") {
    REQUIRE_FALSE(make_builtin("gexp", 2).has_ham_u());
    REQUIRE(make_builtin("lq", 2).has_second_order());
    REQUIRE_FALSE(make_builtin("transcendental", 2).has_hbar());
}
