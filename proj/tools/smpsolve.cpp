// Command-line front end: training runs with CSV emission, the reference
// oracles, benchmark-table reproduction and the end-to-end gradient check.
#include <CLI11.hpp>

#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "smpsolve/cli_config.hpp"
#include "smpsolve/gradcheck.hpp"
#include "smpsolve/oracles.hpp"
#include "smpsolve/report_io.hpp"
#include "smpsolve/solvers.hpp"

namespace {

using namespace smp;

int hardware_jobs() {
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

// Oracle values for the summary's relative-error columns, when cheap.
void fill_oracle_columns(const TrainConfig& cfg, std::optional<double>& oracle_p0,
                         std::optional<double>& oracle_cost) {
    if (cfg.problem == "lq" || cfg.problem == "lq_ones") {
        const LqTerminal terminal =
            cfg.problem == "lq" ? LqTerminal::kIdentity : LqTerminal::kOnes;
        const RiccatiSolution sol = riccati_rk4(cfg.n, cfg.problem_params.horizon.value_or(0.1),
                                                terminal, 2000);
        if (!oracle_p0) oracle_p0 = sol.p0[0];
        if (!oracle_cost) oracle_cost = lq_optimal_cost(sol, Eigen::VectorXd::Ones(cfg.n));
    } else if (cfg.problem == "gexp") {
        // Training minimizes E[-phi]; the summary compares against -n*sigma_hi^2.
        if (!oracle_cost)
            oracle_cost = -gexp_exact_quadratic(cfg.n, cfg.problem_params.sigma_hi);
    }
}

int cmd_run(const std::optional<std::string>& config_path, const ConfigOverrides& flags,
            std::optional<double> oracle_p0, std::optional<double> oracle_cost) {
    RunConfig cfg = resolve_config(config_path, flags);
    const ProblemSpec prob =
        make_builtin(cfg.train.problem, cfg.train.n, cfg.train.problem_params);
    validate_dispatch(prob, cfg.train);
    const std::vector<std::uint64_t> seeds = resolve_seeds(cfg.seed_count);
    const int jobs = cfg.jobs > 0 ? cfg.jobs : hardware_jobs();
    std::fprintf(stderr, "running %s: %zu seed(s) on %d worker(s)\n",
                 cfg.train.tag().c_str(), seeds.size(), jobs);
    const std::vector<SolveReport> reports = solve_seeds(prob, cfg.train, seeds, jobs);

    fill_oracle_columns(cfg.train, oracle_p0, oracle_cost);
    const RunSummary summary = aggregate_runs(reports, oracle_p0, oracle_cost);

    std::ostringstream curves, sum;
    write_curves_csv(curves, reports);
    write_summary_csv(sum, cfg.train, summary);
    write_file(cfg.out_dir + "/curves.csv", curves.str());
    write_file(cfg.out_dir + "/summary.csv", sum.str());
    std::printf("%s", sum.str().c_str());

    bool ok = true;
    for (const SolveReport& r : reports)
        if (r.diverged) {
            std::fprintf(stderr, "seed %llu diverged: %s\n",
                         static_cast<unsigned long long>(r.seed), r.divergence_note.c_str());
            ok = false;
        }
    return ok ? 0 : 1;
}

int cmd_oracle_riccati(int n, double horizon, const std::string& terminal, int steps) {
    const RiccatiSolution sol = riccati_rk4(
        n, horizon, terminal == "ones" ? LqTerminal::kOnes : LqTerminal::kIdentity, steps);
    std::printf("key,value\nn,%d\nT,%s\nterminal,%s\n", n, csv_float(horizon).c_str(),
                terminal.c_str());
    std::printf("K0,%s\np0,%s\noptimal_cost,%s\n", csv_float(sol.K0(0, 0)).c_str(),
                csv_float(sol.p0[0]).c_str(),
                csv_float(lq_optimal_cost(sol, Eigen::VectorXd::Ones(n))).c_str());
    return 0;
}

int cmd_oracle_hopfcole(int n, double horizon, long samples, std::uint64_t seed) {
    const MonteCarloValue mc =
        hopf_cole_mc(n, std::vector<double>(n, 0.0), horizon, samples, seed);
    std::printf("key,value\nn,%d\nT,%s\nsamples,%ld\nseed,%llu\nJ,%s\nSE,%s\n", n,
                csv_float(horizon).c_str(), samples, static_cast<unsigned long long>(seed),
                csv_float(mc.value).c_str(), csv_float(mc.std_error).c_str());
    return 0;
}

int cmd_oracle_gexp(int n, double sigma_hi, bool validate) {
    std::printf("key,value\nn,%d\nsigma_hi,%s\nvalue,%s\n", n, csv_float(sigma_hi).c_str(),
                csv_float(gexp_exact_quadratic(n, sigma_hi)).c_str());
    if (validate) {
        std::printf("pde_1d,%s\npde_2d,%s\n", csv_float(gheat_fd_1d(1.0, sigma_hi)).c_str(),
                    csv_float(gheat_fd_2d(1.0, sigma_hi)).c_str());
    }
    return 0;
}

int cmd_oracle_monotonicity(int n, int samples, std::uint64_t seed) {
    const MonotonicityReport rep =
        monotonicity_check(lq_monotonicity_coefficients(n), samples, seed);
    std::printf("key,value\nn,%d\nsamples,%d\npass,%d\nnu1,%s\nnu2,%s\nworst_a,%s\nworst_g,%s\n",
                n, samples, rep.pass ? 1 : 0, csv_float(rep.nu1_margin).c_str(),
                csv_float(rep.nu2_margin).c_str(), csv_float(rep.worst_a_violation).c_str(),
                csv_float(rep.worst_g_violation).c_str());
    return rep.pass ? 0 : 1;
}

int cmd_table(int id, int iters, int seed_count, int jobs, const std::string& out_dir) {
    if (jobs <= 0) jobs = hardware_jobs();
    const std::vector<std::uint64_t> seeds = resolve_seeds(seed_count);
    std::ostringstream os;
    if (id == 1) {
        const RiccatiSolution sol = riccati_rk4(5, 0.1, LqTerminal::kIdentity, 2000);
        os << "alg,p0,cost,time_s,iterations,rel_err\n";
        for (int alg : {1, 2, 3}) {
            TrainConfig cfg = preset_config("lq", alg, 5);
            cfg.iterations = iters;
            cfg.force_lbfgs = alg == 1;  // the benchmark times the numeric solve
            const ProblemSpec prob = make_builtin(cfg.problem, cfg.n, cfg.problem_params);
            const RunSummary s =
                aggregate_runs(solve_seeds(prob, cfg, seeds, jobs), sol.p0[0]);
            os << alg << ',' << csv_float(s.p0_mean) << ',' << csv_float(s.cost_mean) << ','
               << csv_float(s.wall_mean_s) << ',' << cfg.iterations << ','
               << csv_float(s.p0_rel_err) << '\n';
        }
    } else if (id == 2) {
        os << "n,ode45,alg,p0,rel_err,cost\n";
        for (int n : {1, 2, 5, 10, 20}) {
            const RiccatiSolution sol = riccati_rk4(n, 0.1, LqTerminal::kOnes, 2000);
            for (int alg : {2, 3}) {
                TrainConfig cfg = preset_config("lq_ones", alg, n);
                cfg.iterations = iters;
                const ProblemSpec prob = make_builtin(cfg.problem, cfg.n, cfg.problem_params);
                const RunSummary s =
                    aggregate_runs(solve_seeds(prob, cfg, seeds, jobs), sol.p0[0]);
                os << n << ',' << csv_float(sol.p0[0]) << ',' << alg << ','
                   << csv_float(s.p0_mean) << ',' << csv_float(s.p0_rel_err) << ','
                   << csv_float(s.cost_mean) << '\n';
            }
        }
    } else {
        std::fprintf(stderr, "table id must be 1 or 2\n");
        return 2;
    }
    write_file(out_dir + "/table" + std::to_string(id) + ".csv", os.str());
    std::printf("%s", os.str().c_str());
    return 0;
}

int cmd_gradcheck(int n, int steps, int batch, double lambda, std::uint64_t seed,
                  double threshold) {
    const GradCheckResult r = gradcheck_alg2_loss(n, steps, batch, lambda, seed);
    std::printf("key,value\nparameters,%d\nmax_rel_error,%s\nthreshold,%s\n", r.parameters,
                csv_float(r.max_rel_error).c_str(), csv_float(threshold).c_str());
    return r.max_rel_error <= threshold ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"solvers for stochastic optimal control via the maximum principle"};
    app.require_subcommand(1);

    // --- run ------------------------------------------------------------
    CLI::App* run = app.add_subcommand("run", "train one configuration over several seeds");
    std::optional<std::string> config_path;
    ConfigOverrides flags;
    std::optional<double> oracle_p0, oracle_cost;
    run->add_option("--config", config_path, "flat JSON config file");
    run->add_option("--problem", flags.problem, "lq | lq_ones | nonlinear | gexp | transcendental");
    run->add_option("--alg", flags.algorithm, "0 (direct) or 1..4");
    run->add_option("--n", flags.n, "state dimension");
    run->add_option("--time-steps", flags.time_steps, "Euler steps N");
    run->add_option("--batch", flags.batch, "training batch M");
    run->add_option("--test-paths", flags.test_paths, "evaluation path count");
    run->add_option("--final-eval-paths", flags.final_eval_paths,
                    "paths for the final estimate (default: test paths)");
    run->add_option("--iters", flags.iterations, "training iterations");
    run->add_option("--lr", flags.learning_rate, "initial learning rate");
    run->add_option("--lambda", flags.lambda, "penalty weight (algorithm 2)");
    run->add_option("--eval-interval", flags.eval_interval, "iterations between curve points");
    run->add_option("--batchnorm", flags.batchnorm, "normalize hidden pre-activations");
    run->add_option("--force-lbfgs", flags.force_lbfgs,
                    "algorithm 1: always solve the maximum condition numerically");
    run->add_option("--randomize-p0", flags.randomize_p0, "perturb the adjoint initial value");
    run->add_option("--per-step-nets", flags.per_step_nets,
                    "algorithm 3: separate network per time point");
    run->add_option("--sigma-lo", flags.sigma_lo, "gexp lower volatility");
    run->add_option("--sigma-hi", flags.sigma_hi, "gexp upper volatility");
    run->add_option("--horizon", flags.horizon, "override the problem horizon");
    run->add_option("--seeds", flags.seeds, "number of seeds (1..k)");
    run->add_option("--jobs", flags.jobs, "worker threads (default: hardware)");
    run->add_option("--out", flags.out_dir, "output directory for CSV files");
    run->add_option("--checkpoint", flags.checkpoint_prefix, "dump trained networks here");
    run->add_option("--oracle-p0", oracle_p0, "reference p0 component for relative errors");
    run->add_option("--oracle-cost", oracle_cost, "reference cost for relative errors");

    // --- oracle ----------------------------------------------------------
    CLI::App* oracle = app.add_subcommand("oracle", "print reference values as CSV");
    oracle->require_subcommand(1);
    int on = 1, osteps = 10000, osamples_i = 0;
    long osamples = 1'000'000;
    double oT = 0.1, osigma_hi = 2.0;
    std::uint64_t oseed = 1;
    std::string oterminal = "identity";
    bool ovalidate = false;
    CLI::App* oric = oracle->add_subcommand("riccati", "LQ Riccati integration");
    oric->add_option("--n", on);
    oric->add_option("--T", oT);
    oric->add_option("--terminal", oterminal, "identity | ones");
    oric->add_option("--steps", osteps);
    CLI::App* ohc = oracle->add_subcommand("hopfcole", "log-transform Monte Carlo value");
    double hcT = 1.0;
    ohc->add_option("--n", on);
    ohc->add_option("--T", hcT);
    ohc->add_option("--samples", osamples);
    ohc->add_option("--seed", oseed);
    CLI::App* ogx = oracle->add_subcommand("gexp", "volatility-uncertainty expectation");
    ogx->add_option("--n", on);
    ogx->add_option("--sigma-hi", osigma_hi);
    ogx->add_flag("--validate", ovalidate, "also run the 1-d and 2-d PDE validators");
    CLI::App* omo = oracle->add_subcommand("monotonicity", "sampled FBSDE monotonicity check");
    omo->add_option("--n", on);
    omo->add_option("--samples", osamples_i)->default_val(10000);
    omo->add_option("--seed", oseed);

    // --- table -----------------------------------------------------------
    CLI::App* table = app.add_subcommand("table", "reproduce a benchmark table as CSV");
    int table_id = 1, titers = 2000, tseeds = 10, tjobs = 0;
    std::string tout = ".";
    table->add_option("id", table_id, "1 or 2")->required();
    table->add_option("--iters", titers);
    table->add_option("--seeds", tseeds);
    table->add_option("--jobs", tjobs);
    table->add_option("--out", tout);

    // --- gradcheck ---------------------------------------------------------
    CLI::App* gc = app.add_subcommand("gradcheck", "autodiff vs finite differences");
    int gn = 2, gsteps = 2, gbatch = 8;
    double glambda = 0.01, gthreshold = 1e-5;
    std::uint64_t gseed = 3;
    gc->add_option("--n", gn);
    gc->add_option("--time-steps", gsteps);
    gc->add_option("--batch", gbatch);
    gc->add_option("--lambda", glambda);
    gc->add_option("--seed", gseed);
    gc->add_option("--threshold", gthreshold);

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(config_path, flags, oracle_p0, oracle_cost);
        if (oracle->parsed()) {
            if (oric->parsed()) return cmd_oracle_riccati(on, oT, oterminal, osteps);
            if (ohc->parsed()) return cmd_oracle_hopfcole(on, hcT, osamples, oseed);
            if (ogx->parsed()) return cmd_oracle_gexp(on, osigma_hi, ovalidate);
            if (omo->parsed()) return cmd_oracle_monotonicity(on, osamples_i, oseed);
        }
        if (table->parsed()) return cmd_table(table_id, titers, tseeds, tjobs, tout);
        if (gc->parsed()) return cmd_gradcheck(gn, gsteps, gbatch, glambda, gseed, gthreshold);
    } catch (const smp::TapeError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
