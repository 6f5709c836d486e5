#include "test_common.hpp"

#include <cstdlib>
#include <fstream>

#include "smpsolve/cli_config.hpp"
#include "smpsolve/report_io.hpp"

using namespace smp;

namespace {

std::string write_temp_config(const std::string& body) {
    const std::string path = "/tmp/smpsolve_test_config.json";
    std::ofstream os(path);
    os << body;
    return path;
}

// Curve CSV lines with the wall-clock column blanked.
std::vector<std::string> stable_lines(const std::string& csv) {
    std::vector<std::string> lines;
    std::istringstream is(csv);
    for (std::string line; std::getline(is, line);) {
        const auto cut = line.rfind(',');
        lines.push_back(line.substr(0, cut));
    }
    return lines;
}

}  // namespace

TEST_CASE("config files reject unknown keys and override presets") {
    const std::string path =
        write_temp_config(R"({"problem":"lq","alg":2,"n":3,"lr":0.001,"seeds":4})");
    const RunConfig cfg = resolve_config(path, {});
    REQUIRE(cfg.train.problem == "lq");
    REQUIRE(cfg.train.algorithm == 2);
    REQUIRE(cfg.train.n == 3);
    REQUIRE(cfg.train.learning_rate == 0.001);
    REQUIRE(cfg.train.lambda == 0.01);  // preset survives for keys not in the file
    REQUIRE(cfg.seed_count == 4);

    const std::string bad = write_temp_config(R"({"problem":"lq","learning_rate":0.1})");
    REQUIRE_THROWS_AS(load_config_file(bad), TapeError);
}

TEST_CASE("flags take precedence over file values") {
    const std::string path = write_temp_config(R"({"problem":"lq","alg":2,"lr":0.001})");
    ConfigOverrides flags;
    flags.learning_rate = 0.5;
    flags.algorithm = 3;
    const RunConfig cfg = resolve_config(path, flags);
    REQUIRE(cfg.train.algorithm == 3);
    REQUIRE(cfg.train.learning_rate == 0.5);
}

TEST_CASE("seed base environment variable offsets seeds") {
    unsetenv("SMP_SEED_BASE");
    REQUIRE(resolve_seeds(3) == std::vector<std::uint64_t>{1, 2, 3});
    setenv("SMP_SEED_BASE", "100", 1);
    REQUIRE(resolve_seeds(3) == std::vector<std::uint64_t>{101, 102, 103});
    unsetenv("SMP_SEED_BASE");
}

TEST_CASE("csv floats use six significant digits") {
    REQUIRE(csv_float(0.9586412345) == "0.958641");
    REQUIRE(csv_float(2.388) == "2.388");
    REQUIRE(csv_float(123456789.0) == "1.23457e+08");
}

TEST_CASE("csv files are reproducible apart from wall-clock columns") {
    TrainConfig cfg = preset_config("lq", 3, 2);
    cfg.iterations = 10;
    cfg.eval_interval = 5;
    cfg.test_paths = 32;
    const ProblemSpec prob = make_builtin(cfg.problem, cfg.n, cfg.problem_params);
    auto render = [&]() {
        const std::vector<SolveReport> reports = solve_seeds(prob, cfg, {1, 2}, 2);
        std::ostringstream curves, summary;
        write_curves_csv(curves, reports);
        write_summary_csv(summary, cfg, aggregate_runs(reports, -0.9586));
        return std::make_pair(curves.str(), summary.str());
    };
    const auto [c1, s1] = render();
    const auto [c2, s2] = render();
    REQUIRE(stable_lines(c1) == stable_lines(c2));
    REQUIRE(stable_lines(s1) == stable_lines(s2));
    REQUIRE(c1.substr(0, c1.find('\n')) == kCurveHeader);
    REQUIRE(s1.substr(0, s1.find('\n')) == kSummaryHeader);
}
