// Run configuration resolution: per-problem presets, then a flat JSON config
// file, then command-line flags, in increasing precedence. Unknown config
// keys are rejected. SMP_SEED_BASE offsets every seed.
#pragma once

#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "smpsolve/solvers.hpp"

namespace smp {

// Optional overrides collected from flags; empty fields keep lower-precedence
// values.
struct ConfigOverrides {
    std::optional<std::string> problem;
    std::optional<int> algorithm, n, time_steps, batch, test_paths, final_eval_paths;
    std::optional<int> iterations, eval_interval, seeds, jobs;
    std::optional<double> learning_rate, lambda, sigma_lo, sigma_hi, horizon;
    std::optional<bool> batchnorm, force_lbfgs, randomize_p0, per_step_nets;
    std::optional<std::string> out_dir, checkpoint_prefix;
};

struct RunConfig {
    TrainConfig train;
    int seed_count = 10;
    int jobs = 0;  // 0 = hardware concurrency
    std::string out_dir = ".";
};

namespace detail {

inline const std::set<std::string>& known_config_keys() {
    static const std::set<std::string> keys = {
        "problem",      "alg",          "n",           "N",
        "batch",        "test_paths",   "final_eval_paths", "iters",
        "lr",           "lambda",       "eval_interval", "batchnorm",
        "force_lbfgs",  "randomize_p0", "per_step_nets", "seeds",
        "jobs",         "out_dir",      "sigma_lo",    "sigma_hi",
        "horizon",      "checkpoint"};
    return keys;
}

}  // namespace detail

inline ConfigOverrides load_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw TapeError("cannot open config file " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw TapeError("config file " + path + ": " + e.what());
    }
    if (!j.is_object()) throw TapeError("config file must hold a flat JSON object");
    ConfigOverrides o;
    for (const auto& [key, value] : j.items()) {
        if (!detail::known_config_keys().count(key))
            throw TapeError("config file: unknown key '" + key + "'");
        if (key == "problem") o.problem = value.get<std::string>();
        else if (key == "alg") o.algorithm = value.get<int>();
        else if (key == "n") o.n = value.get<int>();
        else if (key == "N") o.time_steps = value.get<int>();
        else if (key == "batch") o.batch = value.get<int>();
        else if (key == "test_paths") o.test_paths = value.get<int>();
        else if (key == "final_eval_paths") o.final_eval_paths = value.get<int>();
        else if (key == "iters") o.iterations = value.get<int>();
        else if (key == "lr") o.learning_rate = value.get<double>();
        else if (key == "lambda") o.lambda = value.get<double>();
        else if (key == "eval_interval") o.eval_interval = value.get<int>();
        else if (key == "batchnorm") o.batchnorm = value.get<bool>();
        else if (key == "force_lbfgs") o.force_lbfgs = value.get<bool>();
        else if (key == "randomize_p0") o.randomize_p0 = value.get<bool>();
        else if (key == "per_step_nets") o.per_step_nets = value.get<bool>();
        else if (key == "seeds") o.seeds = value.get<int>();
        else if (key == "jobs") o.jobs = value.get<int>();
        else if (key == "out_dir") o.out_dir = value.get<std::string>();
        else if (key == "sigma_lo") o.sigma_lo = value.get<double>();
        else if (key == "sigma_hi") o.sigma_hi = value.get<double>();
        else if (key == "horizon") o.horizon = value.get<double>();
        else if (key == "checkpoint") o.checkpoint_prefix = value.get<std::string>();
    }
    return o;
}

inline void apply_overrides(RunConfig& cfg, const ConfigOverrides& o) {
    TrainConfig& t = cfg.train;
    if (o.problem) t.problem = *o.problem;
    if (o.algorithm) t.algorithm = *o.algorithm;
    if (o.n) t.n = *o.n;
    if (o.time_steps) t.time_steps = *o.time_steps;
    if (o.batch) t.batch = *o.batch;
    if (o.test_paths) t.test_paths = *o.test_paths;
    if (o.final_eval_paths) t.final_eval_paths = *o.final_eval_paths;
    if (o.iterations) t.iterations = *o.iterations;
    if (o.learning_rate) t.learning_rate = *o.learning_rate;
    if (o.lambda) t.lambda = *o.lambda;
    if (o.eval_interval) t.eval_interval = *o.eval_interval;
    if (o.batchnorm) t.batchnorm = *o.batchnorm;
    if (o.force_lbfgs) t.force_lbfgs = *o.force_lbfgs;
    if (o.randomize_p0) t.randomize_p0 = *o.randomize_p0;
    if (o.per_step_nets) t.per_step_nets = *o.per_step_nets;
    if (o.sigma_lo) t.problem_params.sigma_lo = *o.sigma_lo;
    if (o.sigma_hi) t.problem_params.sigma_hi = *o.sigma_hi;
    if (o.horizon) t.problem_params.horizon = *o.horizon;
    if (o.checkpoint_prefix) t.checkpoint_prefix = *o.checkpoint_prefix;
    if (o.seeds) cfg.seed_count = *o.seeds;
    if (o.jobs) cfg.jobs = *o.jobs;
    if (o.out_dir) cfg.out_dir = *o.out_dir;
}

// Presets for (problem, alg, n), then file values, then flag values.
inline RunConfig resolve_config(const std::optional<std::string>& config_path,
                                const ConfigOverrides& flags) {
    ConfigOverrides file;
    if (config_path) file = load_config_file(*config_path);
    const std::string problem = flags.problem.value_or(file.problem.value_or("lq"));
    const int algorithm = flags.algorithm.value_or(file.algorithm.value_or(3));
    const int n = flags.n.value_or(file.n.value_or(5));
    RunConfig cfg;
    cfg.train = preset_config(problem, algorithm, n);
    apply_overrides(cfg, file);
    apply_overrides(cfg, flags);
    return cfg;
}

// Seeds 1..k, shifted by the SMP_SEED_BASE environment variable when set.
inline std::vector<std::uint64_t> resolve_seeds(int count) {
    std::uint64_t base = 0;
    if (const char* env = std::getenv("SMP_SEED_BASE")) base = std::strtoull(env, nullptr, 10);
    std::vector<std::uint64_t> seeds;
    for (int i = 1; i <= count; ++i) seeds.push_back(base + static_cast<std::uint64_t>(i));
    return seeds;
}

}  // namespace smp
