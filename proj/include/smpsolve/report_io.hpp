// CSV emission for runs and summaries. All floats are serialized with six
// significant digits; file contents are reproducible for a fixed (config,
// seed) except for the wall-clock columns.
#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "smpsolve/solvers.hpp"

namespace smp {

inline std::string csv_float(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", x);
    return buf;
}

inline constexpr const char* kCurveHeader =
    "seed,iteration,loss,cost,p0_mean,p0_min,p0_max,wall_ms";
inline constexpr const char* kSummaryHeader =
    "alg,problem,n,p0_mean,p0_rel_err,cost_mean,cost_std,time_s";

inline void write_curves_csv(std::ostream& os, const std::vector<SolveReport>& reports) {
    os << kCurveHeader << '\n';
    for (const SolveReport& r : reports)
        for (const EvalPoint& pt : r.curve)
            os << r.seed << ',' << pt.iteration << ',' << csv_float(pt.loss) << ','
               << csv_float(pt.cost) << ',' << csv_float(pt.p0_mean) << ','
               << csv_float(pt.p0_min) << ',' << csv_float(pt.p0_max) << ','
               << csv_float(pt.wall_ms) << '\n';
}

inline void write_summary_csv(std::ostream& os, const TrainConfig& cfg, const RunSummary& s) {
    os << kSummaryHeader << '\n'
       << cfg.algorithm << ',' << cfg.problem << ',' << cfg.n << ',' << csv_float(s.p0_mean)
       << ',' << csv_float(s.p0_rel_err) << ',' << csv_float(s.cost_mean) << ','
       << csv_float(s.cost_std) << ',' << csv_float(s.wall_mean_s) << '\n';
}

inline void write_file(const std::string& path, const std::string& contents) {
    std::ofstream os(path);
    if (!os) throw TapeError("cannot open output file " + path);
    os << contents;
}

}  // namespace smp
