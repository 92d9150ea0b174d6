#pragma once

#include <string>
#include <vector>

namespace dlmlab {

// Entry point behind the dlmlab binary; args exclude argv[0].
// Exit codes: 0 success, 1 runtime failure, 2 bad config/usage.
int run_cli(const std::vector<std::string>& args);

// Tidy plot-data bundles (step/series/metric/value) derived purely from run
// metrics files, plus the analytic FLOPs sweep. Returns a short report;
// missing metrics yield a partial bundle, no valid run at all throws.
std::string emit_plots(const std::vector<std::string>& run_dirs, const std::string& out_dir);

}  // namespace dlmlab
