#pragma once

#include <string>
#include <vector>

#include "phenokit/evalmetrics.hpp"
#include "phenokit/model.hpp"
#include "phenokit/train.hpp"

namespace phenokit {

// Strict-parsed run configuration: model + train sections plus the
// inference-side knobs. Unknown keys anywhere are rejected.
struct RunConfig {
    PhenoNetConfig model;
    TrainConfig train;
    double pcs_alpha = 0.7;
    double sphering_epsilon = -1.0;  // negative selects the auto default
    double top_frac = 0.01;
    std::vector<int> recall_ks{1, 3, 5, 10};

    static RunConfig from_json_file(const std::string& path);
};

// One bar per metric, values printed with 3 decimals.
std::string emit_report_svg(const EvalReport& report);

// Dispatches one subcommand. args excludes the program name. Exit codes:
// 0 ok, 1 bad input, 2 bad flags, 3 internal invariant violation.
int run_command(const std::vector<std::string>& args);

}  // namespace phenokit
