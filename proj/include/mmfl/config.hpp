#pragma once

#include <string>
#include <vector>

#include "mmfl/datagen.hpp"
#include "mmfl/flcore.hpp"

namespace mmfl::config {

struct FullConfig {
    flcore::RunConfig run;
    datagen::DatasetSpec dataset;
};

struct ExperimentPlan {
    FullConfig base;
    std::vector<flcore::Strategy> strategies;
    std::vector<double> missing_rates;
    std::vector<std::uint64_t> seeds;
    std::string out_dir = "out";
};

struct ValidationError {
    std::string field;
    std::string message;
};

struct ParseResult {
    FullConfig config;
    ExperimentPlan plan;
    std::vector<ValidationError> errors;

    bool ok() const { return errors.empty(); }
};

// Parses a flat TOML config ([run], [dataset], [sweep] tables; key = value
// lines; arrays of scalars). An empty string yields the full defaults.
ParseResult validate_config(const std::string& raw_text);

ParseResult load_config_file(const std::string& path);

// The config echoed back in the same format, defaults filled in.
std::string render_config(const FullConfig& cfg);

std::string format_errors_json(const std::vector<ValidationError>& errors);

}  // namespace mmfl::config
