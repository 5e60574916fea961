#pragma once

#include <string>
#include <vector>

#include "mmfl/config.hpp"
#include "mmfl/metrics.hpp"

namespace mmfl::plan {

struct SummaryRow {
    std::string strategy;
    double missing_rate = 0.0;
    double audio_top1_mean = 0.0;
    double audio_top1_var = 0.0;
    double audio_topk_mean = 0.0;
    double audio_topk_var = 0.0;
    std::size_t n_seeds = 0;
};

struct CellResult {
    std::string strategy;
    double missing_rate = 0.0;
    std::uint64_t seed = 0;
    double final_audio_top1 = 0.0;
    double final_audio_topk = 0.0;
    std::string cell_dir;
};

struct PlanResult {
    std::vector<CellResult> cells;
    std::vector<SummaryRow> summary;
};

std::string cell_dir(const std::string& out_dir, const std::string& strategy,
                     double missing_rate, std::uint64_t seed);

// Executes every (strategy, missing_rate, seed) cell exactly once, writing
// rounds.csv, class_report.{json,csv} and an audio-model checkpoint per
// cell, plus summary.csv and summary.json. Cells run on `workers` threads;
// each cell is single-threaded and deterministic.
PlanResult run_plan(const config::ExperimentPlan& plan, std::size_t workers = 1);

std::vector<SummaryRow> summarize(const config::ExperimentPlan& plan,
                                  const std::vector<CellResult>& cells);

void write_summary_csv(const std::vector<SummaryRow>& rows, const std::string& path);
void write_summary_json(const std::vector<SummaryRow>& rows, const std::string& path);

// The Figure-2-style report: per-class F1 deltas between two finished runs,
// read back from their class_report.json files.
void emit_f1_diff_report(const std::string& report_a_path, const std::string& report_b_path,
                         std::size_t top_n, const std::string& out_csv);

}  // namespace mmfl::plan
