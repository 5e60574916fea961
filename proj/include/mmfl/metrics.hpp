#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mmfl/nnkit.hpp"

namespace mmfl::metrics {

using nnkit::Vec;

struct RoundMetrics {
    std::size_t round = 0;
    int stage = 1;
    double audio_top1 = 0.0;
    double audio_topk = 0.0;
    std::optional<double> multimodal_top1;
    double train_loss = 0.0;
};

struct ClassStats {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;
};

struct ClassReport {
    std::vector<ClassStats> per_class;
    std::uint64_t dataset_hash = 0;  // guards cross-run comparisons
};

struct F1Delta {
    std::size_t class_index = 0;
    double delta = 0.0;  // f1(a) - f1(b)
};

// Fraction of samples whose true label is among the k largest logits, ties
// broken toward the lower class index.
double topk_accuracy(const std::vector<Vec>& logits, const std::vector<std::size_t>& labels,
                     std::size_t k);

ClassReport class_f1(const std::vector<std::size_t>& predictions,
                     const std::vector<std::size_t>& labels, std::size_t num_classes);

// Per-class f1(a) - f1(b), sorted by |delta| descending (ties by class
// index), truncated to top_n.
std::vector<F1Delta> f1_diff_report(const ClassReport& report_a, const ClassReport& report_b,
                                    std::size_t top_n);

void write_rounds_csv(const std::vector<RoundMetrics>& history, const std::string& path);
std::vector<RoundMetrics> read_rounds_csv(const std::string& path);

void write_class_report_json(const ClassReport& report, const std::string& path);
ClassReport read_class_report_json(const std::string& path);
void write_class_report_csv(const ClassReport& report, const std::string& path);
void write_f1_diff_csv(const std::vector<F1Delta>& deltas, const std::string& path);

}  // namespace mmfl::metrics
