#include "mmfl/plan.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "mmfl/baselines.hpp"

namespace mmfl::plan {

namespace fs = std::filesystem;

namespace {

std::string fmt(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

std::string rate_label(double rate) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", rate);
    return buf;
}

}  // namespace

std::string cell_dir(const std::string& out_dir, const std::string& strategy,
                     double missing_rate, std::uint64_t seed) {
    return out_dir + "/" + strategy + "/" + rate_label(missing_rate) + "/" +
           std::to_string(seed);
}

PlanResult run_plan(const config::ExperimentPlan& plan, std::size_t workers) {
    fs::create_directories(plan.out_dir);
    {
        // Fail on an unwritable output directory before any compute.
        const std::string probe = plan.out_dir + "/.write_probe";
        std::ofstream os(probe);
        if (!os) throw std::runtime_error("output directory is not writable: " + plan.out_dir);
        os.close();
        fs::remove(probe);
    }

    struct Cell {
        flcore::Strategy strategy;
        double rate;
        std::uint64_t seed;
    };
    std::vector<Cell> cells;
    for (const auto s : plan.strategies) {
        for (const double r : plan.missing_rates) {
            for (const auto seed : plan.seeds) cells.push_back({s, r, seed});
        }
    }

    PlanResult result;
    result.cells.resize(cells.size());
    flcore::parallel_for(cells.size(), workers, [&](std::size_t i) {
        const Cell& cell = cells[i];
        flcore::RunConfig cfg = plan.base.run;
        cfg.strategy = cell.strategy;
        cfg.missing_rate = cell.rate;
        cfg.seed = cell.seed;
        datagen::DatasetSpec spec = plan.base.dataset;
        spec.seed = cell.seed;

        const auto data = datagen::generate_dataset(spec);
        const auto partition =
            datagen::dirichlet_partition(data.train_labels(), cfg.n_clients, cfg.partition_alpha,
                                         cfg.seed);
        const auto modalities =
            datagen::assign_modalities(cfg.n_clients, cfg.missing_rate, cfg.seed);

        const flcore::RunResult run =
            baselines::run_strategy(cfg, data, partition, modalities, {});

        const std::string dir =
            cell_dir(plan.out_dir, baselines::strategy_name(cell.strategy), cell.rate, cell.seed);
        fs::create_directories(dir);
        metrics::write_rounds_csv(run.history, dir + "/rounds.csv");
        metrics::write_class_report_json(run.audio_class_report, dir + "/class_report.json");
        metrics::write_class_report_csv(run.audio_class_report, dir + "/class_report.csv");
        flcore::save_paramset(run.audio_model, flcore::make_topology(cfg, data),
                              dir + "/audio_model.ckpt");

        CellResult& out = result.cells[i];
        out.strategy = baselines::strategy_name(cell.strategy);
        out.missing_rate = cell.rate;
        out.seed = cell.seed;
        out.cell_dir = dir;
        if (!run.history.empty()) {
            out.final_audio_top1 = run.history.back().audio_top1;
            out.final_audio_topk = run.history.back().audio_topk;
        }
    });

    result.summary = summarize(plan, result.cells);
    write_summary_csv(result.summary, plan.out_dir + "/summary.csv");
    write_summary_json(result.summary, plan.out_dir + "/summary.json");
    return result;
}

std::vector<SummaryRow> summarize(const config::ExperimentPlan& plan,
                                  const std::vector<CellResult>& cells) {
    std::vector<SummaryRow> rows;
    for (const auto s : plan.strategies) {
        for (const double r : plan.missing_rates) {
            SummaryRow row;
            row.strategy = baselines::strategy_name(s);
            row.missing_rate = r;
            std::vector<double> top1, topk;
            for (const auto& c : cells) {
                if (c.strategy == row.strategy && c.missing_rate == r) {
                    top1.push_back(c.final_audio_top1);
                    topk.push_back(c.final_audio_topk);
                }
            }
            row.n_seeds = top1.size();
            if (row.n_seeds == 0) continue;
            auto mean_of = [](const std::vector<double>& v) {
                double m = 0.0;
                for (double x : v) m += x;
                return m / static_cast<double>(v.size());
            };
            auto var_of = [&](const std::vector<double>& v, double m) {
                double acc = 0.0;
                for (double x : v) acc += (x - m) * (x - m);
                return acc / static_cast<double>(v.size());  // population variance
            };
            row.audio_top1_mean = mean_of(top1);
            row.audio_top1_var = var_of(top1, row.audio_top1_mean);
            row.audio_topk_mean = mean_of(topk);
            row.audio_topk_var = var_of(topk, row.audio_topk_mean);
            rows.push_back(row);
        }
    }
    return rows;
}

void write_summary_csv(const std::vector<SummaryRow>& rows, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << "strategy,missing_rate,audio_top1_mean,audio_top1_var,audio_topk_mean,audio_topk_var,"
          "n_seeds\n";
    for (const auto& r : rows) {
        os << r.strategy << ',' << rate_label(r.missing_rate) << ',' << fmt(r.audio_top1_mean)
           << ',' << fmt(r.audio_top1_var) << ',' << fmt(r.audio_topk_mean) << ','
           << fmt(r.audio_topk_var) << ',' << r.n_seeds << "\n";
    }
}

void write_summary_json(const std::vector<SummaryRow>& rows, const std::string& path) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) {
        j.push_back({{"strategy", r.strategy},
                     {"missing_rate", r.missing_rate},
                     {"audio_top1_mean", r.audio_top1_mean},
                     {"audio_top1_var", r.audio_top1_var},
                     {"audio_topk_mean", r.audio_topk_mean},
                     {"audio_topk_var", r.audio_topk_var},
                     {"n_seeds", r.n_seeds}});
    }
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << j.dump(2) << "\n";
}

void emit_f1_diff_report(const std::string& report_a_path, const std::string& report_b_path,
                         std::size_t top_n, const std::string& out_csv) {
    const auto a = metrics::read_class_report_json(report_a_path);
    const auto b = metrics::read_class_report_json(report_b_path);
    if (a.dataset_hash != b.dataset_hash) {
        throw std::invalid_argument("runs were evaluated on different datasets");
    }
    metrics::write_f1_diff_csv(metrics::f1_diff_report(a, b, top_n), out_csv);
}

}  // namespace mmfl::plan
