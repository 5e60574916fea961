#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "mmfl/baselines.hpp"
#include "mmfl/config.hpp"
#include "mmfl/datagen.hpp"
#include "mmfl/metrics.hpp"
#include "mmfl/plan.hpp"

namespace fs = std::filesystem;
using namespace mmfl;

namespace {

void emit_error(const std::string& message) {
    nlohmann::json j;
    j["errors"] = nlohmann::json::array({{{"field", "cli"}, {"message", message}}});
    std::cerr << j.dump() << "\n";
}

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> strategy;
    std::optional<double> missing_rate;
    std::optional<std::string> out;
    std::size_t workers = 1;
};

// Config file first, command-line flags on top.
bool load_with_overrides(const std::string& config_path, const Overrides& ov,
                         config::ParseResult& result) {
    result = config_path.empty() ? config::validate_config("")
                                 : config::load_config_file(config_path);
    if (ov.seed) {
        result.config.run.seed = *ov.seed;
        result.config.dataset.seed = *ov.seed;
        result.plan.base = result.config;
        result.plan.seeds = {*ov.seed};
    }
    if (ov.strategy) {
        try {
            result.config.run.strategy = baselines::parse_strategy(*ov.strategy);
            result.plan.base = result.config;
            result.plan.strategies = {result.config.run.strategy};
        } catch (const std::exception& e) {
            result.errors.push_back({"run.strategy", e.what()});
        }
    }
    if (ov.missing_rate) {
        if (*ov.missing_rate < 0.0 || *ov.missing_rate > 1.0) {
            result.errors.push_back({"run.missing_rate", "must be in [0, 1]"});
        } else {
            result.config.run.missing_rate = *ov.missing_rate;
            result.plan.base = result.config;
            result.plan.missing_rates = {*ov.missing_rate};
        }
    }
    if (ov.out) result.plan.out_dir = *ov.out;
    if (!result.ok()) {
        std::cerr << config::format_errors_json(result.errors) << "\n";
        return false;
    }
    return true;
}

int cmd_run(const std::string& config_path, const Overrides& ov) {
    config::ParseResult parsed;
    if (!load_with_overrides(config_path, ov, parsed)) return 2;
    const auto& cfg = parsed.config.run;
    const auto data = datagen::generate_dataset(parsed.config.dataset);
    const auto partition =
        datagen::dirichlet_partition(data.train_labels(), cfg.n_clients, cfg.partition_alpha,
                                     cfg.seed);
    const auto modalities =
        datagen::assign_modalities(cfg.n_clients, cfg.missing_rate, cfg.seed);
    const flcore::RunResult result = baselines::run_strategy(
        cfg, data, partition, modalities, {ov.workers});

    const std::string out_dir = ov.out.value_or(parsed.plan.out_dir);
    fs::create_directories(out_dir);
    metrics::write_rounds_csv(result.history, out_dir + "/rounds.csv");
    metrics::write_class_report_json(result.audio_class_report, out_dir + "/class_report.json");
    metrics::write_class_report_csv(result.audio_class_report, out_dir + "/class_report.csv");
    flcore::save_paramset(result.audio_model, flcore::make_topology(cfg, data),
                          out_dir + "/audio_model.ckpt");

    const auto& last = result.history.back();
    nlohmann::json j;
    j["strategy"] = result.strategy;
    j["missing_rate"] = cfg.missing_rate;
    j["seed"] = cfg.seed;
    j["final_audio_top1"] = last.audio_top1;
    j["final_audio_topk"] = last.audio_topk;
    j["out_dir"] = out_dir;
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_sweep(const std::string& config_path, const Overrides& ov) {
    config::ParseResult parsed;
    if (!load_with_overrides(config_path, ov, parsed)) return 2;
    const plan::PlanResult result = plan::run_plan(parsed.plan, ov.workers);
    nlohmann::json j;
    j["out_dir"] = parsed.plan.out_dir;
    j["cells"] = result.cells.size();
    auto& rows = j["summary"] = nlohmann::json::array();
    for (const auto& row : result.summary) {
        rows.push_back({{"strategy", row.strategy},
                        {"missing_rate", row.missing_rate},
                        {"audio_top1_mean", row.audio_top1_mean},
                        {"audio_top1_var", row.audio_top1_var},
                        {"audio_topk_mean", row.audio_topk_mean},
                        {"n_seeds", row.n_seeds}});
    }
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_gen_data(const std::string& config_path, const Overrides& ov, const std::string& out_file,
                 const std::string& csv_file) {
    config::ParseResult parsed;
    if (!load_with_overrides(config_path, ov, parsed)) return 2;
    const auto data = datagen::generate_dataset(parsed.config.dataset);
    datagen::save_dataset(data, out_file);
    if (!csv_file.empty()) datagen::export_csv(data, csv_file);
    nlohmann::json j;
    j["path"] = out_file;
    j["train_samples"] = data.train.size();
    j["test_samples"] = data.test.size();
    char hash[32];
    std::snprintf(hash, sizeof(hash), "%016llx",
                  static_cast<unsigned long long>(data.content_hash()));
    j["content_hash"] = hash;
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_report_f1diff(const std::string& report_a, const std::string& report_b,
                      std::size_t top_n, const std::string& out_csv) {
    plan::emit_f1_diff_report(report_a, report_b, top_n, out_csv);
    std::cout << "wrote " << out_csv << "\n";
    return 0;
}

// Compares every analytic gradient coordinate against central finite
// differences on small random models; the library tests pin the same bound.
int cmd_gradcheck(std::uint64_t seed, std::size_t trials) {
    double worst = 0.0;
    for (std::size_t trial = 0; trial < trials; ++trial) {
        Rng rng(mix64(seed, trial));
        nnkit::AudioModel model;
        model.encoder = nnkit::make_dense_net(
            {4, 6, 4}, {nnkit::Activation::Relu, nnkit::Activation::Identity}, rng);
        model.head =
            nnkit::make_dense_net({4, 3}, {nnkit::Activation::Identity}, rng);
        nnkit::AudioBatch batch;
        std::vector<nnkit::Vec> teacher_probs;
        for (int i = 0; i < 3; ++i) {
            nnkit::Vec x(4), z(3);
            for (auto& v : x) v = rng.normal();
            for (auto& v : z) v = rng.normal();
            batch.inputs.push_back(x);
            batch.labels.push_back(rng.uniform_int(3));
            teacher_probs.push_back(nnkit::softmax(z));
        }
        const double temperature = 1.0 + rng.uniform(0.0, 3.0);
        const nnkit::GradResult g =
            nnkit::grad_distill(model, teacher_probs, batch, temperature, 1.0);
        const nnkit::Vec params = model.to_flat();
        const double h = 1e-5;
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto loss_at = [&](double v) {
                nnkit::Vec p = params;
                p[i] = v;
                nnkit::AudioModel probe = model;
                probe.from_flat(p);
                double loss = 0.0;
                for (std::size_t s = 0; s < batch.inputs.size(); ++s) {
                    const nnkit::Vec probs =
                        nnkit::softmax(nnkit::forward_audio(probe, batch.inputs[s]).logits);
                    loss += nnkit::cross_entropy(probs, batch.labels[s]);
                    loss += nnkit::kl_div(nnkit::temper(probs, temperature),
                                          nnkit::temper(teacher_probs[s], temperature));
                }
                return loss / static_cast<double>(batch.inputs.size());
            };
            const double numeric = (loss_at(params[i] + h) - loss_at(params[i] - h)) / (2.0 * h);
            const double diff = std::fabs(g.grad[i] - numeric);
            const double scale = std::max({std::fabs(g.grad[i]), std::fabs(numeric), 1e-4});
            worst = std::max(worst, diff / scale);
        }
    }
    nlohmann::json j;
    j["trials"] = trials;
    j["max_relative_error"] = worst;
    j["tolerance"] = 1e-4;
    j["pass"] = worst < 1e-4;
    std::cout << j.dump(2) << "\n";
    return worst < 1e-4 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated learning simulator for modality-heterogeneous populations"};
    app.require_subcommand(1);

    std::string config_path;
    Overrides ov;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "TOML config file");
        sub->add_option("--seed", ov.seed, "override run/dataset seed");
        sub->add_option("--strategy", ov.strategy,
                        "modality_mirror | unifl | multifl | harmony");
        sub->add_option("--missing-rate", ov.missing_rate, "fraction of audio-only clients");
        sub->add_option("--out", ov.out, "output directory");
        sub->add_option("--workers", ov.workers, "worker threads (never changes results)");
    };

    CLI::App* run = app.add_subcommand("run", "one (strategy, rate, seed) experiment");
    add_common(run);
    CLI::App* sweep = app.add_subcommand("sweep", "full strategy x rate x seed grid");
    add_common(sweep);

    CLI::App* gen = app.add_subcommand("gen-data", "generate and save a synthetic dataset");
    add_common(gen);
    std::string gen_out = "dataset.bin";
    std::string gen_csv;
    gen->add_option("--file", gen_out, "output dataset file");
    gen->add_option("--csv", gen_csv, "also export samples as CSV");

    CLI::App* f1 = app.add_subcommand("report-f1diff",
                                      "per-class F1 deltas between two finished runs");
    std::string report_a, report_b, f1_out = "f1_diff.csv";
    std::size_t top_n = 5;
    f1->add_option("--a", report_a, "first class_report.json")->required();
    f1->add_option("--b", report_b, "second class_report.json")->required();
    f1->add_option("--top-n", top_n, "number of classes to keep");
    f1->add_option("--out", f1_out, "output CSV path");

    CLI::App* gc = app.add_subcommand("gradcheck",
                                      "analytic vs finite-difference gradients");
    std::uint64_t gc_seed = 0;
    std::size_t gc_trials = 5;
    gc->add_option("--seed", gc_seed, "base seed");
    gc->add_option("--trials", gc_trials, "number of random models");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(config_path, ov);
        if (sweep->parsed()) return cmd_sweep(config_path, ov);
        if (gen->parsed()) return cmd_gen_data(config_path, ov, gen_out, gen_csv);
        if (f1->parsed()) return cmd_report_f1diff(report_a, report_b, top_n, f1_out);
        if (gc->parsed()) return cmd_gradcheck(gc_seed, gc_trials);
    } catch (const std::exception& e) {
        emit_error(e.what());
        return 1;
    }
    return 0;
}
