#include "mmfl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace mmfl::metrics {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

std::string fmt(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

}  // namespace

double topk_accuracy(const std::vector<Vec>& logits, const std::vector<std::size_t>& labels,
                     std::size_t k) {
    require(!logits.empty(), "empty test set");
    require(logits.size() == labels.size(), "logits/labels length mismatch");
    require(k >= 1 && k <= logits.front().size(), "k out of range");
    std::size_t hits = 0;
    std::vector<std::size_t> order(logits.front().size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const Vec& row = logits[i];
        require(labels[i] < row.size(), "label out of range");
        order.resize(row.size());
        for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k),
                          order.end(), [&](std::size_t a, std::size_t b) {
                              if (row[a] != row[b]) return row[a] > row[b];
                              return a < b;
                          });
        for (std::size_t j = 0; j < k; ++j) {
            if (order[j] == labels[i]) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(logits.size());
}

ClassReport class_f1(const std::vector<std::size_t>& predictions,
                     const std::vector<std::size_t>& labels, std::size_t num_classes) {
    require(predictions.size() == labels.size(), "predictions/labels length mismatch");
    std::vector<std::size_t> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        require(labels[i] < num_classes && predictions[i] < num_classes, "label out of range");
        if (predictions[i] == labels[i]) {
            tp[labels[i]]++;
        } else {
            fp[predictions[i]]++;
            fn[labels[i]]++;
        }
    }
    ClassReport report;
    report.per_class.resize(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) {
        ClassStats& s = report.per_class[c];
        s.support = tp[c] + fn[c];
        s.precision = tp[c] + fp[c] > 0
                          ? static_cast<double>(tp[c]) / static_cast<double>(tp[c] + fp[c])
                          : 0.0;
        s.recall =
            s.support > 0 ? static_cast<double>(tp[c]) / static_cast<double>(s.support) : 0.0;
        s.f1 = s.precision + s.recall > 0.0
                   ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
                   : 0.0;
    }
    return report;
}

std::vector<F1Delta> f1_diff_report(const ClassReport& report_a, const ClassReport& report_b,
                                    std::size_t top_n) {
    require(report_a.per_class.size() == report_b.per_class.size(), "class count mismatch");
    require(report_a.dataset_hash == report_b.dataset_hash,
            "reports were computed on different datasets");
    std::vector<F1Delta> deltas;
    for (std::size_t c = 0; c < report_a.per_class.size(); ++c) {
        deltas.push_back({c, report_a.per_class[c].f1 - report_b.per_class[c].f1});
    }
    std::sort(deltas.begin(), deltas.end(), [](const F1Delta& a, const F1Delta& b) {
        const double da = std::fabs(a.delta), db = std::fabs(b.delta);
        if (da != db) return da > db;
        return a.class_index < b.class_index;
    });
    if (deltas.size() > top_n) deltas.resize(top_n);
    return deltas;
}

void write_rounds_csv(const std::vector<RoundMetrics>& history, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << "round,stage,audio_top1,audio_topk,multimodal_top1,train_loss\n";
    for (const auto& m : history) {
        os << m.round << ',' << m.stage << ',' << fmt(m.audio_top1) << ',' << fmt(m.audio_topk)
           << ',' << (m.multimodal_top1 ? fmt(*m.multimodal_top1) : std::string{}) << ','
           << fmt(m.train_loss) << "\n";
    }
}

std::vector<RoundMetrics> read_rounds_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open for reading: " + path);
    std::string line;
    std::getline(is, line);  // header
    std::vector<RoundMetrics> history;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        RoundMetrics m;
        std::getline(ss, field, ',');
        m.round = std::stoull(field);
        std::getline(ss, field, ',');
        m.stage = std::stoi(field);
        std::getline(ss, field, ',');
        m.audio_top1 = std::stod(field);
        std::getline(ss, field, ',');
        m.audio_topk = std::stod(field);
        std::getline(ss, field, ',');
        if (!field.empty()) m.multimodal_top1 = std::stod(field);
        std::getline(ss, field, ',');
        m.train_loss = std::stod(field);
        history.push_back(m);
    }
    return history;
}

void write_class_report_json(const ClassReport& report, const std::string& path) {
    nlohmann::json j;
    j["dataset_hash"] = report.dataset_hash;
    j["classes"] = nlohmann::json::array();
    for (const auto& s : report.per_class) {
        j["classes"].push_back({{"precision", s.precision},
                                {"recall", s.recall},
                                {"f1", s.f1},
                                {"support", s.support}});
    }
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << j.dump(2) << "\n";
}

ClassReport read_class_report_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open for reading: " + path);
    nlohmann::json j = nlohmann::json::parse(is);
    ClassReport report;
    report.dataset_hash = j.at("dataset_hash").get<std::uint64_t>();
    for (const auto& e : j.at("classes")) {
        ClassStats s;
        s.precision = e.at("precision").get<double>();
        s.recall = e.at("recall").get<double>();
        s.f1 = e.at("f1").get<double>();
        s.support = e.at("support").get<std::size_t>();
        report.per_class.push_back(s);
    }
    return report;
}

void write_class_report_csv(const ClassReport& report, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << "class,precision,recall,f1,support\n";
    for (std::size_t c = 0; c < report.per_class.size(); ++c) {
        const auto& s = report.per_class[c];
        os << c << ',' << fmt(s.precision) << ',' << fmt(s.recall) << ',' << fmt(s.f1) << ','
           << s.support << "\n";
    }
}

void write_f1_diff_csv(const std::vector<F1Delta>& deltas, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << "class,f1_delta\n";
    for (const auto& d : deltas) os << d.class_index << ',' << fmt(d.delta) << "\n";
}

}  // namespace mmfl::metrics
