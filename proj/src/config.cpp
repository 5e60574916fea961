#include "mmfl/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "mmfl/baselines.hpp"

namespace mmfl::config {

namespace {

struct Value {
    enum class Kind { Number, String, Bool, NumberArray, StringArray } kind = Kind::Number;
    double num = 0.0;
    std::string str;
    bool flag = false;
    std::vector<double> nums;
    std::vector<std::string> strs;
};

using Table = std::map<std::string, Value>;

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return {};
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

// Strips a trailing comment, respecting quoted strings.
std::string strip_comment(const std::string& line) {
    bool in_string = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') in_string = !in_string;
        if (line[i] == '#' && !in_string) return line.substr(0, i);
    }
    return line;
}

bool parse_scalar(const std::string& text, Value& out, std::string& err) {
    const std::string t = trim(text);
    if (t.empty()) {
        err = "empty value";
        return false;
    }
    if (t.front() == '"') {
        if (t.size() < 2 || t.back() != '"') {
            err = "unterminated string";
            return false;
        }
        out.kind = Value::Kind::String;
        out.str = t.substr(1, t.size() - 2);
        return true;
    }
    if (t == "true" || t == "false") {
        out.kind = Value::Kind::Bool;
        out.flag = t == "true";
        return true;
    }
    char* end = nullptr;
    const double v = std::strtod(t.c_str(), &end);
    if (end == t.c_str() + t.size()) {
        out.kind = Value::Kind::Number;
        out.num = v;
        return true;
    }
    err = "cannot parse value: " + t;
    return false;
}

// Flat TOML subset: [tables], key = scalar | [scalar, ...].
bool parse_toml(const std::string& text, Table& table, std::vector<ValidationError>& errors) {
    std::istringstream is(text);
    std::string line;
    std::string section;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        line = trim(strip_comment(line));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                errors.push_back({"line " + std::to_string(lineno), "malformed table header"});
                continue;
            }
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            errors.push_back({"line " + std::to_string(lineno), "expected key = value"});
            continue;
        }
        const std::string key =
            (section.empty() ? "" : section + ".") + trim(line.substr(0, eq));
        std::string rhs = trim(line.substr(eq + 1));
        Value v;
        std::string err;
        if (!rhs.empty() && rhs.front() == '[') {
            if (rhs.back() != ']') {
                errors.push_back({key, "unterminated array"});
                continue;
            }
            rhs = rhs.substr(1, rhs.size() - 2);
            std::stringstream ss(rhs);
            std::string item;
            bool ok = true;
            std::vector<Value> items;
            while (std::getline(ss, item, ',')) {
                if (trim(item).empty()) continue;
                Value iv;
                if (!parse_scalar(item, iv, err)) {
                    errors.push_back({key, err});
                    ok = false;
                    break;
                }
                items.push_back(iv);
            }
            if (!ok) continue;
            const bool all_strings = std::all_of(items.begin(), items.end(), [](const Value& x) {
                return x.kind == Value::Kind::String;
            });
            if (all_strings && !items.empty()) {
                v.kind = Value::Kind::StringArray;
                for (const auto& x : items) v.strs.push_back(x.str);
            } else {
                v.kind = Value::Kind::NumberArray;
                for (const auto& x : items) {
                    if (x.kind != Value::Kind::Number) {
                        errors.push_back({key, "array entries must share one scalar type"});
                        break;
                    }
                    v.nums.push_back(x.num);
                }
            }
        } else if (!parse_scalar(rhs, v, err)) {
            errors.push_back({key, err});
            continue;
        }
        table[key] = v;
    }
    return errors.empty();
}

class Extractor {
  public:
    Extractor(Table table, std::vector<ValidationError>& errors)
        : table_(std::move(table)), errors_(&errors) {}

    void number(const std::string& key, double& out, double lo, double hi) {
        const Value* v = take(key);
        if (!v) return;
        if (v->kind != Value::Kind::Number) {
            fail(key, "expected a number");
            return;
        }
        if (v->num < lo || v->num > hi) {
            fail(key, "out of range [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
            return;
        }
        out = v->num;
    }

    template <typename T>
    void count(const std::string& key, T& out, double lo, double hi) {
        const Value* v = take(key);
        if (!v) return;
        if (v->kind != Value::Kind::Number || v->num != std::floor(v->num)) {
            fail(key, "expected an integer");
            return;
        }
        if (v->num < lo || v->num > hi) {
            fail(key, "out of range [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
            return;
        }
        out = static_cast<T>(v->num);
    }

    void boolean(const std::string& key, bool& out) {
        const Value* v = take(key);
        if (!v) return;
        if (v->kind != Value::Kind::Bool) {
            fail(key, "expected true or false");
            return;
        }
        out = v->flag;
    }

    void string(const std::string& key, std::string& out) {
        const Value* v = take(key);
        if (!v) return;
        if (v->kind != Value::Kind::String) {
            fail(key, "expected a string");
            return;
        }
        out = v->str;
    }

    void number_array(const std::string& key, std::vector<double>& out) {
        const Value* v = take(key);
        if (!v) return;
        if (v->kind != Value::Kind::NumberArray) {
            fail(key, "expected an array of numbers");
            return;
        }
        out = v->nums;
    }

    void string_array(const std::string& key, std::vector<std::string>& out) {
        const Value* v = take(key);
        if (!v) return;
        if (v->kind != Value::Kind::StringArray) {
            fail(key, "expected an array of strings");
            return;
        }
        out = v->strs;
    }

    void fail(const std::string& key, const std::string& msg) {
        errors_->push_back({key, msg});
    }

    void report_unknown_keys() {
        for (const auto& [key, value] : table_) {
            if (!used_.count(key)) fail(key, "unknown configuration key");
        }
    }

  private:
    const Value* take(const std::string& key) {
        used_.insert(key);
        const auto it = table_.find(key);
        return it == table_.end() ? nullptr : &it->second;
    }

    Table table_;
    std::set<std::string> used_;
    std::vector<ValidationError>* errors_;
};

}  // namespace

ParseResult validate_config(const std::string& raw_text) {
    ParseResult result;
    Table table;
    parse_toml(raw_text, table, result.errors);
    Extractor ex(std::move(table), result.errors);

    flcore::RunConfig& run = result.config.run;
    ex.count("run.n_clients", run.n_clients, 1, 1e9);
    ex.number("run.missing_rate", run.missing_rate, 0.0, 1.0);
    ex.count("run.rounds", run.rounds, 1, 1e9);
    ex.count("run.local_epochs", run.local_epochs, 1, 1e6);
    ex.count("run.clients_per_round", run.clients_per_round, 1, 1e9);
    ex.number("run.partition_alpha", run.partition_alpha, 1e-6, 1e6);
    ex.number("run.lr", run.lr, 1e-300, 1e6);
    ex.number("run.temperature", run.temperature, 1e-300, 1e6);
    ex.number("run.kl_weight", run.kl_weight, 0.0, 1e6);
    ex.count("run.batch_size", run.batch_size, 1, 1e9);
    ex.count("run.seed", run.seed, 0, 1.8e19);
    ex.count("run.topk", run.topk, 1, 1e6);
    ex.count("run.hidden_dim", run.hidden_dim, 1, 1e6);
    ex.count("run.embed_dim", run.embed_dim, 1, 1e6);
    std::string strategy = "modality_mirror";
    ex.string("run.strategy", strategy);
    try {
        run.strategy = baselines::parse_strategy(strategy);
    } catch (const std::invalid_argument& e) {
        ex.fail("run.strategy", e.what());
    }
    std::string divisor = "mean";
    ex.string("run.stage2_divisor", divisor);
    if (divisor == "mean") {
        run.stage2_divisor = flcore::Stage2Divisor::Mean;
    } else if (divisor == "population_audio") {
        run.stage2_divisor = flcore::Stage2Divisor::PopulationAudioCount;
    } else {
        ex.fail("run.stage2_divisor", "expected \"mean\" or \"population_audio\"");
    }
    ex.boolean("run.warm_start", run.warm_start);
    ex.boolean("run.size_weighted_aggregation", run.size_weighted_aggregation);
    ex.boolean("run.harmony_freeze_encoders", run.harmony_freeze_encoders);
    if (run.clients_per_round > run.n_clients) {
        ex.fail("run.clients_per_round", "must not exceed run.n_clients");
    }

    datagen::DatasetSpec& ds = result.config.dataset;
    ex.count("dataset.num_classes", ds.num_classes, 2, 1e6);
    ex.count("dataset.audio_dim", ds.audio_dim, 2, 1e6);
    ex.count("dataset.visual_dim", ds.visual_dim, 2, 1e6);
    ex.count("dataset.samples_per_class", ds.samples_per_class, 1, 1e9);
    ex.number("dataset.audio_noise_sigma", ds.audio_noise_sigma, 1e-12, 1e6);
    ex.number("dataset.visual_noise_sigma", ds.visual_noise_sigma, 1e-12, 1e6);
    std::vector<double> pairs;
    ex.number_array("dataset.ambiguous_pairs", pairs);
    if (pairs.size() % 2 != 0) {
        ex.fail("dataset.ambiguous_pairs", "expected an even-length flat list of class indices");
    } else {
        std::set<std::size_t> seen;
        for (std::size_t i = 0; i + 1 < pairs.size(); i += 2) {
            const double a = pairs[i], b = pairs[i + 1];
            if (a != std::floor(a) || b != std::floor(b) || a < 0 || b < 0 ||
                a >= static_cast<double>(ds.num_classes) ||
                b >= static_cast<double>(ds.num_classes)) {
                ex.fail("dataset.ambiguous_pairs", "pair indices must be class indices");
                break;
            }
            const auto ia = static_cast<std::size_t>(a), ib = static_cast<std::size_t>(b);
            if (ia == ib || !seen.insert(ia).second || !seen.insert(ib).second) {
                ex.fail("dataset.ambiguous_pairs", "pairs must be disjoint and non-degenerate");
                break;
            }
            ds.audio_ambiguous_pairs.emplace_back(ia, ib);
        }
    }
    ds.seed = run.seed;

    ExperimentPlan& plan = result.plan;
    plan.base = result.config;
    std::vector<std::string> strategies{strategy};
    ex.string_array("sweep.strategies", strategies);
    for (const auto& name : strategies) {
        try {
            plan.strategies.push_back(baselines::parse_strategy(name));
        } catch (const std::invalid_argument& e) {
            ex.fail("sweep.strategies", e.what());
        }
    }
    std::vector<double> rates{run.missing_rate};
    ex.number_array("sweep.missing_rates", rates);
    for (double r : rates) {
        if (r < 0.0 || r > 1.0) {
            ex.fail("sweep.missing_rates", "rates must be in [0, 1]");
            break;
        }
    }
    plan.missing_rates = rates;
    std::vector<double> seeds{static_cast<double>(run.seed)};
    ex.number_array("sweep.seeds", seeds);
    for (double s : seeds) {
        if (s != std::floor(s) || s < 0) {
            ex.fail("sweep.seeds", "seeds must be nonnegative integers");
            break;
        }
        plan.seeds.push_back(static_cast<std::uint64_t>(s));
    }
    ex.string("sweep.out_dir", plan.out_dir);

    ex.report_unknown_keys();
    return result;
}

ParseResult load_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) {
        ParseResult r;
        r.errors.push_back({"config", "cannot open file: " + path});
        return r;
    }
    std::stringstream ss;
    ss << is.rdbuf();
    return validate_config(ss.str());
}

std::string render_config(const FullConfig& cfg) {
    std::ostringstream os;
    os << "[run]\n";
    os << "n_clients = " << cfg.run.n_clients << "\n";
    os << "missing_rate = " << cfg.run.missing_rate << "\n";
    os << "rounds = " << cfg.run.rounds << "\n";
    os << "local_epochs = " << cfg.run.local_epochs << "\n";
    os << "clients_per_round = " << cfg.run.clients_per_round << "\n";
    os << "partition_alpha = " << cfg.run.partition_alpha << "\n";
    os << "lr = " << cfg.run.lr << "\n";
    os << "temperature = " << cfg.run.temperature << "\n";
    os << "kl_weight = " << cfg.run.kl_weight << "\n";
    os << "batch_size = " << cfg.run.batch_size << "\n";
    os << "seed = " << cfg.run.seed << "\n";
    os << "topk = " << cfg.run.topk << "\n";
    os << "hidden_dim = " << cfg.run.hidden_dim << "\n";
    os << "embed_dim = " << cfg.run.embed_dim << "\n";
    os << "strategy = \"" << baselines::strategy_name(cfg.run.strategy) << "\"\n";
    os << "stage2_divisor = \""
       << (cfg.run.stage2_divisor == flcore::Stage2Divisor::Mean ? "mean" : "population_audio")
       << "\"\n";
    os << "warm_start = " << (cfg.run.warm_start ? "true" : "false") << "\n";
    os << "size_weighted_aggregation = "
       << (cfg.run.size_weighted_aggregation ? "true" : "false") << "\n";
    os << "harmony_freeze_encoders = " << (cfg.run.harmony_freeze_encoders ? "true" : "false")
       << "\n\n";
    os << "[dataset]\n";
    os << "num_classes = " << cfg.dataset.num_classes << "\n";
    os << "audio_dim = " << cfg.dataset.audio_dim << "\n";
    os << "visual_dim = " << cfg.dataset.visual_dim << "\n";
    os << "samples_per_class = " << cfg.dataset.samples_per_class << "\n";
    os << "audio_noise_sigma = " << cfg.dataset.audio_noise_sigma << "\n";
    os << "visual_noise_sigma = " << cfg.dataset.visual_noise_sigma << "\n";
    os << "ambiguous_pairs = [";
    for (std::size_t i = 0; i < cfg.dataset.audio_ambiguous_pairs.size(); ++i) {
        const auto& [a, b] = cfg.dataset.audio_ambiguous_pairs[i];
        os << (i ? ", " : "") << a << ", " << b;
    }
    os << "]\n";
    return os.str();
}

std::string format_errors_json(const std::vector<ValidationError>& errors) {
    nlohmann::json j;
    j["errors"] = nlohmann::json::array();
    for (const auto& e : errors) {
        j["errors"].push_back({{"field", e.field}, {"message", e.message}});
    }
    return j.dump();
}

}  // namespace mmfl::config
