#pragma once

#include "kbal/balance.hpp"
#include "kbal/common.hpp"
#include "kbal/estimate.hpp"
#include "kbal/sim.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

namespace kbal {

/// Everything that determines a run. Serialized into every output file.
/// The output directory and thread count are not: neither changes results.
struct RunConfig {
    std::string command;
    std::optional<std::string> input;
    std::optional<std::string> benchmark;
    std::string covariate_set = "standard";
    std::string treatment_col = "treat";
    std::optional<std::string> outcome_col;
    Estimand estimand = Estimand::att;
    std::optional<double> b;  // absent: number of covariates
    Distance distance = Distance::euclidean;
    std::optional<double> trimratio;
    Index r_max = 500;
    int patience = 15;
    double tol = 1e-8;
    int bootstrap = 0;
    std::uint64_t seed = 1;
    std::optional<std::string> study;
    int reps = 0;

    PipelineConfig pipeline() const {
        PipelineConfig p;
        p.estimand = estimand;
        p.kernel.b = b.value_or(0.0);
        p.kernel.distance = distance;
        p.trimratio = trimratio;
        p.scan.r_max = r_max;
        p.scan.patience = patience;
        p.scan.solver.tol = tol;
        return p;
    }
};

/// Minimal JSON emitter: keys appear in call order and doubles use 17
/// significant digits (non-finite values become null).
class JsonWriter {
public:
    explicit JsonWriter(bool pretty = true) : pretty_(pretty) {}

    JsonWriter& begin_object() { return open('{'); }
    JsonWriter& end_object() { return close('}'); }
    JsonWriter& begin_array() { return open('['); }
    JsonWriter& end_array() { return close(']'); }

    JsonWriter& key(std::string_view k) {
        separator();
        string(k);
        out_ << (pretty_ ? ": " : ":");
        after_key_ = true;
        return *this;
    }

    JsonWriter& value(double v) {
        separator();
        if (std::isfinite(v)) out_ << format_double(v);
        else out_ << "null";
        return *this;
    }
    JsonWriter& value(std::int64_t v) {
        separator();
        out_ << v;
        return *this;
    }
    JsonWriter& value(int v) { return value(static_cast<std::int64_t>(v)); }
    JsonWriter& value(std::uint64_t v) {
        separator();
        out_ << v;
        return *this;
    }
    JsonWriter& value(bool v) {
        separator();
        out_ << (v ? "true" : "false");
        return *this;
    }
    JsonWriter& value(std::string_view s) {
        separator();
        string(s);
        return *this;
    }
    JsonWriter& value(const char* s) { return value(std::string_view(s)); }
    JsonWriter& null() {
        separator();
        out_ << "null";
        return *this;
    }
    template <class T>
    JsonWriter& value(const std::optional<T>& v) {
        return v ? value(*v) : null();
    }

    std::string str() const { return pretty_ ? out_.str() + "\n" : out_.str(); }

private:
    bool pretty_;
    std::ostringstream out_;
    std::vector<bool> first_;
    bool after_key_ = false;

    void separator() {
        if (after_key_) {
            after_key_ = false;
            return;
        }
        if (!first_.empty()) {
            if (!first_.back()) out_ << ',';
            first_.back() = false;
            if (pretty_) out_ << '\n' << std::string(2 * first_.size(), ' ');
        }
    }
    JsonWriter& open(char c) {
        separator();
        out_ << c;
        first_.push_back(true);
        return *this;
    }
    JsonWriter& close(char c) {
        const bool empty = first_.back();
        first_.pop_back();
        if (!empty && pretty_) out_ << '\n' << std::string(2 * first_.size(), ' ');
        out_ << c;
        return *this;
    }
    void string(std::string_view s) {
        out_ << '"';
        for (char ch : s) {
            switch (ch) {
                case '"': out_ << "\\\""; break;
                case '\\': out_ << "\\\\"; break;
                case '\n': out_ << "\\n"; break;
                case '\t': out_ << "\\t"; break;
                default:
                    if (static_cast<unsigned char>(ch) < 0x20) {
                        char buf[8];
                        std::snprintf(buf, sizeof buf, "\\u%04x", ch);
                        out_ << buf;
                    } else {
                        out_ << ch;
                    }
            }
        }
        out_ << '"';
    }
};

inline void write_config(JsonWriter& j, const RunConfig& c) {
    j.begin_object();
    j.key("command").value(c.command);
    j.key("input").value(c.input);
    j.key("benchmark").value(c.benchmark);
    j.key("covariate_set").value(c.covariate_set);
    j.key("treatment_col").value(c.treatment_col);
    j.key("outcome_col").value(c.outcome_col);
    j.key("estimand").value(to_string(c.estimand));
    j.key("b").value(c.b);
    j.key("distance").value(to_string(c.distance));
    j.key("trimratio").value(c.trimratio);
    j.key("r_max").value(static_cast<std::int64_t>(c.r_max));
    j.key("patience").value(c.patience);
    j.key("tol").value(c.tol);
    j.key("bootstrap").value(c.bootstrap);
    j.key("seed").value(c.seed);
    j.key("study").value(c.study);
    j.key("reps").value(c.reps);
    j.end_object();
}

inline std::string config_json_line(const RunConfig& c) {
    JsonWriter j(false);
    write_config(j, c);
    return j.str();
}

/// report.json contents. `with_outcome` false drops point, se_fixed and
/// ci_boot (the weights command, or data without an outcome).
inline std::string report_json(const EstimateReport& r, const RunConfig& config, bool with_outcome) {
    JsonWriter j;
    j.begin_object();
    j.key("config");
    write_config(j, config);
    j.key("estimand").value(to_string(r.estimand));
    if (with_outcome) {
        j.key("point").value(r.point);
        j.key("se_fixed").value(r.se_fixed);
        j.key("ci_boot");
        if (r.ci_boot) j.begin_array().value(r.ci_boot->first).value(r.ci_boot->second).end_array();
        else j.null();
    }
    j.key("min90").value(static_cast<std::int64_t>(r.min90));
    j.key("l1_before").value(r.l1_before);
    j.key("l1_after").value(r.l1_after);
    j.key("r").value(static_cast<std::int64_t>(r.r));
    j.key("variance_explained").value(r.variance_explained);
    j.key("ipw_max_dev").value(r.ipw_max_dev);
    j.key("n_trimmed").value(static_cast<std::int64_t>(r.n_trimmed));
    j.key("trimmed_ids").begin_array();
    for (Index id : r.trimmed_ids) j.value(static_cast<std::int64_t>(id));
    j.end_array();
    j.key("version").value(version);
    j.end_object();
    return j.str();
}

/// Inverse of report_json for the report fields.
inline EstimateReport parse_report(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    EstimateReport r;
    r.estimand = parse_estimand(j.at("estimand").get<std::string>());
    auto opt_double = [&](const char* k) -> std::optional<double> {
        if (!j.contains(k) || j[k].is_null()) return std::nullopt;
        return j[k].get<double>();
    };
    r.point = opt_double("point");
    r.se_fixed = opt_double("se_fixed");
    if (j.contains("ci_boot") && !j["ci_boot"].is_null()) r.ci_boot = std::pair{j["ci_boot"][0].get<double>(), j["ci_boot"][1].get<double>()};
    r.min90 = j.at("min90").get<Index>();
    auto num = [&](const char* k) { return j.at(k).is_null() ? std::numeric_limits<double>::infinity() : j.at(k).get<double>(); };
    r.l1_before = num("l1_before");
    r.l1_after = num("l1_after");
    r.r = j.at("r").get<Index>();
    r.variance_explained = num("variance_explained");
    r.ipw_max_dev = opt_double("ipw_max_dev");
    r.n_trimmed = j.at("n_trimmed").get<Index>();
    for (const auto& id : j.at("trimmed_ids")) r.trimmed_ids.push_back(id.get<Index>());
    return r;
}

inline std::string csv_header(const RunConfig& config) {
    return "# kbal " + std::string(version) + "\n# config: " + config_json_line(config) + "\n";
}

inline std::string csv_number(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return format_double(v);
}

/// weights.csv: one row per input unit; trimmed units get weight 0.
inline std::string weights_csv(const Vector& unit_weights, const IndexList& kept_ids, Index n_input, const RunConfig& config) {
    Vector w = Vector::Zero(n_input);
    for (std::size_t k = 0; k < kept_ids.size(); ++k) w(kept_ids[k]) = unit_weights(static_cast<Index>(k));
    std::string out = csv_header(config) + "unit_id,weight\n";
    for (Index i = 0; i < n_input; ++i) out += std::to_string(i) + "," + csv_number(w(i)) + "\n";
    return out;
}

inline std::string rgrid_csv(const std::vector<RGridEntry>& grid, const RunConfig& config) {
    std::string out = csv_header(config) + "r,l1,feasible,iterations\n";
    for (const auto& e : grid)
        out += std::to_string(e.r) + "," + csv_number(e.l1) + "," + (e.feasible ? "1" : "0") + "," + std::to_string(e.iterations) + "\n";
    return out;
}

inline std::string study_json(const StudyReport& s, const RunConfig& config) {
    JsonWriter j;
    j.begin_object();
    j.key("config");
    write_config(j, config);
    j.key("study").value(to_string(s.study));
    j.key("replications").value(s.replications);
    j.key("seed").value(s.seed);
    j.key("n").value(static_cast<std::int64_t>(s.n));
    j.key("failures").begin_array();
    for (const auto& f : s.failures) j.value(f);
    j.end_array();
    j.key("summary").begin_array();
    for (const auto& r : s.rows) {
        if (r.rep >= 0 || r.index >= 0) continue;
        j.begin_object().key("method").value(r.method).key("metric").value(r.metric).key("statistic").value(r.statistic);
        j.key("value").value(r.value).end_object();
    }
    j.end_array();
    j.key("version").value(version);
    j.end_object();
    return j.str();
}

inline std::string study_csv(const StudyReport& s, const RunConfig& config) {
    std::string out = csv_header(config) + "study,method,metric,statistic,rep,index,value\n";
    const std::string name(to_string(s.study));
    for (const auto& r : s.rows)
        out += name + "," + r.method + "," + r.metric + "," + r.statistic + "," + (r.rep < 0 ? "" : std::to_string(r.rep)) + "," +
               (r.index < 0 ? "" : std::to_string(r.index)) + "," + csv_number(r.value) + "\n";
    return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw Error("failed writing '" + path.string() + "'");
}

}  // namespace kbal
