#include "kbal/kbal.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using namespace kbal;

namespace {

struct Options {
    RunConfig run;
    std::string estimand = "att";
    std::string distance = "euclidean";
    std::string expansion = "none";
    std::string out = ".";
    std::string cache_dir;
    std::string data_dir = default_data_dir().string();
    unsigned threads = 1;
    Index n = 0;
    bool offline = false;
};

fs::path default_cache_dir() {
    if (const char* c = std::getenv("KBAL_CACHE_DIR")) return c;
    if (const char* x = std::getenv("XDG_CACHE_HOME")) return fs::path(x) / "kbal";
    if (const char* h = std::getenv("HOME")) return fs::path(h) / ".cache" / "kbal";
    return ".kbal-cache";
}

FetchOptions fetch_options(const Options& o) {
    FetchOptions f;
    f.data_dir = o.data_dir;
    f.allow_network = !o.offline;
    return f;
}

fs::path cache_dir(const Options& o) { return o.cache_dir.empty() ? default_cache_dir() : fs::path(o.cache_dir); }

Dataset load_input(const Options& o) {
    const RunConfig& c = o.run;
    if (c.input && c.benchmark) throw CLI::ValidationError("--input and --benchmark are mutually exclusive");
    if (c.benchmark) {
        if (*c.benchmark != "lalonde") throw CLI::ValidationError("--benchmark", "only 'lalonde' is available");
        return lalonde(cache_dir(o), parse_covariate_set(c.covariate_set), fetch_options(o));
    }
    if (!c.input) throw CLI::ValidationError("one of --input or --benchmark is required");
    return load_csv(*c.input, c.treatment_col, c.outcome_col);
}

void add_data_flags(CLI::App* cmd, Options& o) {
    cmd->add_option("--input", o.run.input, "CSV file with a header row");
    cmd->add_option("--benchmark", o.run.benchmark, "Bundled benchmark (lalonde)");
    cmd->add_option("--covariate-set", o.run.covariate_set, "Benchmark covariates: standard, simple or squares")
        ->check(CLI::IsMember({"standard", "simple", "squares"}));
    cmd->add_option("--treatment-col", o.run.treatment_col, "Treatment column (0/1)");
    cmd->add_option("--outcome-col", o.run.outcome_col, "Outcome column");
    cmd->add_option("--cache-dir", o.cache_dir, "Benchmark cache directory");
    cmd->add_option("--data-dir", o.data_dir, "Directory holding the benchmark manifest");
    cmd->add_flag("--offline", o.offline, "Never touch the network");
}

void add_balance_flags(CLI::App* cmd, Options& o) {
    cmd->add_option("--estimand", o.estimand, "att, atc or ate")->check(CLI::IsMember({"att", "atc", "ate"}));
    cmd->add_option("--b", o.run.b, "Kernel scale (default: number of covariates)")->check(CLI::PositiveNumber);
    cmd->add_option("--distance", o.distance, "euclidean or mahalanobis")->check(CLI::IsMember({"euclidean", "mahalanobis"}));
    cmd->add_option("--trimratio", o.run.trimratio, "Trim treated units above this density ratio")->check(CLI::PositiveNumber);
    cmd->add_option("--r-max", o.run.r_max, "Largest r scanned")->check(CLI::PositiveNumber);
    cmd->add_option("--patience", o.run.patience, "Stop after this many r without improvement")->check(CLI::PositiveNumber);
    cmd->add_option("--tol", o.run.tol, "Balance tolerance")->check(CLI::PositiveNumber);
}

void add_output_flags(CLI::App* cmd, Options& o) {
    cmd->add_option("--out", o.out, "Output directory");
    cmd->add_option("--threads", o.threads, "Worker threads")->check(CLI::PositiveNumber);
}

void finish_config(Options& o, const std::string& command) {
    o.run.command = command;
    o.run.estimand = parse_estimand(o.estimand);
    o.run.distance = parse_distance(o.distance);
    fs::create_directories(o.out);
}

IndexList kept_rows(Index n, const IndexList& trimmed) {
    IndexList keep;
    std::size_t t = 0;
    for (Index i = 0; i < n; ++i) {
        if (t < trimmed.size() && trimmed[t] == i) {
            ++t;
            continue;
        }
        keep.push_back(i);
    }
    return keep;
}

int run_balance(Options& o, bool estimate) {
    finish_config(o, estimate ? "estimate" : "weights");
    const Dataset ds = load_input(o);
    if (estimate && !ds.Y) throw CLI::ValidationError("estimate needs an outcome: pass --outcome-col");
    if (!o.run.b) o.run.b = static_cast<double>(ds.p());
    const PipelineConfig config = o.run.pipeline();
    const PipelineResult res = run_pipeline(ds, config);
    EstimateReport rep = make_report(res);
    if (estimate && o.run.bootstrap > 0) {
        const BootstrapResult boot = bootstrap(ds, config, o.run.bootstrap, o.run.seed, o.threads);
        rep.ci_boot = boot.ci95;
        if (boot.n_infeasible > 0) std::cerr << "bootstrap: " << boot.n_infeasible << " replicates dropped\n";
    }
    const fs::path out = o.out;
    write_text(out / "weights.csv", weights_csv(res.solution.unit_weights, kept_rows(ds.n(), res.trimmed), ds.n(), o.run));
    write_text(out / "rgrid.csv", rgrid_csv(res.solution.feasible_r_grid, o.run));
    write_text(out / "report.json", report_json(rep, o.run, estimate && ds.Y.has_value()));
    std::cout << "r=" << rep.r << " l1_before=" << rep.l1_before << " l1_after=" << rep.l1_after << " min90=" << rep.min90;
    if (estimate && rep.point) std::cout << " estimate=" << *rep.point << " se=" << *rep.se_fixed;
    std::cout << "\n";
    return 0;
}

int run_simulate(Options& o) {
    finish_config(o, "simulate");
    if (!o.run.study) throw CLI::ValidationError("--study", "required");
    const Study study = parse_study(*o.run.study);
    StudyConfig sc;
    sc.n = o.n;
    sc.threads = o.threads;
    sc.pipeline = o.run.pipeline();
    const StudyReport rep = run_study(study, o.run.reps, o.run.seed, sc);
    const fs::path out = o.out;
    const std::string stem = std::string(to_string(study));
    write_text(out / (stem + ".json"), study_json(rep, o.run));
    write_text(out / (stem + ".csv"), study_csv(rep, o.run));
    std::cout << stem << ": " << rep.replications << " replications, " << rep.failures.size() << " failures\n";
    return 0;
}

int run_fetch(Options& o) {
    const FetchOptions f = fetch_options(o);
    for (const char* name : {"nsw_dw", "psid1"}) {
        const auto path = ensure_benchmark_file(name, cache_dir(o), f);
        std::cout << path.string() << "\n";
    }
    return 0;
}

int run_baselines(Options& o) {
    finish_config(o, "baselines");
    const Dataset ds = load_input(o);
    const Expansion expansion = parse_expansion(o.expansion);
    std::vector<BaselineResult> results;
    std::vector<std::string> skipped;
    results.push_back(raw_dim(ds));
    try {
        results.push_back(mean_balance_x(ds, o.run.estimand, expansion));
    } catch (const InfeasibleError& e) {
        skipped.push_back(std::string("mean_balance_x: ") + e.what());
    }
    if (o.run.estimand == Estimand::att) results.push_back(mahalanobis_match(ds, expansion));
    if (ds.Y) results.push_back(least_squares(ds, expansion));

    JsonWriter j;
    j.begin_object();
    j.key("config");
    write_config(j, o.run);
    j.key("expansion").value(to_string(expansion));
    j.key("results").begin_array();
    for (const auto& r : results) {
        j.begin_object().key("method").value(r.method).key("point").value(r.point);
        j.key("dropped_columns").begin_array();
        for (const auto& d : r.dropped_columns) j.value(d);
        j.end_array().end_object();
    }
    j.end_array();
    j.key("skipped").begin_array();
    for (const auto& s : skipped) j.value(s);
    j.end_array();
    j.key("version").value(version);
    j.end_object();
    const fs::path out = o.out;
    write_text(out / "baselines.json", j.str());
    std::ostringstream csv;
    csv << csv_header(o.run);
    write_balance_csv(results, csv);
    write_text(out / "balance.csv", csv.str());
    for (const auto& r : results) std::cout << r.method << ": " << (r.point ? format_double(*r.point) : "n/a") << "\n";
    for (const auto& s : skipped) std::cerr << s << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Kernel balancing weights and treatment effect estimates"};
    app.set_version_flag("--version", std::string(version));
    app.require_subcommand(1);
    Options o;

    auto* weights = app.add_subcommand("weights", "Compute balancing weights");
    add_data_flags(weights, o);
    add_balance_flags(weights, o);
    add_output_flags(weights, o);

    auto* estimate = app.add_subcommand("estimate", "Weights plus a treatment effect estimate");
    add_data_flags(estimate, o);
    add_balance_flags(estimate, o);
    add_output_flags(estimate, o);
    estimate->add_option("--bootstrap", o.run.bootstrap, "Bootstrap replicates (0 = none)")->check(CLI::NonNegativeNumber);
    estimate->add_option("--seed", o.run.seed, "Random seed");

    auto* simulate = app.add_subcommand("simulate", "Run a simulation study");
    simulate->add_option("--study", o.run.study, "figure12, density_fig or rscan_fig")
        ->required()
        ->check(CLI::IsMember({"figure12", "density_fig", "rscan_fig"}));
    simulate->add_option("--reps", o.run.reps, "Replications")->required()->check(CLI::PositiveNumber);
    simulate->add_option("--seed", o.run.seed, "Random seed");
    simulate->add_option("--n", o.n, "Sample size per replication (default: the study's)");
    add_balance_flags(simulate, o);
    add_output_flags(simulate, o);

    auto* fetch = app.add_subcommand("fetch", "Download the benchmark data into the cache");
    fetch->add_option("--cache-dir", o.cache_dir, "Benchmark cache directory");
    fetch->add_option("--data-dir", o.data_dir, "Directory holding the benchmark manifest");
    fetch->add_flag("--offline", o.offline, "Use only the bundled copy");

    auto* baselines = app.add_subcommand("baselines", "Comparison estimators and balance tables");
    add_data_flags(baselines, o);
    add_output_flags(baselines, o);
    baselines->add_option("--estimand", o.estimand, "att, atc or ate")->check(CLI::IsMember({"att", "atc", "ate"}));
    baselines->add_option("--expansion", o.expansion, "none, squares or squares_and_interactions")
        ->check(CLI::IsMember({"none", "squares", "squares_and_interactions"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*weights) return run_balance(o, false);
        if (*estimate) return run_balance(o, true);
        if (*simulate) return run_simulate(o);
        if (*fetch) return run_fetch(o);
        if (*baselines) return run_baselines(o);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
