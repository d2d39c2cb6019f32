#pragma once

#include "kbal/balance.hpp"
#include "kbal/baselines.hpp"
#include "kbal/common.hpp"
#include "kbal/dataset.hpp"
#include "kbal/estimate.hpp"

#include <cstdint>
#include <random>

namespace kbal {

/// One simulated sample. `hidden` holds a diagnostic function of the data
/// that never enters any balancing input.
struct SimDraw {
    Dataset data;
    Vector hidden;
    std::string hidden_name;
    std::optional<Vector> y0, y1;  // potential outcomes when the DGP has them
};

/// Generator for replicate `rep` of a study seeded with `seed`.
inline std::mt19937_64 substream(std::uint64_t seed, std::uint64_t rep) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(rep),
                      static_cast<std::uint32_t>(rep >> 32), 0x73696du};
    return std::mt19937_64(seq);
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

namespace detail {

inline void require_both_groups(const std::vector<int>& D, const char* who) {
    const auto n1 = std::count(D.begin(), D.end(), 1);
    if (n1 == 0 || n1 == static_cast<long>(D.size()))
        throw Error(std::string(who) + ": draw has an empty treatment group; use a larger n");
}

}  // namespace detail

/// Peacekeeping example: treatment depends on the unobserved intensity, and
/// the outcome depends on intensity only, so the true effect is zero.
/// Covariates: war_duration, fatalities (= intensity * duration), democracy,
/// factionalism.
inline SimDraw dgp_peacekeeping(Index n, std::uint64_t seed) {
    if (n < 50) throw Error("dgp_peacekeeping: n must be >= 50");
    auto rng = substream(seed, 0);
    std::normal_distribution<double> duration_dist(7.0, 3.0);
    std::uniform_real_distribution<double> intensity_dist(100.0, 10000.0);
    std::normal_distribution<double> std_normal(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, std::sqrt(0.004));
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    SimDraw s;
    s.data.X.resize(n, 4);
    s.data.D.resize(static_cast<std::size_t>(n));
    s.data.column_names = {"war_duration", "fatalities", "democracy", "factionalism"};
    s.hidden.resize(n);
    s.hidden_name = "intensity";
    Vector y(n);
    for (Index i = 0; i < n; ++i) {
        const double duration = std::max(1.0, duration_dist(rng));
        const double intensity = intensity_dist(rng);
        s.data.X(i, 0) = duration;
        s.data.X(i, 1) = intensity * duration;
        s.data.X(i, 2) = std_normal(rng);
        s.data.X(i, 3) = std_normal(rng);
        s.data.D[static_cast<std::size_t>(i)] = unif(rng) < logistic(intensity / 5000.0 - 2.0) ? 1 : 0;
        y(i) = intensity / 2500.0 + noise(rng);
        s.hidden(i) = intensity;
    }
    detail::require_both_groups(s.data.D, "dgp_peacekeeping");
    s.data.Y = y;
    s.y0 = y;
    s.y1 = y;
    return s;
}

/// One standard-normal covariate with P(D=1 | X) = 1 / (1 + exp(2 - 2X)).
inline SimDraw dgp_logistic_1d(Index n = 200, std::uint64_t seed = 1) {
    if (n < 2) throw Error("dgp_logistic_1d: n must be >= 2");
    auto rng = substream(seed, 0);
    std::normal_distribution<double> std_normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    SimDraw s;
    s.data.X.resize(n, 1);
    s.data.D.resize(static_cast<std::size_t>(n));
    s.data.column_names = {"x"};
    s.hidden = Vector::Zero(n);
    for (Index i = 0; i < n; ++i) {
        const double x = std_normal(rng);
        s.data.X(i, 0) = x;
        s.data.D[static_cast<std::size_t>(i)] = unif(rng) < 1.0 / (1.0 + std::exp(2.0 - 2.0 * x)) ? 1 : 0;
    }
    detail::require_both_groups(s.data.D, "dgp_logistic_1d");
    return s;
}

/// Five standard-normal covariates; treatment depends on the hidden radius
/// z = sqrt(x1^2 + x2^2) through logit^-1(z - 2).
inline SimDraw dgp_z5(Index n = 500, std::uint64_t seed = 1) {
    if (n < 2) throw Error("dgp_z5: n must be >= 2");
    auto rng = substream(seed, 0);
    std::normal_distribution<double> std_normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    SimDraw s;
    s.data.X.resize(n, 5);
    s.data.D.resize(static_cast<std::size_t>(n));
    s.data.column_names = {"x1", "x2", "x3", "x4", "x5"};
    s.hidden.resize(n);
    s.hidden_name = "z";
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < 5; ++j) s.data.X(i, j) = std_normal(rng);
        const double z = std::hypot(s.data.X(i, 0), s.data.X(i, 1));
        s.hidden(i) = z;
        s.data.D[static_cast<std::size_t>(i)] = unif(rng) < logistic(z - 2.0) ? 1 : 0;
    }
    detail::require_both_groups(s.data.D, "dgp_z5");
    return s;
}

enum class Study { figure12, density_fig, rscan_fig };

inline std::string_view to_string(Study s) {
    switch (s) {
        case Study::figure12: return "figure12";
        case Study::density_fig: return "density_fig";
        case Study::rscan_fig: return "rscan_fig";
    }
    return "figure12";
}

inline Study parse_study(std::string_view s) {
    if (s == "figure12") return Study::figure12;
    if (s == "density_fig") return Study::density_fig;
    if (s == "rscan_fig") return Study::rscan_fig;
    throw Error("unknown study '" + std::string(s) + "' (expected figure12, density_fig or rscan_fig)");
}

/// One tidy output value. rep = -1 marks an aggregate over replications,
/// index = -1 a scalar (otherwise a grid position or observation index).
struct StudyRow {
    std::string method;
    std::string metric;
    std::string statistic;
    long rep = -1;
    long index = -1;
    double value = 0.0;
};

struct StudyConfig {
    Index n = 0;  // 0: the study's default sample size
    Index r_grid_max = 100;
    unsigned threads = 1;
    PipelineConfig pipeline;
};

struct StudyReport {
    Study study = Study::figure12;
    int replications = 0;
    std::uint64_t seed = 0;
    Index n = 0;
    std::vector<StudyRow> rows;
    std::vector<std::string> failures;  // "<method> rep <k>: <reason>"

    /// First aggregate row with the given labels.
    std::optional<double> find(std::string_view method, std::string_view metric, std::string_view statistic) const {
        for (const auto& r : rows)
            if (r.rep < 0 && r.index < 0 && r.method == method && r.metric == metric && r.statistic == statistic) return r.value;
        return std::nullopt;
    }
};

namespace detail {

struct MethodDraw {
    std::optional<double> estimate;
    Vector abs_std_diff;  // covariates then the hidden column
};

inline void summarize(const std::string& method, const std::string& metric, const std::vector<double>& xs, double truth,
                      std::vector<StudyRow>& rows) {
    if (xs.empty()) return;
    const double n = static_cast<double>(xs.size());
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= n;
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    rows.push_back({method, metric, "mean", -1, -1, mean});
    rows.push_back({method, metric, "sd", -1, -1, xs.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0});
    rows.push_back({method, metric, "n", -1, -1, n});
    if (!std::isnan(truth)) rows.push_back({method, metric, "bias", -1, -1, mean - truth});
}

inline Vector abs_std_diffs(const SimDraw& draw, const Vector& unit_weights) {
    const Index p = draw.data.p();
    Vector out(p + 1);
    for (Index j = 0; j < p; ++j) out(j) = std::abs(standardized_difference(draw.data.X.col(j), draw.data.D, unit_weights));
    out(p) = std::abs(standardized_difference(draw.hidden, draw.data.D, unit_weights));
    return out;
}

inline StudyReport run_figure12(int reps, std::uint64_t seed, const StudyConfig& config) {
    const Index n = config.n > 0 ? config.n : 500;
    const std::vector<std::string> methods = {"raw", "matching", "matching+", "mean_balance", "kbal"};
    std::vector<std::vector<MethodDraw>> draws(static_cast<std::size_t>(reps));
    std::vector<std::vector<std::string>> failures(static_cast<std::size_t>(reps));
    std::vector<std::string> names;

    parallel_for(static_cast<std::size_t>(reps), config.threads, [&](std::size_t rep) {
        const SimDraw draw = dgp_peacekeeping(n, seed * 1000003u + rep);
        auto& out = draws[rep];
        out.resize(methods.size());
        for (std::size_t m = 0; m < methods.size(); ++m) {
            try {
                Vector w;
                if (methods[m] == "raw") w = raw_dim(draw.data).unit_weights.value();
                else if (methods[m] == "matching") w = mahalanobis_match(draw.data).unit_weights.value();
                else if (methods[m] == "matching+")
                    w = mahalanobis_match(draw.data, Expansion::squares_and_interactions).unit_weights.value();
                else if (methods[m] == "mean_balance") w = mean_balance_x(draw.data, Estimand::att).unit_weights.value();
                else w = run_pipeline(draw.data, config.pipeline).solution.unit_weights;
                out[m].estimate = weighted_dim(*draw.data.Y, draw.data.D, w, Estimand::att);
                out[m].abs_std_diff = abs_std_diffs(draw, w);
            } catch (const Error& e) {
                failures[rep].push_back(methods[m] + " rep " + std::to_string(rep) + ": " + e.what());
            }
        }
    });

    StudyReport report;
    report.study = Study::figure12;
    report.replications = reps;
    report.seed = seed;
    report.n = n;
    const std::vector<std::string> covariates = {"war_duration", "fatalities", "democracy", "factionalism", "intensity"};
    for (std::size_t m = 0; m < methods.size(); ++m) {
        std::vector<double> est;
        std::vector<std::vector<double>> diffs(covariates.size());
        for (int rep = 0; rep < reps; ++rep) {
            const auto& d = draws[static_cast<std::size_t>(rep)][m];
            if (!d.estimate) continue;
            est.push_back(*d.estimate);
            for (std::size_t j = 0; j < covariates.size(); ++j) diffs[j].push_back(d.abs_std_diff(static_cast<Index>(j)));
        }
        summarize(methods[m], "att", est, 0.0, report.rows);
        for (std::size_t j = 0; j < covariates.size(); ++j)
            summarize(methods[m], "abs_std_diff:" + covariates[j], diffs[j], std::nan(""), report.rows);
    }
    for (const auto& f : failures) report.failures.insert(report.failures.end(), f.begin(), f.end());
    return report;
}

inline StudyReport run_density_fig(int reps, std::uint64_t seed, const StudyConfig& config) {
    const Index n = config.n > 0 ? config.n : 200;
    StudyReport report;
    report.study = Study::density_fig;
    report.replications = reps;
    report.seed = seed;
    report.n = n;
    for (int rep = 0; rep < reps; ++rep) {
        const SimDraw draw = dgp_logistic_1d(n, seed * 1000003u + static_cast<std::uint64_t>(rep));
        try {
            const PipelineResult res = run_pipeline(draw.data, config.pipeline);
            const Vector pt = density_at_points(res.km, std::nullopt, Group::treated);
            const Vector pc0 = density_at_points(res.km, std::nullopt, Group::control);
            const Vector pc1 = density_at_points(res.km, res.solution.weights, Group::control);
            for (Index i = 0; i < n; ++i) {
                report.rows.push_back({"data", "x", "value", rep, static_cast<long>(i), draw.data.X(i, 0)});
                report.rows.push_back({"data", "treated", "value", rep, static_cast<long>(i), static_cast<double>(draw.data.D[static_cast<std::size_t>(i)])});
                report.rows.push_back({"treated", "density", "value", rep, static_cast<long>(i), pt(i)});
                report.rows.push_back({"control_unweighted", "density", "value", rep, static_cast<long>(i), pc0(i)});
                report.rows.push_back({"control_weighted", "density", "value", rep, static_cast<long>(i), pc1(i)});
            }
            report.rows.push_back({"kbal", "r", "value", rep, -1, static_cast<double>(res.solution.r)});
            report.rows.push_back({"kbal", "l1_before", "value", rep, -1, res.solution.l1_before});
            report.rows.push_back({"kbal", "l1_after", "value", rep, -1, res.solution.l1_after});
            report.rows.push_back({"kbal", "max_abs_density_gap_before", "value", rep, -1, (pt - pc0).cwiseAbs().maxCoeff()});
            report.rows.push_back({"kbal", "max_abs_density_gap_after", "value", rep, -1, (pt - pc1).cwiseAbs().maxCoeff()});
        } catch (const Error& e) {
            report.failures.push_back("kbal rep " + std::to_string(rep) + ": " + e.what());
        }
    }
    return report;
}

}  // namespace detail

/// Balance on every r in [1, r_max] (no early stop) for one dgp_z5 draw.
struct RScanGrid {
    std::vector<Index> r;
    std::vector<double> l1;           // +inf when infeasible
    std::vector<double> z_imbalance;  // |std diff| on z, +inf when infeasible
    Index argmin_r = 0;               // smallest r attaining the least L1
    double z_at_argmin = 0.0;
    double z_min = 0.0;
};

inline RScanGrid rscan_grid(const SimDraw& draw, const PipelineConfig& config, Index r_max) {
    auto [scaled, scaling] = standardize(draw.data);
    const KernelMatrix km = build_kernel_matrix(scaled, config.kernel);
    const SpectralBasis basis = eigendecompose(km);
    const Index top = std::min(r_max, basis.numerical_rank());
    const std::vector<int> D = draw.data.D;
    const Matrix scores = detail::scan_scores(basis, top);
    RScanGrid g;
    double best = std::numeric_limits<double>::infinity();
    g.z_min = std::numeric_limits<double>::infinity();
    for (Index r = 1; r <= top; ++r) {
        const auto attempt = detail::solve_at_rank(km, D, scores.leftCols(r), config.estimand, config.scan.solver);
        const double inf = std::numeric_limits<double>::infinity();
        const double l1 = attempt.feasible ? l1_imbalance(km, attempt.unit_weights, config.estimand) : inf;
        const double z = attempt.feasible ? std::abs(standardized_difference(draw.hidden, D, attempt.unit_weights)) : inf;
        g.r.push_back(r);
        g.l1.push_back(l1);
        g.z_imbalance.push_back(z);
        if (l1 < best) {
            best = l1;
            g.argmin_r = r;
            g.z_at_argmin = z;
        }
        g.z_min = std::min(g.z_min, z);
    }
    if (g.argmin_r == 0) throw InfeasibleError("rscan: no feasible r");
    return g;
}

namespace detail {

inline StudyReport run_rscan_fig(int reps, std::uint64_t seed, const StudyConfig& config) {
    const Index n = config.n > 0 ? config.n : 500;
    StudyReport report;
    report.study = Study::rscan_fig;
    report.replications = reps;
    report.seed = seed;
    report.n = n;
    std::vector<std::optional<RScanGrid>> grids(static_cast<std::size_t>(reps));
    std::vector<std::string> errors(static_cast<std::size_t>(reps));
    parallel_for(static_cast<std::size_t>(reps), config.threads, [&](std::size_t rep) {
        try {
            grids[rep] = rscan_grid(dgp_z5(n, seed * 1000003u + rep), config.pipeline, config.r_grid_max);
        } catch (const Error& e) {
            errors[rep] = e.what();
        }
    });
    std::vector<double> at_argmin, minima, ratio, chosen;
    for (int rep = 0; rep < reps; ++rep) {
        const auto& g = grids[static_cast<std::size_t>(rep)];
        if (!g) {
            report.failures.push_back("kbal rep " + std::to_string(rep) + ": " + errors[static_cast<std::size_t>(rep)]);
            continue;
        }
        for (std::size_t k = 0; k < g->r.size(); ++k) {
            report.rows.push_back({"kbal", "l1", "value", rep, static_cast<long>(g->r[k]), g->l1[k]});
            report.rows.push_back({"kbal", "abs_std_diff:z", "value", rep, static_cast<long>(g->r[k]), g->z_imbalance[k]});
        }
        report.rows.push_back({"kbal", "argmin_r", "value", rep, -1, static_cast<double>(g->argmin_r)});
        at_argmin.push_back(g->z_at_argmin);
        minima.push_back(g->z_min);
        ratio.push_back(g->z_min > 0.0 ? g->z_at_argmin / g->z_min : 1.0);
        chosen.push_back(static_cast<double>(g->argmin_r));
    }
    summarize("kbal", "argmin_r", chosen, std::nan(""), report.rows);
    summarize("kbal", "abs_std_diff:z_at_argmin", at_argmin, std::nan(""), report.rows);
    summarize("kbal", "abs_std_diff:z_grid_min", minima, std::nan(""), report.rows);
    summarize("kbal", "z_ratio_argmin_to_min", ratio, std::nan(""), report.rows);
    return report;
}

}  // namespace detail

/// Runs one of the simulation studies. Replicate k uses the dataset seed
/// seed * 1000003 + k, so any replicate can be regenerated on its own.
inline StudyReport run_study(Study study, int reps, std::uint64_t seed, const StudyConfig& config = {}) {
    if (reps < 1) throw Error("run_study: reps must be >= 1");
    switch (study) {
        case Study::figure12: return detail::run_figure12(reps, seed, config);
        case Study::density_fig: return detail::run_density_fig(reps, seed, config);
        case Study::rscan_fig: return detail::run_rscan_fig(reps, seed, config);
    }
    throw Error("run_study: unknown study");
}

}  // namespace kbal
