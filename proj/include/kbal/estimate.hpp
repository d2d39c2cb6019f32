#pragma once

#include "kbal/balance.hpp"
#include "kbal/common.hpp"
#include "kbal/dataset.hpp"
#include "kbal/kernel.hpp"
#include "kbal/spectral.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <random>

namespace kbal {

namespace detail {

inline void check_estimation_inputs(const Vector& Y, const std::vector<int>& D, const Vector& w) {
    if (Y.size() != static_cast<Index>(D.size()) || w.size() != Y.size())
        throw Error("outcome, treatment and weights must have one entry per unit");
    if (!Y.allFinite()) throw Error("outcome contains non-finite values");
    if (!w.allFinite() || (w.array() < 0.0).any()) throw Error("weights must be finite and non-negative");
}

inline double weighted_group_mean(const Vector& Y, const std::vector<int>& D, const Vector& w, int group) {
    double s = 0.0, m = 0.0;
    for (std::size_t i = 0; i < D.size(); ++i)
        if (D[i] == group) {
            s += w(static_cast<Index>(i)) * Y(static_cast<Index>(i));
            m += w(static_cast<Index>(i));
        }
    if (m <= 0.0) throw Error("group has no weight");
    return s / m;
}

// n/(n-1) * sum_i w_i^2 (Y_i - mu_w)^2 over one group; reduces to s^2/n
// when the weights are uniform.
inline double weighted_mean_variance(const Vector& Y, const std::vector<int>& D, const Vector& w, int group) {
    const double mu = weighted_group_mean(Y, D, w, group);
    double acc = 0.0, total = 0.0;
    Index n = 0;
    for (std::size_t i = 0; i < D.size(); ++i)
        if (D[i] == group) {
            const double wi = w(static_cast<Index>(i));
            acc += wi * wi * (Y(static_cast<Index>(i)) - mu) * (Y(static_cast<Index>(i)) - mu);
            total += wi;
            ++n;
        }
    if (n < 2) throw Error("fixed-weight standard error needs at least 2 units per group");
    return acc / (total * total) * static_cast<double>(n) / static_cast<double>(n - 1);
}

}  // namespace detail

/// Weighted difference in means. `unit_weights` has one entry per unit and
/// sums to 1 within each group; for att the treated entries are ignored and
/// the plain treated mean is used (and symmetrically for atc).
inline double weighted_dim(const Vector& Y, const std::vector<int>& D, const Vector& unit_weights, Estimand estimand) {
    detail::check_estimation_inputs(Y, D, unit_weights);
    const Vector uniform = Vector::Ones(Y.size());
    const Vector& wt = estimand == Estimand::att ? uniform : unit_weights;
    const Vector& wc = estimand == Estimand::atc ? uniform : unit_weights;
    return detail::weighted_group_mean(Y, D, wt, 1) - detail::weighted_group_mean(Y, D, wc, 0);
}

/// "Fixed" weight standard error: the weights are treated as known.
inline double fixed_weight_se(const Vector& Y, const std::vector<int>& D, const Vector& unit_weights, Estimand estimand) {
    detail::check_estimation_inputs(Y, D, unit_weights);
    const Vector uniform = Vector::Ones(Y.size());
    const Vector& wt = estimand == Estimand::att ? uniform : unit_weights;
    const Vector& wc = estimand == Estimand::atc ? uniform : unit_weights;
    return std::sqrt(detail::weighted_mean_variance(Y, D, wt, 1) + detail::weighted_mean_variance(Y, D, wc, 0));
}

/// Smallest number of units whose largest weights hold 90% of the total.
inline Index min90(const Vector& w) {
    if (w.size() == 0) throw Error("min90: empty weight vector");
    std::vector<double> sorted(w.data(), w.data() + w.size());
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    const double goal = 0.9 * w.sum();
    double acc = 0.0;
    for (std::size_t k = 0; k < sorted.size(); ++k) {
        acc += sorted[k];
        if (acc >= goal * (1.0 - 1e-12)) return static_cast<Index>(k + 1);
    }
    return w.size();
}

/// max_j |p_treated(x_j) / p_control,w(x_j) - 1| with the controls weighted
/// by the att solution. Zero when the weighted densities coincide.
inline double ipw_equivalence_diagnostic(const KernelMatrix& km, const Vector& control_weights) {
    const Vector pt = density_at_points(km, std::nullopt, Group::treated);
    const Vector pc = density_at_points(km, control_weights, Group::control);
    if ((pc.array() <= 0.0).any()) throw Error("ipw_equivalence_diagnostic: zero weighted control density");
    return (pt.array() / pc.array() - 1.0).abs().maxCoeff();
}

struct PipelineConfig {
    Estimand estimand = Estimand::att;
    KernelConfig kernel;
    std::optional<double> trimratio;
    ScanOptions scan;
};

struct PipelineResult {
    Dataset data;        // after trimming, original units
    Dataset scaled;      // standardized (and whitened) covariates used for K
    IndexList trimmed;   // row indices into the input dataset
    KernelMatrix km;
    SpectralBasis basis;
    BalanceSolution solution;
};

/// standardize -> (whiten) -> kernel -> (trim) -> eigendecompose -> scan_r.
inline PipelineResult run_pipeline(const Dataset& input, const PipelineConfig& config) {
    input.validate();
    PipelineResult out;
    auto [scaled, scaling] = standardize(input);
    if (config.kernel.distance == Distance::mahalanobis) scaled = whiten_mahalanobis(scaled).first;
    out.km = build_kernel_matrix(scaled, config.kernel);
    out.data = input;
    out.scaled = std::move(scaled);

    if (config.trimratio) {
        const IndexList trimmed = trim_treated(out.km, *config.trimratio);
        if (!trimmed.empty()) {
            IndexList keep;
            std::size_t t = 0;
            for (Index i = 0; i < input.n(); ++i) {
                if (t < trimmed.size() && trimmed[t] == i) {
                    ++t;
                    continue;
                }
                keep.push_back(i);
            }
            // Kernel entries of the kept units are unchanged, so the trimmed
            // kernel is the corresponding submatrix of K.
            KernelMatrix sub;
            sub.config = out.km.config;
            sub.K.resize(static_cast<Index>(keep.size()), static_cast<Index>(keep.size()));
            for (std::size_t a = 0; a < keep.size(); ++a)
                for (std::size_t b = 0; b < keep.size(); ++b) sub.K(static_cast<Index>(a), static_cast<Index>(b)) = out.km.K(keep[a], keep[b]);
            out.data = input.subset(keep);
            out.scaled = out.scaled.subset(keep);
            sub.treated_rows = out.data.treated_rows();
            sub.control_rows = out.data.control_rows();
            out.km = std::move(sub);
            out.trimmed = trimmed;
        }
    }
    out.basis = eigendecompose(out.km);
    out.solution = scan_r(out.km, out.basis, config.estimand, config.scan);
    return out;
}

struct EstimateReport {
    Estimand estimand = Estimand::att;
    std::optional<double> point;
    std::optional<double> se_fixed;
    std::optional<std::pair<double, double>> ci_boot;
    Index min90 = 0;
    double l1_before = 0.0;
    double l1_after = 0.0;
    Index r = 0;
    double variance_explained = 0.0;
    std::optional<double> ipw_max_dev;  // att only
    Index n_trimmed = 0;
    IndexList trimmed_ids;
};

inline EstimateReport make_report(const PipelineResult& res) {
    const BalanceSolution& sol = res.solution;
    EstimateReport rep;
    rep.estimand = sol.estimand;
    rep.l1_before = sol.l1_before;
    rep.l1_after = sol.l1_after;
    rep.r = sol.r;
    rep.variance_explained = variance_explained(res.basis, sol.r);
    // ate reports concentration of the control weights.
    rep.min90 = sol.estimand == Estimand::ate ? min90(select(sol.unit_weights, res.km.control_rows)) : min90(sol.weights);
    if (sol.estimand == Estimand::att) rep.ipw_max_dev = ipw_equivalence_diagnostic(res.km, sol.weights);
    rep.n_trimmed = static_cast<Index>(res.trimmed.size());
    rep.trimmed_ids = res.trimmed;
    if (res.data.Y) {
        rep.point = weighted_dim(*res.data.Y, res.data.D, sol.unit_weights, sol.estimand);
        rep.se_fixed = fixed_weight_se(*res.data.Y, res.data.D, sol.unit_weights, sol.estimand);
    }
    return rep;
}

struct BootstrapResult {
    double se = 0.0;
    std::pair<double, double> ci95{0.0, 0.0};
    Index n_infeasible = 0;  // replicates that produced no estimate
    std::vector<double> estimates;  // feasible replicates, in replicate order
};

namespace detail {

// Linear-interpolation quantile of a sorted sample.
inline double quantile_sorted(const std::vector<double>& s, double q) {
    const double pos = q * static_cast<double>(s.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, s.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return s[lo] + frac * (s[hi] - s[lo]);
}

}  // namespace detail

/// Resamples units with replacement within each treatment arm and reruns the
/// whole pipeline per replicate. Replicate b draws from a generator seeded by
/// (seed, b), so results do not depend on thread count.
inline BootstrapResult bootstrap(const Dataset& ds, const PipelineConfig& config, int B, std::uint64_t seed, unsigned threads = 1) {
    if (B < 1) throw Error("bootstrap: B must be >= 1");
    if (!ds.Y) throw Error("bootstrap: outcome is required");
    const IndexList treated = ds.treated_rows();
    const IndexList control = ds.control_rows();

    std::vector<std::optional<double>> draws(static_cast<std::size_t>(B));
    parallel_for(static_cast<std::size_t>(B), threads, [&](std::size_t b) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(b),
                          0x6b62u};
        std::mt19937_64 rng(seq);
        IndexList rows;
        rows.reserve(static_cast<std::size_t>(ds.n()));
        for (const IndexList* arm : {&treated, &control}) {
            std::uniform_int_distribution<std::size_t> pick(0, arm->size() - 1);
            for (std::size_t k = 0; k < arm->size(); ++k) rows.push_back((*arm)[pick(rng)]);
        }
        try {
            const PipelineResult res = run_pipeline(ds.subset(rows), config);
            draws[b] = weighted_dim(*res.data.Y, res.data.D, res.solution.unit_weights, config.estimand);
        } catch (const Error&) {
            // e.g. no feasible r, or a covariate that is constant in this resample
            draws[b] = std::nullopt;
        }
    });

    BootstrapResult out;
    for (const auto& d : draws) {
        if (d) out.estimates.push_back(*d);
        else ++out.n_infeasible;
    }
    if (static_cast<double>(out.n_infeasible) > 0.2 * B)
        throw InfeasibleError("bootstrap: " + std::to_string(out.n_infeasible) + " of " + std::to_string(B) +
                              " replicates had no feasible solution; try a larger b or trimming");
    const auto n = static_cast<double>(out.estimates.size());
    double mean = 0.0;
    for (double e : out.estimates) mean += e;
    mean /= n;
    double ss = 0.0;
    for (double e : out.estimates) ss += (e - mean) * (e - mean);
    out.se = out.estimates.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    std::vector<double> sorted = out.estimates;
    std::sort(sorted.begin(), sorted.end());
    out.ci95 = {detail::quantile_sorted(sorted, 0.025), detail::quantile_sorted(sorted, 0.975)};
    return out;
}

}  // namespace kbal
