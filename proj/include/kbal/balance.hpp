#pragma once

#include "kbal/common.hpp"
#include "kbal/kernel.hpp"
#include "kbal/spectral.hpp"

#include <limits>
#include <numeric>
#include <optional>

namespace kbal {

/// Units that receive weights and the score means they must reproduce.
struct BalanceTarget {
    Estimand estimand = Estimand::att;
    IndexList donor_rows;
    Vector target_means;
};

struct SolverOptions {
    double tol = 1e-8;
    int max_iter = 200;
    int max_halvings = 30;
};

struct EntropySolution {
    Vector weights;
    Vector dual;
    bool converged = false;
    int iterations = 0;
    double max_abs_gap = std::numeric_limits<double>::infinity();
};

struct RGridEntry {
    Index r = 0;
    double l1 = std::numeric_limits<double>::infinity();  // +inf when infeasible
    bool feasible = false;
    int iterations = 0;
};

struct BalanceSolution {
    Estimand estimand = Estimand::att;
    /// Solved weights over donor_rows (controls for att, treated for atc).
    /// For ate this holds the weights of every unit and each group sums to 1.
    Vector weights;
    IndexList donor_rows;
    /// Length-N weights: each group sums to 1; the non-donor group is uniform.
    Vector unit_weights;
    Vector dual;  // ate: control dual followed by treated dual
    Index r = 0;
    double l1_before = 0.0;
    double l1_after = 0.0;
    bool converged = false;
    int iterations = 0;
    std::vector<RGridEntry> feasible_r_grid;
};

/// Balance targets on the score columns. att: controls reproduce the treated
/// means. atc: treated reproduce the control means. ate: two targets, controls
/// then treated, both reproducing the all-unit means.
inline std::vector<BalanceTarget> make_targets(const Matrix& scores, const std::vector<int>& D, Estimand estimand) {
    if (static_cast<Index>(D.size()) != scores.rows()) throw Error("make_targets: score rows do not align with treatment");
    const IndexList treated = rows_where(D, 1);
    const IndexList control = rows_where(D, 0);
    if (treated.empty() || control.empty()) throw Error("make_targets: empty donor set");
    auto mean_of = [&](const IndexList& rows) {
        Vector m = Vector::Zero(scores.cols());
        for (Index r : rows) m += scores.row(r).transpose();
        return Vector(m / static_cast<double>(rows.size()));
    };
    switch (estimand) {
        case Estimand::att: return {{estimand, control, mean_of(treated)}};
        case Estimand::atc: return {{estimand, treated, mean_of(control)}};
        case Estimand::ate: {
            const Vector grand = scores.colwise().mean().transpose();
            return {{estimand, control, grand}, {estimand, treated, grand}};
        }
    }
    throw Error("make_targets: unknown estimand");
}

namespace detail {

// exp(a_i - max a), with exponents clamped at -690. Far-out tails would
// otherwise produce subnormals, which are exact to ~1e-300 either way but
// slow every later product by orders of magnitude.
inline Eigen::ArrayXd shifted_exp(const Vector& a) { return (a.array() - a.maxCoeff()).max(-690.0).exp(); }

// log sum_i exp(a_i), stable.
inline double log_sum_exp(const Vector& a) { return a.maxCoeff() + std::log(shifted_exp(a).sum()); }

inline Vector softmax(const Vector& a) {
    const Eigen::ArrayXd w = shifted_exp(a);
    return (w / w.sum()).matrix();
}

}  // namespace detail

/// Minimum-KL (entropy balancing) weights on the donors whose weighted score
/// means equal `target`. Solves the convex dual
///   min_lambda log sum_i exp((z_i - target)^T lambda)
/// by Newton's method with step halving; weights are the softmax of the
/// tilted scores. A non-converged result signals an infeasible or
/// ill-conditioned target rather than throwing.
inline EntropySolution entropy_solve(const Matrix& donor_scores, const Vector& target, const SolverOptions& opt = {}) {
    const Index m = donor_scores.rows(), r = donor_scores.cols();
    if (m < 1) throw Error("entropy_solve: no donors");
    if (target.size() != r) throw Error("entropy_solve: target length does not match score columns");
    if (!target.allFinite()) throw Error("entropy_solve: non-finite target");

    const Matrix zc = donor_scores.rowwise() - target.transpose();
    EntropySolution sol;
    sol.dual = Vector::Zero(r);
    Vector tilt = Vector::Zero(m);
    double f = detail::log_sum_exp(tilt);

    for (int it = 0;; ++it) {
        sol.weights = detail::softmax(tilt);
        const Vector g = zc.transpose() * sol.weights;
        sol.max_abs_gap = r > 0 ? g.cwiseAbs().maxCoeff() : 0.0;
        sol.iterations = it;
        if (sol.max_abs_gap <= opt.tol) {
            sol.converged = true;
            return sol;
        }
        if (it >= opt.max_iter) return sol;

        Matrix h = zc.transpose() * sol.weights.asDiagonal() * zc;
        h.noalias() -= g * g.transpose();
        Eigen::LDLT<Matrix> ldlt(h);
        Vector step;
        auto usable = [&] { return ldlt.info() == Eigen::Success && ldlt.isPositive() && (ldlt.vectorD().array() > 0.0).all(); };
        if (usable()) step = ldlt.solve(g);
        if (!usable() || !step.allFinite()) {
            ldlt.compute(h + 1e-10 * Matrix::Identity(r, r));
            if (!usable()) return sol;
            step = ldlt.solve(g);
            if (!step.allFinite()) return sol;
        }

        const Vector dtilt = zc * step;
        double scale = 1.0;
        bool improved = false;
        for (int k = 0; k <= opt.max_halvings; ++k, scale *= 0.5) {
            const Vector trial = tilt - scale * dtilt;
            const double ft = detail::log_sum_exp(trial);
            if (ft <= f) {
                tilt = trial;
                sol.dual -= scale * step;
                f = ft;
                improved = true;
                break;
            }
        }
        if (!improved) return sol;
    }
}

namespace detail {

inline Vector group_density(const KernelMatrix& km, const Vector& unit_weights, const IndexList& rows) {
    Vector out = Vector::Zero(km.n());
    for (Index r : rows) out += unit_weights(r) * km.K.col(r);
    return out;
}

inline Vector uniform_unit_weights(const KernelMatrix& km) {
    Vector w(km.n());
    for (Index r : km.treated_rows) w(r) = 1.0 / static_cast<double>(km.treated_rows.size());
    for (Index r : km.control_rows) w(r) = 1.0 / static_cast<double>(km.control_rows.size());
    return w;
}

// Sum of absolute gaps between two density vectors after each is scaled to
// unit mass over the sample points.
inline double density_gap(const Vector& p, const Vector& q) {
    return (p / p.sum() - q / q.sum()).cwiseAbs().sum();
}

inline void check_unit_weights(const KernelMatrix& km, const Vector& w) {
    if (w.size() != km.n()) throw Error("unit weights must have one entry per observation");
    if ((w.array() < 0.0).any()) throw Error("unit weights must be non-negative");
    for (bool treated : {true, false}) {
        double s = 0.0;
        for (Index r : km.rows(treated)) s += w(r);
        if (std::abs(s - 1.0) > 1e-8) throw Error("unit weights must sum to 1 within each group");
    }
}

}  // namespace detail

/// Imbalance between the target density and the weighted donor density, both
/// kernel-smoothed and evaluated at every observation. The constant
/// 1/sqrt(2 pi b) cancels once both vectors are normalized to unit mass.
/// For ate, the larger of the two group-versus-all-units gaps.
inline double l1_imbalance(const KernelMatrix& km, const std::optional<Vector>& unit_weights, Estimand estimand) {
    const Vector w = unit_weights ? *unit_weights : detail::uniform_unit_weights(km);
    detail::check_unit_weights(km, w);
    const Vector pt = detail::group_density(km, w, km.treated_rows);
    const Vector pc = detail::group_density(km, w, km.control_rows);
    switch (estimand) {
        case Estimand::att:
        case Estimand::atc: return detail::density_gap(pt, pc);
        case Estimand::ate: {
            const Vector all = km.K.rowwise().mean();
            return std::max(detail::density_gap(all, pt), detail::density_gap(all, pc));
        }
    }
    return 0.0;
}

struct ScanOptions {
    Index r_max = 500;
    int patience = 15;
    SolverOptions solver;
};

namespace detail {

// Scores for the first `r` components: K V_r = V_r Lambda_r, scaled to unit
// sample sd. Columns are independent of r, so one pass serves the whole scan.
inline Matrix scan_scores(const SpectralBasis& basis, Index r) {
    Matrix s = basis.eigenvectors.leftCols(r) * basis.eigenvalues.head(r).asDiagonal();
    const double denom = static_cast<double>(s.rows() - 1);
    for (Index j = 0; j < r; ++j) {
        auto col = s.col(j);
        const double sd = std::sqrt((col.array() - col.mean()).square().sum() / denom);
        if (sd > 0.0) col /= sd;
    }
    return s;
}

struct RankAttempt {
    bool feasible = false;
    int iterations = 0;
    Vector unit_weights;
    Vector donor_weights;
    IndexList donor_rows;
    Vector dual;
};

inline RankAttempt solve_at_rank(const KernelMatrix& km, const std::vector<int>& D, const Matrix& scores, Estimand estimand,
                                 const SolverOptions& opt) {
    RankAttempt out;
    out.unit_weights = uniform_unit_weights(km);
    const auto targets = make_targets(scores, D, estimand);
    std::vector<Vector> duals;
    for (const auto& t : targets) {
        const EntropySolution s = entropy_solve(select_rows(scores, t.donor_rows), t.target_means, opt);
        out.iterations += s.iterations;
        if (!s.converged) return out;
        for (std::size_t i = 0; i < t.donor_rows.size(); ++i) out.unit_weights(t.donor_rows[i]) = s.weights(static_cast<Index>(i));
        duals.push_back(s.dual);
        if (estimand != Estimand::ate) {
            out.donor_weights = s.weights;
            out.donor_rows = t.donor_rows;
        }
    }
    if (estimand == Estimand::ate) {
        out.donor_weights = out.unit_weights;
        out.donor_rows.resize(static_cast<std::size_t>(km.n()));
        std::iota(out.donor_rows.begin(), out.donor_rows.end(), Index{0});
    }
    Index total = 0;
    for (const auto& d : duals) total += d.size();
    out.dual.resize(total);
    Index pos = 0;
    for (const auto& d : duals) {
        out.dual.segment(pos, d.size()) = d;
        pos += d.size();
    }
    out.feasible = true;
    return out;
}

inline std::vector<int> treatment_from(const KernelMatrix& km) {
    std::vector<int> D(static_cast<std::size_t>(km.n()), 0);
    for (Index r : km.treated_rows) D[static_cast<std::size_t>(r)] = 1;
    return D;
}

}  // namespace detail

/// Increases r from 1, balancing on the first r components at each step, and
/// keeps the r with the smallest L1 imbalance (ties go to the smaller r).
/// Stops after r_max or after `patience` consecutive r without a new minimum;
/// infeasible r count as "no improvement" and are recorded with L1 = +inf.
inline BalanceSolution scan_r(const KernelMatrix& km, const SpectralBasis& basis, Estimand estimand, const ScanOptions& opt = {}) {
    if (opt.patience < 1) throw Error("scan_r: patience must be >= 1");
    if (opt.r_max < 1) throw Error("scan_r: r_max must be >= 1");
    const Index rank = basis.numerical_rank();
    const Index r_max = std::min(opt.r_max, rank);
    if (r_max < 1) throw Error("scan_r: kernel matrix has zero numerical rank");

    const std::vector<int> D = detail::treatment_from(km);
    const Matrix all_scores = detail::scan_scores(basis, r_max);

    BalanceSolution best;
    best.estimand = estimand;
    best.l1_before = l1_imbalance(km, std::nullopt, estimand);
    best.l1_after = std::numeric_limits<double>::infinity();
    int since_best = 0;
    for (Index r = 1; r <= r_max; ++r) {
        const auto attempt = detail::solve_at_rank(km, D, all_scores.leftCols(r), estimand, opt.solver);
        RGridEntry entry{r, std::numeric_limits<double>::infinity(), attempt.feasible, attempt.iterations};
        if (attempt.feasible) entry.l1 = l1_imbalance(km, attempt.unit_weights, estimand);
        best.feasible_r_grid.push_back(entry);
        if (attempt.feasible && entry.l1 < best.l1_after) {
            best.l1_after = entry.l1;
            best.r = r;
            best.unit_weights = attempt.unit_weights;
            best.weights = attempt.donor_weights;
            best.donor_rows = attempt.donor_rows;
            best.dual = attempt.dual;
            best.iterations = attempt.iterations;
            best.converged = true;
            since_best = 0;
        } else if (++since_best >= opt.patience) {
            break;
        }
    }
    if (!best.converged)
        throw InfeasibleError("no feasible balancing solution for any r in [1, " + std::to_string(r_max) +
                              "]; try a larger b or trimming the treated (trimratio)");
    return best;
}

/// Balances on a fixed number of components (no scan).
inline BalanceSolution balance_at_rank(const KernelMatrix& km, const SpectralBasis& basis, Estimand estimand, Index r,
                                       const SolverOptions& opt = {}) {
    if (r < 1 || r > basis.numerical_rank()) throw Error("balance_at_rank: r outside [1, numerical rank]");
    const std::vector<int> D = detail::treatment_from(km);
    const auto attempt = detail::solve_at_rank(km, D, detail::scan_scores(basis, r), estimand, opt);
    BalanceSolution sol;
    sol.estimand = estimand;
    sol.r = r;
    sol.l1_before = l1_imbalance(km, std::nullopt, estimand);
    sol.converged = attempt.feasible;
    sol.iterations = attempt.iterations;
    sol.unit_weights = attempt.unit_weights;
    sol.weights = attempt.donor_weights;
    sol.donor_rows = attempt.donor_rows;
    sol.dual = attempt.dual;
    sol.l1_after = attempt.feasible ? l1_imbalance(km, attempt.unit_weights, estimand) : std::numeric_limits<double>::infinity();
    sol.feasible_r_grid.push_back({r, sol.l1_after, attempt.feasible, attempt.iterations});
    return sol;
}

/// Treated units whose treated-to-control density ratio (uniform weights)
/// exceeds trimratio. Returns row indices into the kernel matrix.
inline IndexList trim_treated(const KernelMatrix& km, double trimratio) {
    if (!(trimratio > 0.0)) throw Error("trim_treated: trimratio must be positive");
    IndexList trimmed;
    if (std::isinf(trimratio)) return trimmed;
    const Vector pt = density_at_points(km, std::nullopt, Group::treated);
    const Vector pc = density_at_points(km, std::nullopt, Group::control);
    for (Index r : km.treated_rows)
        if (pt(r) / pc(r) > trimratio) trimmed.push_back(r);
    if (trimmed.size() == km.treated_rows.size()) throw Error("trimming removed every treated unit; raise trimratio");
    return trimmed;
}

}  // namespace kbal
