#pragma once

#include "kbal/balance.hpp"
#include "kbal/common.hpp"
#include "kbal/dataset.hpp"
#include "kbal/estimate.hpp"

#include <fstream>
#include <optional>
#include <set>

namespace kbal {

enum class Expansion { none, squares, squares_and_interactions };

inline std::string_view to_string(Expansion e) {
    switch (e) {
        case Expansion::none: return "none";
        case Expansion::squares: return "squares";
        case Expansion::squares_and_interactions: return "squares_and_interactions";
    }
    return "none";
}

inline Expansion parse_expansion(std::string_view s) {
    if (s == "none") return Expansion::none;
    if (s == "squares") return Expansion::squares;
    if (s == "squares_and_interactions") return Expansion::squares_and_interactions;
    throw Error("unknown expansion '" + std::string(s) + "'");
}

struct BalanceRow {
    std::string covariate;
    double std_diff_before = 0.0;
    double std_diff_after = 0.0;
};

struct BaselineResult {
    std::string method;
    std::optional<double> point;
    std::optional<Vector> unit_weights;  // per unit, each group sums to 1
    std::vector<BalanceRow> balance_table;
    std::vector<std::string> dropped_columns;
    IndexList matches;  // mahalanobis_match: matched control row per treated unit
};

struct DesignMatrix {
    Matrix X;
    std::vector<std::string> names;
    std::vector<std::string> dropped;
};

namespace detail {

inline bool is_binary_column(const Eigen::Ref<const Vector>& c) {
    std::set<double> values;
    for (Index i = 0; i < c.size() && values.size() <= 2; ++i) values.insert(c(i));
    return values.size() <= 2;
}

}  // namespace detail

/// Expands covariates with squares of the non-binary columns and, for
/// squares_and_interactions, all pairwise products.
inline DesignMatrix expand_covariates(const Matrix& X, const std::vector<std::string>& names, Expansion expansion) {
    DesignMatrix out;
    std::vector<Vector> cols;
    for (Index j = 0; j < X.cols(); ++j) {
        cols.emplace_back(X.col(j));
        out.names.push_back(names[static_cast<std::size_t>(j)]);
    }
    if (expansion != Expansion::none) {
        for (Index j = 0; j < X.cols(); ++j) {
            if (detail::is_binary_column(X.col(j))) continue;
            cols.emplace_back(X.col(j).array().square());
            out.names.push_back(names[static_cast<std::size_t>(j)] + "^2");
        }
    }
    if (expansion == Expansion::squares_and_interactions) {
        for (Index j = 0; j < X.cols(); ++j)
            for (Index k = j + 1; k < X.cols(); ++k) {
                cols.emplace_back(X.col(j).cwiseProduct(X.col(k)));
                out.names.push_back(names[static_cast<std::size_t>(j)] + "*" + names[static_cast<std::size_t>(k)]);
            }
    }
    out.X.resize(X.rows(), static_cast<Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j) out.X.col(static_cast<Index>(j)) = cols[j];
    return out;
}

/// Standardizes the columns and drops constant or collinear ones (pivoted QR,
/// relative threshold 1e-10). Kept columns preserve their input order.
inline DesignMatrix drop_collinear(const DesignMatrix& in) {
    const Index n = in.X.rows();
    std::vector<Index> nonconstant;
    Matrix z(n, in.X.cols());
    Index kept = 0;
    DesignMatrix out;
    for (Index j = 0; j < in.X.cols(); ++j) {
        const auto c = in.X.col(j);
        const double mean = c.mean();
        const double sd = std::sqrt((c.array() - mean).square().sum() / static_cast<double>(n - 1));
        if (!(sd > 0.0)) {
            out.dropped.push_back(in.names[static_cast<std::size_t>(j)]);
            continue;
        }
        z.col(kept++) = (c.array() - mean) / sd;
        nonconstant.push_back(j);
    }
    z.conservativeResize(n, kept);
    Eigen::ColPivHouseholderQR<Matrix> qr(z);
    qr.setThreshold(1e-10);
    const Index rank = qr.rank();
    std::vector<bool> keep(static_cast<std::size_t>(kept), false);
    for (Index k = 0; k < rank; ++k) keep[static_cast<std::size_t>(qr.colsPermutation().indices()(k))] = true;
    std::vector<Index> chosen;
    for (Index k = 0; k < kept; ++k) {
        const Index j = nonconstant[static_cast<std::size_t>(k)];
        if (keep[static_cast<std::size_t>(k)]) chosen.push_back(k);
        else out.dropped.push_back(in.names[static_cast<std::size_t>(j)]);
    }
    out.X.resize(n, static_cast<Index>(chosen.size()));
    for (std::size_t c = 0; c < chosen.size(); ++c) {
        out.X.col(static_cast<Index>(c)) = z.col(chosen[c]);
        out.names.push_back(in.names[static_cast<std::size_t>(nonconstant[static_cast<std::size_t>(chosen[c])])]);
    }
    return out;
}

/// Standardized difference (weighted treated mean - weighted control mean)
/// divided by the unweighted full-sample sd of the column.
inline double standardized_difference(const Eigen::Ref<const Vector>& x, const std::vector<int>& D, const Vector& unit_weights) {
    const double mean = x.mean();
    const double sd = std::sqrt((x.array() - mean).square().sum() / static_cast<double>(x.size() - 1));
    double mt = 0.0, mc = 0.0, st = 0.0, sc = 0.0;
    for (std::size_t i = 0; i < D.size(); ++i) {
        const auto k = static_cast<Index>(i);
        if (D[i] == 1) {
            mt += unit_weights(k) * x(k);
            st += unit_weights(k);
        } else {
            mc += unit_weights(k) * x(k);
            sc += unit_weights(k);
        }
    }
    const double diff = mt / st - mc / sc;
    return sd > 0.0 ? diff / sd : 0.0;
}

inline Vector uniform_unit_weights(const std::vector<int>& D) {
    const auto n1 = static_cast<double>(std::count(D.begin(), D.end(), 1));
    const auto n0 = static_cast<double>(D.size()) - n1;
    Vector w(static_cast<Index>(D.size()));
    for (std::size_t i = 0; i < D.size(); ++i) w(static_cast<Index>(i)) = D[i] == 1 ? 1.0 / n1 : 1.0 / n0;
    return w;
}

inline std::vector<BalanceRow> balance_table(const Dataset& ds, const Vector& unit_weights) {
    const Vector uniform = uniform_unit_weights(ds.D);
    std::vector<BalanceRow> rows;
    for (Index j = 0; j < ds.p(); ++j)
        rows.push_back({ds.column_names[static_cast<std::size_t>(j)], standardized_difference(ds.X.col(j), ds.D, uniform),
                        standardized_difference(ds.X.col(j), ds.D, unit_weights)});
    return rows;
}

inline BaselineResult raw_dim(const Dataset& ds) {
    ds.validate();
    BaselineResult res;
    res.method = "raw_dim";
    const Vector w = uniform_unit_weights(ds.D);
    if (ds.Y) res.point = weighted_dim(*ds.Y, ds.D, w, Estimand::att);
    res.unit_weights = w;
    res.balance_table = balance_table(ds, w);
    return res;
}

/// Entropy balancing directly on the (expanded) covariates.
inline BaselineResult mean_balance_x(const Dataset& ds, Estimand estimand, Expansion expansion = Expansion::none,
                                     const SolverOptions& opt = {}) {
    ds.validate();
    const DesignMatrix design = drop_collinear(expand_covariates(ds.X, ds.column_names, expansion));
    BaselineResult res;
    res.method = "mean_balance_x";
    res.dropped_columns = design.dropped;
    Vector w = uniform_unit_weights(ds.D);
    if (design.X.cols() > 0) {
        for (const auto& t : make_targets(design.X, ds.D, estimand)) {
            const EntropySolution s = entropy_solve(select_rows(design.X, t.donor_rows), t.target_means, opt);
            if (!s.converged) throw InfeasibleError("mean_balance_x: covariate means cannot be balanced (infeasible targets)");
            for (std::size_t i = 0; i < t.donor_rows.size(); ++i) w(t.donor_rows[i]) = s.weights(static_cast<Index>(i));
        }
    }
    if (ds.Y) res.point = weighted_dim(*ds.Y, ds.D, w, estimand);
    res.unit_weights = w;
    res.balance_table = balance_table(ds, w);
    return res;
}

/// One-to-one nearest-neighbour matching of each treated unit to a control,
/// with replacement, on Mahalanobis distance over the (expanded) covariates.
/// Ties go to the lowest control index. Estimates the att.
inline BaselineResult mahalanobis_match(const Dataset& ds, Expansion expansion = Expansion::none) {
    ds.validate();
    const DesignMatrix design = expand_covariates(ds.X, ds.column_names, expansion);
    const Index n = ds.n(), q = design.X.cols();
    // Standardize first so squares of large-valued columns do not swamp the
    // covariance; Mahalanobis distance is invariant to this rescaling.
    Matrix z(n, q);
    for (Index j = 0; j < q; ++j) {
        const auto c = design.X.col(j);
        const double mean = c.mean();
        const double sd = std::sqrt((c.array() - mean).square().sum() / static_cast<double>(n - 1));
        z.col(j) = sd > 0.0 ? Vector((c.array() - mean) / sd) : Vector::Zero(n);
    }
    Matrix cov = z.transpose() * z / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
    const double max_ev = std::max(eig.eigenvalues().maxCoeff(), 1.0);
    if (!(eig.eigenvalues().minCoeff() > 1e-12 * max_ev)) {
        cov += 1e-8 * Matrix::Identity(q, q);
        eig.compute(cov);
        if (!(eig.eigenvalues().minCoeff() > 1e-12 * max_ev)) throw Error("mahalanobis_match: covariance is singular");
    }
    const Matrix whiten = eig.eigenvectors() * eig.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() * eig.eigenvectors().transpose();
    const Matrix zw = z * whiten;

    const IndexList treated = ds.treated_rows();
    const IndexList control = ds.control_rows();
    BaselineResult res;
    res.method = "mahalanobis_match";
    Vector w = uniform_unit_weights(ds.D);
    for (Index c : control) w(c) = 0.0;
    for (Index t : treated) {
        Index best = control.front();
        double best_d = std::numeric_limits<double>::infinity();
        for (Index c : control) {
            const double d = (zw.row(t) - zw.row(c)).squaredNorm();
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        res.matches.push_back(best);
        w(best) += 1.0 / static_cast<double>(treated.size());
    }
    if (ds.Y) res.point = weighted_dim(*ds.Y, ds.D, w, Estimand::att);
    res.unit_weights = w;
    res.balance_table = balance_table(ds, w);
    return res;
}

/// Coefficient on D from least squares of Y on [1, D, expanded covariates].
inline BaselineResult least_squares(const Dataset& ds, Expansion expansion = Expansion::none) {
    ds.validate();
    if (!ds.Y) throw Error("least_squares: outcome is required");
    const DesignMatrix design = drop_collinear(expand_covariates(ds.X, ds.column_names, expansion));
    const Index n = ds.n();
    Matrix A(n, 2 + design.X.cols());
    A.col(0).setOnes();
    for (Index i = 0; i < n; ++i) A(i, 1) = ds.D[static_cast<std::size_t>(i)];
    A.rightCols(design.X.cols()) = design.X;
    Eigen::ColPivHouseholderQR<Matrix> qr(A);
    qr.setThreshold(1e-10);
    if (qr.rank() < A.cols()) throw Error("least_squares: design is rank deficient (treatment collinear with covariates)");
    const Vector beta = qr.solve(*ds.Y);
    BaselineResult res;
    res.method = "least_squares";
    res.point = beta(1);
    res.dropped_columns = design.dropped;
    return res;
}

/// Balance table CSV: covariate,std_diff_before,std_diff_after,method.
inline void write_balance_csv(const std::vector<BaselineResult>& results, std::ostream& out) {
    out << "covariate,std_diff_before,std_diff_after,method\n";
    for (const auto& r : results)
        for (const auto& row : r.balance_table)
            out << row.covariate << ',' << format_double(row.std_diff_before) << ',' << format_double(row.std_diff_after) << ','
                << r.method << '\n';
}

}  // namespace kbal
