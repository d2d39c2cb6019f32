#pragma once

#include "kbal/common.hpp"
#include "kbal/kernel.hpp"

#include <numeric>

namespace kbal {

inline constexpr double rank_threshold = 1e-10;
inline constexpr Index max_full_decomposition_rows = 5000;

struct SpectralBasis {
    Vector eigenvalues;   // descending
    Matrix eigenvectors;  // orthonormal columns, matching eigenvalues
    double total_trace = 0.0;

    Index size() const { return eigenvalues.size(); }

    /// Number of eigenvalues above rank_threshold * lambda_max.
    Index numerical_rank() const {
        if (size() == 0) return 0;
        const double cut = rank_threshold * eigenvalues(0);
        Index r = 0;
        while (r < size() && eigenvalues(r) > cut) ++r;
        return r;
    }
};

/// Full symmetric eigendecomposition. Eigenvalues in
/// [-1e-8 lambda_max, 0) are clipped to zero; anything lower is rejected.
/// Each eigenvector is signed so its first non-negligible entry is positive.
inline SpectralBasis eigendecompose(const Matrix& K) {
    const Index n = K.rows();
    if (n != K.cols()) throw Error("eigendecompose: matrix is not square");
    if (n > max_full_decomposition_rows)
        throw Error("eigendecompose: " + std::to_string(n) + " rows exceeds the dense decomposition cap of " +
                    std::to_string(max_full_decomposition_rows));
    for (Index j = 0; j < n; ++j)
        for (Index i = j + 1; i < n; ++i)
            if (std::abs(K(i, j) - K(j, i)) > 1e-12 * std::max(1.0, std::abs(K(i, j))))
                throw Error("eigendecompose: matrix is not symmetric");

    const Eigen::SelfAdjointEigenSolver<Matrix> solver(K);
    if (solver.info() != Eigen::Success) throw Error("eigendecompose: symmetric eigensolver did not converge");
    const Vector& w = solver.eigenvalues();
    const Matrix& a = solver.eigenvectors();

    // Ascending on output; sort descending, ties by input order.
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index x, Index y) { return w(x) > w(y); });

    SpectralBasis basis;
    basis.eigenvalues.resize(n);
    basis.eigenvectors.resize(n, n);
    for (Index k = 0; k < n; ++k) {
        basis.eigenvalues(k) = w(order[static_cast<std::size_t>(k)]);
        basis.eigenvectors.col(k) = a.col(order[static_cast<std::size_t>(k)]);
    }
    const double lmax = n > 0 ? basis.eigenvalues(0) : 0.0;
    for (Index k = 0; k < n; ++k) {
        double& ev = basis.eigenvalues(k);
        if (ev < 0.0) {
            if (ev < -1e-8 * std::max(lmax, 0.0)) throw Error("kernel matrix not PSD");
            ev = 0.0;
        }
        auto v = basis.eigenvectors.col(k);
        const double biggest = v.cwiseAbs().maxCoeff();
        for (Index i = 0; i < n; ++i) {
            if (std::abs(v(i)) > 1e-8 * biggest) {
                if (v(i) < 0.0) v = -v;
                break;
            }
        }
    }
    basis.total_trace = basis.eigenvalues.sum();
    return basis;
}

inline SpectralBasis eigendecompose(const KernelMatrix& km) { return eigendecompose(km.K); }

/// Scores K V_r with each column divided by its sample sd. Balancing the
/// column means of these scores is balancing on the rank-r reconstruction.
inline Matrix truncated_scores(const SpectralBasis& basis, const KernelMatrix& km, Index r) {
    if (r < 1 || r > basis.numerical_rank())
        throw Error("truncated_scores: r=" + std::to_string(r) + " outside [1, numerical rank " +
                    std::to_string(basis.numerical_rank()) + "]");
    Matrix s = km.K * basis.eigenvectors.leftCols(r);
    const double denom = static_cast<double>(s.rows() - 1);
    for (Index j = 0; j < r; ++j) {
        auto col = s.col(j);
        const double sd = std::sqrt((col.array() - col.mean()).square().sum() / denom);
        if (sd > 0.0) col /= sd;
    }
    return s;
}

/// Rank-r reconstruction V_r Lambda_r V_r^T.
inline Matrix reconstruct(const SpectralBasis& basis, Index r) {
    if (r < 0 || r > basis.size()) throw Error("reconstruct: r out of range");
    const auto v = basis.eigenvectors.leftCols(r);
    return v * basis.eigenvalues.head(r).asDiagonal() * v.transpose();
}

/// Share of the principal-component variance of K carried by the first r
/// components: sum_{d<=r} lambda_d^2 / sum_d lambda_d^2.
inline double variance_explained(const SpectralBasis& basis, Index r) {
    if (r < 1 || r > basis.size()) throw Error("variance_explained: r out of range");
    const Vector sq = basis.eigenvalues.array().square();
    const double total = sq.sum();
    if (r == basis.size()) return 1.0;
    return total > 0.0 ? sq.head(r).sum() / total : 1.0;
}

/// Share of trace(K) carried by the first r eigenvalues.
inline double trace_fraction(const SpectralBasis& basis, Index r) {
    if (r < 1 || r > basis.size()) throw Error("trace_fraction: r out of range");
    if (r == basis.size()) return 1.0;
    return basis.total_trace > 0.0 ? basis.eigenvalues.head(r).sum() / basis.total_trace : 1.0;
}

}  // namespace kbal
