#pragma once

// Slow, independent reference implementations used only by the tests.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

namespace kbal::oracle {

struct EigenPairs {
    Eigen::VectorXd values;   // descending
    Eigen::MatrixXd vectors;  // columns
};

/// Cyclic Jacobi rotations on a symmetric matrix until the off-diagonal mass
/// is below 1e-15 of the Frobenius norm.
inline EigenPairs jacobi_eigen(Eigen::MatrixXd a) {
    const Eigen::Index n = a.rows();
    Eigen::MatrixXd v = Eigen::MatrixXd::Identity(n, n);
    const double scale = a.norm();
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (Eigen::Index p = 0; p < n; ++p)
            for (Eigen::Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (std::sqrt(off) <= 1e-15 * scale) break;
        for (Eigen::Index p = 0; p < n; ++p) {
            for (Eigen::Index q = p + 1; q < n; ++q) {
                if (a(p, q) == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (Eigen::Index k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (Eigen::Index k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (Eigen::Index k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::sort(order.begin(), order.end(), [&](auto x, auto y) { return a(x, x) > a(y, y); });
    EigenPairs out;
    out.values.resize(n);
    out.vectors.resize(n, n);
    for (Eigen::Index k = 0; k < n; ++k) {
        out.values(k) = a(order[k], order[k]);
        out.vectors.col(k) = v.col(order[k]);
    }
    return out;
}

/// Random symmetric PSD matrix with a decaying spectrum.
inline Eigen::MatrixXd random_psd(Eigen::Index n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    Eigen::MatrixXd a(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) a(i, j) = g(rng);
    const Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, n);
    Eigen::VectorXd lambda(n);
    for (Eigen::Index k = 0; k < n; ++k) lambda(k) = 10.0 * std::pow(0.7, static_cast<double>(k)) * (1.0 + 0.1 * g(rng) * g(rng));
    const Eigen::MatrixXd m = q * lambda.asDiagonal() * q.transpose();
    return 0.5 * (m + m.transpose());
}

/// Minimizes sum_i w_i log w_i over {w > 0 : sum w = 1, Z^T w = target} by
/// compass search in an orthonormal basis of the constraint null space,
/// starting from a known feasible interior point w0.
inline Eigen::VectorXd entropy_primal(const Eigen::MatrixXd& Z, const Eigen::VectorXd& w0) {
    const Eigen::Index m = Z.rows();
    Eigen::MatrixXd A(m, Z.cols() + 1);
    A.col(0).setOnes();
    A.rightCols(Z.cols()) = Z;
    // Columns of Q beyond rank(A) span the null space of A^T.
    const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
    const Eigen::Index rank = qr.rank();
    const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(m, m);
    const Eigen::MatrixXd N = q.rightCols(m - rank);

    auto f = [&](const Eigen::VectorXd& u) {
        const Eigen::VectorXd w = w0 + N * u;
        if ((w.array() <= 0.0).any()) return std::numeric_limits<double>::infinity();
        return (w.array() * w.array().log()).sum();
    };
    Eigen::VectorXd u = Eigen::VectorXd::Zero(N.cols());
    double fu = f(u);
    for (double h = 0.1; h > 1e-12; h *= 0.5) {
        bool moved = true;
        while (moved) {
            moved = false;
            for (Eigen::Index k = 0; k < u.size(); ++k) {
                for (double sign : {1.0, -1.0}) {
                    Eigen::VectorXd t = u;
                    t(k) += sign * h;
                    const double ft = f(t);
                    if (ft < fu) {
                        u = t;
                        fu = ft;
                        moved = true;
                    }
                }
            }
        }
    }
    return w0 + N * u;
}

}  // namespace kbal::oracle
