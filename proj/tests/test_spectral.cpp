#include "oracles.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

using namespace kbal;

TEST(Eigendecompose, Identity) {
    const SpectralBasis b = eigendecompose(Matrix::Identity(6, 6));
    EXPECT_LE((b.eigenvalues - Vector::Ones(6)).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_EQ(b.numerical_rank(), 6);
}

TEST(Eigendecompose, OnesMatrix) {
    const SpectralBasis b = eigendecompose(Matrix::Ones(7, 7));
    EXPECT_NEAR(b.eigenvalues(0), 7.0, 1e-12);
    EXPECT_LE(b.eigenvalues.tail(6).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(b.numerical_rank(), 1);
    EXPECT_LE((reconstruct(b, 1) - Matrix::Ones(7, 7)).norm(), 1e-12);
    EXPECT_DOUBLE_EQ(variance_explained(b, 1), 1.0);
}

TEST(Eigendecompose, KernelMatrixInvariants) {
    const KernelMatrix km = fixture::kernel_of(fixture::random_dataset(30, 20, 3, 12));
    const SpectralBasis b = eigendecompose(km);
    const Index n = km.n();
    for (Index k = 1; k < n; ++k) EXPECT_GE(b.eigenvalues(k - 1), b.eigenvalues(k));
    EXPECT_LE((b.eigenvectors.transpose() * b.eigenvectors - Matrix::Identity(n, n)).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_NEAR(b.total_trace, static_cast<double>(n), 1e-6);
    EXPECT_LE((reconstruct(b, n) - km.K).norm() / km.K.norm(), 1e-8);
    EXPECT_GE(b.eigenvalues.minCoeff(), 0.0);
}

TEST(Eigendecompose, SignConvention) {
    const SpectralBasis b = eigendecompose(oracle::random_psd(20, 3));
    for (Index k = 0; k < b.size(); ++k) {
        const auto v = b.eigenvectors.col(k);
        const double big = v.cwiseAbs().maxCoeff();
        for (Index i = 0; i < v.size(); ++i) {
            if (std::abs(v(i)) > 1e-8 * big) {
                EXPECT_GT(v(i), 0.0);
                break;
            }
        }
    }
}

TEST(Eigendecompose, Deterministic) {
    const Matrix K = fixture::kernel_of(fixture::random_dataset(40, 20, 2, 13)).K;
    const SpectralBasis a = eigendecompose(K), b = eigendecompose(K);
    EXPECT_EQ(a.eigenvalues, b.eigenvalues);
    EXPECT_EQ(a.eigenvectors, b.eigenvectors);
}

TEST(Eigendecompose, RejectsIndefiniteAndAsymmetric) {
    Matrix m = Matrix::Identity(3, 3);
    m(2, 2) = -0.5;
    EXPECT_THROW(eigendecompose(m), Error);
    Matrix a = Matrix::Identity(3, 3);
    a(0, 1) = 0.3;
    EXPECT_THROW(eigendecompose(a), Error);
    EXPECT_THROW(eigendecompose(Matrix::Identity(3, 4)), Error);
}

TEST(Eigendecompose, ClipsTinyNegativeEigenvalues) {
    Matrix m = Matrix::Zero(3, 3);
    m(0, 0) = 1.0;
    m(2, 2) = -1e-12;
    const SpectralBasis b = eigendecompose(m);
    EXPECT_EQ(b.eigenvalues.minCoeff(), 0.0);
}

TEST(Truncation, FrobeniusErrorMatchesJacobiOracle) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const Matrix K = oracle::random_psd(30, seed);
        const SpectralBasis b = eigendecompose(K);
        const oracle::EigenPairs ref = oracle::jacobi_eigen(K);
        for (Index r : {1, 5, 10}) {
            const Matrix vr = ref.vectors.leftCols(r);
            const Matrix ref_trunc = vr * ref.values.head(r).asDiagonal() * vr.transpose();
            const double ours = (K - reconstruct(b, r)).norm();
            const double theirs = (K - ref_trunc).norm();
            EXPECT_NEAR(ours, theirs, 1e-10) << "seed " << seed << " r " << r;
            EXPECT_NEAR(ours, std::sqrt(ref.values.tail(30 - r).squaredNorm()), 1e-10);
        }
    }
}

TEST(Truncation, EckartYoungAgainstRandomCandidates) {
    std::mt19937_64 rng(77);
    std::normal_distribution<double> g;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        const Matrix K = oracle::random_psd(30, 100 + seed);
        const SpectralBasis b = eigendecompose(K);
        for (Index r : {1, 3, 8}) {
            const Matrix best = reconstruct(b, r);
            const double fro = (K - best).norm();
            const double op = Eigen::JacobiSVD<Matrix>(K - best).singularValues()(0);
            for (int c = 0; c < 100; ++c) {
                // Perturb the optimal factors to get a nearby rank-r matrix.
                Matrix u = b.eigenvectors.leftCols(r) * b.eigenvalues.head(r).cwiseSqrt().asDiagonal();
                for (Index i = 0; i < u.rows(); ++i)
                    for (Index j = 0; j < r; ++j) u(i, j) += 0.05 * g(rng);
                const Matrix cand = u * u.transpose();
                EXPECT_LE(fro, (K - cand).norm() + 1e-12);
                EXPECT_LE(op, Eigen::JacobiSVD<Matrix>(K - cand).singularValues()(0) + 1e-12);
            }
        }
    }
}

TEST(VarianceExplained, MonotoneAndExactAtFullRank) {
    const SpectralBasis b = eigendecompose(fixture::kernel_of(fixture::random_dataset(25, 25, 2, 14)).K);
    double prev = 0.0;
    for (Index r = 1; r <= b.size(); ++r) {
        const double v = variance_explained(b, r);
        EXPECT_GE(v, prev);
        EXPECT_LE(v, 1.0);
        EXPECT_GE(trace_fraction(b, r), 0.0);
        prev = v;
    }
    EXPECT_NEAR(variance_explained(b, b.size()), 1.0, 1e-12);
    EXPECT_NEAR(trace_fraction(b, b.size()), 1.0, 1e-12);
    EXPECT_THROW(variance_explained(b, 0), Error);
    EXPECT_THROW(variance_explained(b, b.size() + 1), Error);
}

TEST(Scores, FullBasisSpansKernelColumns) {
    const KernelMatrix km = fixture::kernel_of(fixture::random_dataset(12, 8, 2, 15), 0.5);
    const SpectralBasis b = eigendecompose(km);
    const Index r = b.numerical_rank();
    ASSERT_EQ(r, km.n());
    const Matrix s = truncated_scores(b, km, r);
    const Eigen::ColPivHouseholderQR<Matrix> qr(s);
    const Matrix resid = km.K - s * qr.solve(km.K);
    EXPECT_LE(resid.cwiseAbs().maxCoeff(), 1e-8);
    const double sd = (s.col(0).array() - s.col(0).mean()).matrix().norm() / std::sqrt(static_cast<double>(km.n() - 1));
    EXPECT_NEAR(sd, 1.0, 1e-12);
}

TEST(Scores, RankBeyondNumericalRankRejected) {
    Dataset ds = fixture::random_dataset(3, 3, 1, 16);
    ds.X.col(0) << 0, 0, 0, 1, 1, 1;
    const KernelMatrix km = build_kernel_matrix(ds, KernelConfig{});
    const SpectralBasis b = eigendecompose(km);
    EXPECT_EQ(b.numerical_rank(), 2);
    EXPECT_NO_THROW(truncated_scores(b, km, 2));
    EXPECT_THROW(truncated_scores(b, km, 3), Error);
    EXPECT_THROW(truncated_scores(b, km, 0), Error);
}
