#pragma once

#include "kbal/common.hpp"
#include "kbal/dataset.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>

namespace kbal {

enum class Distance { euclidean, mahalanobis };

// half: exp(-d^2 / (2b)), the displayed form. full: exp(-d^2 / b).
enum class ExponentConvention { half, full };

inline std::string_view to_string(Distance d) { return d == Distance::euclidean ? "euclidean" : "mahalanobis"; }
inline std::string_view to_string(ExponentConvention c) { return c == ExponentConvention::half ? "half" : "full"; }

inline Distance parse_distance(std::string_view s) {
    if (s == "euclidean") return Distance::euclidean;
    if (s == "mahalanobis") return Distance::mahalanobis;
    throw Error("unknown distance '" + std::string(s) + "'");
}

struct KernelConfig {
    /// Scale; a value <= 0 means "use the number of covariate columns".
    double b = 0.0;
    Distance distance = Distance::euclidean;
    ExponentConvention exponent = ExponentConvention::half;
    Index max_rows = 20000;

    double resolved_b(Index p) const { return b > 0.0 ? b : static_cast<double>(p); }
    double denominator() const { return exponent == ExponentConvention::half ? 2.0 * b : b; }
};

struct KernelMatrix {
    Matrix K;
    IndexList treated_rows;
    IndexList control_rows;
    KernelConfig config;  // b resolved

    Index n() const { return K.rows(); }
    Matrix treated_block() const { return select_rows(K, treated_rows); }
    Matrix control_block() const { return select_rows(K, control_rows); }
    const IndexList& rows(bool treated) const { return treated ? treated_rows : control_rows; }
};

inline double gaussian_kernel(const Eigen::Ref<const Vector>& xi, const Eigen::Ref<const Vector>& xj, const KernelConfig& config) {
    if (xi.size() != xj.size()) throw Error("gaussian_kernel: vectors differ in length");
    if (!xi.allFinite() || !xj.allFinite()) throw Error("gaussian_kernel: non-finite input");
    if (!(config.b > 0.0)) throw Error("gaussian_kernel: b must be positive");
    return std::exp(-(xi - xj).squaredNorm() / config.denominator());
}

namespace detail {

inline void fill_kernel(const Matrix& X, double denom, Matrix& K) {
    const Index n = X.rows(), p = X.cols();
    const Matrix Xt = X.transpose();  // column access is contiguous
    K.resize(n, n);
    for (Index j = 0; j < n; ++j) {
        K(j, j) = 1.0;
        const double* xj = Xt.col(j).data();
        for (Index i = j + 1; i < n; ++i) {
            const double* xi = Xt.col(i).data();
            double r = 0.0;
            for (Index k = 0; k < p; ++k) {
                const double dx = xi[k] - xj[k];
                r += dx * dx;
            }
            const double v = std::exp(-r / denom);
            K(i, j) = v;
            K(j, i) = v;
        }
    }
}

}  // namespace detail

/// Assembles K for already-scaled covariates. Only the upper triangle is
/// evaluated; the lower one is mirrored so K is exactly symmetric.
inline KernelMatrix build_kernel_matrix(const Dataset& ds, KernelConfig config) {
    if (ds.n() > config.max_rows)
        throw Error("kernel matrix with " + std::to_string(ds.n()) + " rows exceeds the memory cap of " +
                    std::to_string(config.max_rows));
    if (!ds.X.allFinite()) throw Error("build_kernel_matrix: non-finite covariates");
    config.b = config.resolved_b(ds.p());
    KernelMatrix km;
    km.config = config;
    detail::fill_kernel(ds.X, config.denominator(), km.K);
    km.treated_rows = ds.treated_rows();
    km.control_rows = ds.control_rows();
    return km;
}

enum class Group { treated, control };

inline double density_constant(double b) { return 1.0 / std::sqrt(2.0 * std::numbers::pi * b); }

/// Smoothed density of one group evaluated at every observation:
/// (1/sqrt(2 pi b)) K_group^T w, with w uniform when absent.
inline Vector density_at_points(const KernelMatrix& km, const std::optional<Vector>& weights, Group group) {
    const IndexList& rows = km.rows(group == Group::treated);
    const Index m = static_cast<Index>(rows.size());
    Vector w;
    if (weights) {
        if (weights->size() != m) throw Error("density_at_points: weight length does not match group size");
        if ((weights->array() < 0.0).any()) throw Error("density_at_points: negative weight");
        if (std::abs(weights->sum() - 1.0) > 1e-10) throw Error("density_at_points: weights must sum to 1");
        w = *weights;
    } else {
        w = Vector::Constant(m, 1.0 / static_cast<double>(m));
    }
    Vector out = Vector::Zero(km.n());
    // K is symmetric, so column r holds row r contiguously.
    for (Index a = 0; a < m; ++a) out += w(a) * km.K.col(rows[static_cast<std::size_t>(a)]);
    return out * density_constant(km.config.b);
}

/// Explicit features for the scalar Gaussian kernel at b = 0.5:
/// phi_d(x) = sqrt(2^d / d!) exp(-x^2) x^d, d = 0..d_max.
inline Vector explicit_feature_map(double x, int d_max) {
    if (d_max < 0) throw Error("explicit_feature_map: d_max must be >= 0");
    if (d_max > 170) throw Error("explicit_feature_map: d_max > 170 overflows the factorial");
    if (!std::isfinite(x)) throw Error("explicit_feature_map: non-finite input");
    Vector phi(d_max + 1);
    // Recurrence phi_d = phi_{d-1} * x * sqrt(2/d) avoids forming 2^d and d!.
    phi(0) = std::exp(-x * x);
    for (int d = 1; d <= d_max; ++d) phi(d) = phi(d - 1) * x * std::sqrt(2.0 / d);
    return phi;
}

// Binary cache of K: 8-byte magic "KBALKMAT", u32 N, u32 reserved (0), then
// N*N row-major little-endian doubles.
inline constexpr char kernel_magic[8] = {'K', 'B', 'A', 'L', 'K', 'M', 'A', 'T'};

inline void save_kernel_matrix(const KernelMatrix& km, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    const auto n = static_cast<std::uint32_t>(km.n());
    const std::uint32_t reserved = 0;
    out.write(kernel_magic, 8);
    out.write(reinterpret_cast<const char*>(&n), 4);
    out.write(reinterpret_cast<const char*>(&reserved), 4);
    for (Index i = 0; i < km.n(); ++i)
        for (Index j = 0; j < km.n(); ++j) {
            const double v = km.K(i, j);
            out.write(reinterpret_cast<const char*>(&v), sizeof v);
        }
    if (!out) throw Error("failed writing '" + path.string() + "'");
}

/// Loads a dumped K; the partition comes from `d`, metadata from `config`.
inline KernelMatrix load_kernel_matrix(const std::filesystem::path& path, const std::vector<int>& d, const KernelConfig& config) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path.string() + "'");
    char magic[8];
    std::uint32_t n = 0, reserved = 0;
    in.read(magic, 8);
    in.read(reinterpret_cast<char*>(&n), 4);
    in.read(reinterpret_cast<char*>(&reserved), 4);
    if (!in || std::memcmp(magic, kernel_magic, 8) != 0) throw Error("'" + path.string() + "' is not a kernel matrix dump");
    if (n != d.size()) throw Error("kernel dump has " + std::to_string(n) + " rows but treatment vector has " + std::to_string(d.size()));
    KernelMatrix km;
    km.K.resize(n, n);
    for (Index i = 0; i < static_cast<Index>(n); ++i)
        for (Index j = 0; j < static_cast<Index>(n); ++j) in.read(reinterpret_cast<char*>(&km.K(i, j)), sizeof(double));
    if (!in) throw Error("kernel dump '" + path.string() + "' is truncated");
    km.treated_rows = rows_where(d, 1);
    km.control_rows = rows_where(d, 0);
    km.config = config;
    return km;
}

}  // namespace kbal
