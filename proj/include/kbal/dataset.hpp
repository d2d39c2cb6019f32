#pragma once

#include "kbal/common.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <utility>

namespace kbal {

/// Covariates, binary treatment and an optional outcome for N units.
struct Dataset {
    Matrix X;
    std::vector<int> D;
    std::optional<Vector> Y;
    std::vector<std::string> column_names;

    Index n() const { return X.rows(); }
    Index p() const { return X.cols(); }
    Index n_treated() const { return static_cast<Index>(std::count(D.begin(), D.end(), 1)); }
    Index n_control() const { return n() - n_treated(); }
    IndexList treated_rows() const { return rows_where(D, 1); }
    IndexList control_rows() const { return rows_where(D, 0); }

    /// Checks shape consistency, binary D, finite values and N1, N0 >= 1.
    void validate() const {
        if (n() < 2) throw Error("dataset needs at least 2 rows");
        if (p() < 1) throw Error("dataset needs at least 1 covariate column");
        if (static_cast<Index>(D.size()) != n()) throw Error("treatment length does not match covariate rows");
        if (static_cast<Index>(column_names.size()) != p()) throw Error("column_names length does not match covariate columns");
        for (int d : D)
            if (d != 0 && d != 1) throw Error("non-binary treatment");
        if (!X.allFinite()) throw Error("covariates contain non-finite values");
        if (Y) {
            if (Y->size() != n()) throw Error("outcome length does not match covariate rows");
            if (!Y->allFinite()) throw Error("outcome contains non-finite values");
        }
        if (n_treated() < 1) throw Error("no treated units");
        if (n_control() < 1) throw Error("no control units");
    }

    Dataset subset(const IndexList& rows) const {
        Dataset out;
        out.X = select_rows(X, rows);
        out.D.reserve(rows.size());
        for (Index r : rows) out.D.push_back(D[static_cast<std::size_t>(r)]);
        if (Y) out.Y = select(*Y, rows);
        out.column_names = column_names;
        return out;
    }

    /// Same units with treatment labels swapped (D -> 1 - D).
    Dataset flipped() const {
        Dataset out = *this;
        for (int& d : out.D) d = 1 - d;
        return out;
    }

    Index column_index(std::string_view name) const {
        for (std::size_t j = 0; j < column_names.size(); ++j)
            if (column_names[j] == name) return static_cast<Index>(j);
        throw Error("no covariate column named '" + std::string(name) + "'");
    }
};

struct ScalingInfo {
    Vector means;
    Vector sds;
    std::optional<Matrix> whitening;
};

namespace detail {

inline std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
    while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
    return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        auto pos = line.find(',', start);
        out.push_back(trim(std::string_view(line).substr(start, pos == std::string::npos ? std::string::npos : pos - start)));
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    return out;
}

inline std::optional<double> parse_number(const std::string& s) {
    if (s.empty()) return std::nullopt;
    const char* first = s.data();
    if (*first == '+') ++first;
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

inline bool is_missing_token(const std::string& s) {
    return s.empty() || s == "NA" || s == "NaN" || s == "nan" || s == ".";
}

inline double sample_sd(const Eigen::Ref<const Vector>& v) {
    const double mean = v.mean();
    return std::sqrt((v.array() - mean).square().sum() / static_cast<double>(v.size() - 1));
}

}  // namespace detail

/// Reads a comma-separated file with a header row. The treatment column must
/// hold only 0/1. All other columns become covariates unless `covariates`
/// names an explicit subset (in which case unlisted columns are ignored).
inline Dataset load_csv(const std::filesystem::path& path, const std::string& treatment_col,
                        const std::optional<std::string>& outcome_col = std::nullopt,
                        const std::vector<std::string>& covariates = {}) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path.string() + "'");

    std::string line;
    if (!std::getline(in, line)) throw Error("'" + path.string() + "' is empty");
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // BOM
    const auto header = detail::split_csv_line(line);

    std::set<std::string> seen;
    for (const auto& h : header) {
        if (h.empty()) throw Error("empty column name in header");
        if (!seen.insert(h).second) throw Error("duplicated column name '" + h + "'");
    }
    auto find = [&](const std::string& name) -> std::size_t {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw Error("missing column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    };
    const std::size_t t_idx = find(treatment_col);
    const std::optional<std::size_t> y_idx = outcome_col ? std::optional(find(*outcome_col)) : std::nullopt;

    std::vector<std::size_t> x_idx;
    if (!covariates.empty()) {
        for (const auto& c : covariates) {
            const auto j = find(c);
            if (j == t_idx || (y_idx && j == *y_idx)) throw Error("column '" + c + "' cannot be both covariate and treatment/outcome");
            x_idx.push_back(j);
        }
    } else {
        for (std::size_t j = 0; j < header.size(); ++j)
            if (j != t_idx && (!y_idx || j != *y_idx)) x_idx.push_back(j);
    }
    if (x_idx.empty()) throw Error("no covariate columns");

    std::vector<std::vector<double>> rows;
    std::vector<int> d;
    std::vector<double> y;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size())
            throw Error("line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) + " fields, got " +
                        std::to_string(cells.size()));
        auto numeric = [&](std::size_t j) {
            if (detail::is_missing_token(cells[j]))
                throw Error("line " + std::to_string(line_no) + ": missing value in column '" + header[j] + "'");
            auto v = detail::parse_number(cells[j]);
            if (!v || !std::isfinite(*v))
                throw Error("line " + std::to_string(line_no) + ": non-numeric value '" + cells[j] + "' in column '" + header[j] + "'");
            return *v;
        };
        const double t = numeric(t_idx);
        if (t != 0.0 && t != 1.0) throw Error("line " + std::to_string(line_no) + ": non-binary treatment value '" + cells[t_idx] + "'");
        d.push_back(static_cast<int>(t));
        if (y_idx) y.push_back(numeric(*y_idx));
        std::vector<double> row;
        row.reserve(x_idx.size());
        for (auto j : x_idx) row.push_back(numeric(j));
        rows.push_back(std::move(row));
    }

    Dataset ds;
    ds.X.resize(static_cast<Index>(rows.size()), static_cast<Index>(x_idx.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < x_idx.size(); ++j) ds.X(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
    ds.D = std::move(d);
    if (y_idx) ds.Y = Eigen::Map<Vector>(y.data(), static_cast<Index>(y.size()));
    for (auto j : x_idx) ds.column_names.push_back(header[j]);
    ds.validate();
    return ds;
}

inline void write_csv(const Dataset& ds, const std::filesystem::path& path, const std::string& treatment_col = "treat",
                      const std::string& outcome_col = "y") {
    std::ofstream out(path);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out << treatment_col;
    if (ds.Y) out << ',' << outcome_col;
    for (const auto& c : ds.column_names) out << ',' << c;
    out << '\n';
    for (Index i = 0; i < ds.n(); ++i) {
        out << ds.D[static_cast<std::size_t>(i)];
        if (ds.Y) out << ',' << format_double((*ds.Y)(i));
        for (Index j = 0; j < ds.p(); ++j) out << ',' << format_double(ds.X(i, j));
        out << '\n';
    }
    if (!out) throw Error("failed writing '" + path.string() + "'");
}

/// Centers every column and divides by its sample sd (denominator N-1),
/// pooled over all units.
inline std::pair<Dataset, ScalingInfo> standardize(const Dataset& ds) {
    ScalingInfo info;
    info.means = ds.X.colwise().mean().transpose();
    info.sds.resize(ds.p());
    for (Index j = 0; j < ds.p(); ++j) {
        info.sds(j) = detail::sample_sd(ds.X.col(j));
        if (!(info.sds(j) > 0.0)) throw Error("column '" + ds.column_names[static_cast<std::size_t>(j)] + "' is constant");
    }
    Dataset out = ds;
    out.X = (ds.X.rowwise() - info.means.transpose()).array().rowwise() / info.sds.transpose().array();
    return {std::move(out), std::move(info)};
}

/// Rotates standardized covariates by the inverse square root of their pooled
/// sample covariance, so Euclidean distance on the output equals Mahalanobis
/// distance on the input.
inline std::pair<Dataset, ScalingInfo> whiten_mahalanobis(const Dataset& ds) {
    const Index n = ds.n();
    const Matrix centered = ds.X.rowwise() - ds.X.colwise().mean();
    Matrix cov = centered.transpose() * centered / static_cast<double>(n - 1);

    Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
    double min_ev = eig.eigenvalues().minCoeff();
    const double max_ev = eig.eigenvalues().maxCoeff();
    if (!(min_ev > 1e-12 * std::max(max_ev, 1.0))) {
        cov += 1e-8 * Matrix::Identity(ds.p(), ds.p());
        eig.compute(cov);
        min_ev = eig.eigenvalues().minCoeff();
        if (!(min_ev > 1e-12 * std::max(max_ev, 1.0))) throw Error("covariance is singular; cannot whiten");
    }
    const Matrix w = eig.eigenvectors() * eig.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() * eig.eigenvectors().transpose();

    ScalingInfo info;
    info.means = ds.X.colwise().mean().transpose();
    info.sds = Vector::Ones(ds.p());
    info.whitening = w;
    Dataset out = ds;
    out.X = centered * w;
    return {std::move(out), std::move(info)};
}

}  // namespace kbal
