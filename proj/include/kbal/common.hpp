#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdio>
#include <exception>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace kbal {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;
using IndexList = std::vector<Index>;

inline constexpr std::string_view version = "0.1.0";

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Thrown when no weighting solution exists for the requested configuration.
// Callers can recover by raising b or trimming the treated.
class InfeasibleError : public Error {
public:
    using Error::Error;
};

enum class Estimand { att, atc, ate };

inline std::string_view to_string(Estimand e) {
    switch (e) {
        case Estimand::att: return "att";
        case Estimand::atc: return "atc";
        case Estimand::ate: return "ate";
    }
    return "att";
}

inline Estimand parse_estimand(std::string_view s) {
    if (s == "att") return Estimand::att;
    if (s == "atc") return Estimand::atc;
    if (s == "ate") return Estimand::ate;
    throw Error("unknown estimand '" + std::string(s) + "' (expected att, atc or ate)");
}

// 17 significant digits so every double round-trips through text.
inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline IndexList rows_where(const std::vector<int>& d, int value) {
    IndexList out;
    for (std::size_t i = 0; i < d.size(); ++i)
        if (d[i] == value) out.push_back(static_cast<Index>(i));
    return out;
}

inline Matrix select_rows(const Matrix& m, const IndexList& rows) {
    Matrix out(static_cast<Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
    return out;
}

inline Vector select(const Vector& v, const IndexList& rows) {
    Vector out(static_cast<Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) out(static_cast<Index>(i)) = v(rows[i]);
    return out;
}

// Runs body(i) for i in [0, n) on up to `threads` workers. Each index is
// handled exactly once and results are expected to be written to slot i, so
// the outcome does not depend on the schedule.
template <class Body>
void parallel_for(std::size_t n, unsigned threads, Body&& body) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    const unsigned workers = std::min<std::size_t>(threads, n);
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) body(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace kbal
