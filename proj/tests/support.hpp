#pragma once

#include "kbal/balance.hpp"
#include "kbal/baselines.hpp"
#include "kbal/dataset.hpp"
#include "kbal/estimate.hpp"
#include "kbal/kernel.hpp"
#include "kbal/report.hpp"
#include "kbal/sim.hpp"
#include "kbal/spectral.hpp"

#include <filesystem>
#include <fstream>
#include <random>

#include <unistd.h>
#include <string>

namespace kbal::fixture {

/// Random dataset with `n1` treated rows whose covariates are shifted by `shift`.
inline Dataset random_dataset(Index n0, Index n1, Index p, std::uint64_t seed, double shift = 0.5, bool with_y = true) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    Dataset ds;
    ds.X.resize(n0 + n1, p);
    ds.D.resize(static_cast<std::size_t>(n0 + n1));
    Vector y(n0 + n1);
    for (Index i = 0; i < n0 + n1; ++i) {
        const bool t = i >= n0;
        ds.D[static_cast<std::size_t>(i)] = t ? 1 : 0;
        for (Index j = 0; j < p; ++j) ds.X(i, j) = g(rng) + (t ? shift : 0.0);
        y(i) = ds.X.row(i).sum() + g(rng) + (t ? 1.0 : 0.0);
    }
    for (Index j = 0; j < p; ++j) ds.column_names.push_back("x" + std::to_string(j + 1));
    if (with_y) ds.Y = y;
    return ds;
}

inline KernelMatrix kernel_of(const Dataset& ds, double b = 0.0) {
    KernelConfig c;
    c.b = b;
    return build_kernel_matrix(standardize(ds).first, c);
}

/// Fresh, empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("kbal_test_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline void write(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
}

}  // namespace kbal::fixture
