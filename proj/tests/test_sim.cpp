#include "support.hpp"

#include <gtest/gtest.h>

using namespace kbal;

namespace {

double treated_share(const std::vector<int>& D) {
    return static_cast<double>(std::count(D.begin(), D.end(), 1)) / static_cast<double>(D.size());
}

// Midpoint rule on [lo, hi].
template <class F>
double integrate(F f, double lo, double hi, int steps = 200000) {
    const double h = (hi - lo) / steps;
    double s = 0.0;
    for (int k = 0; k < steps; ++k) s += f(lo + (k + 0.5) * h);
    return s * h;
}

}  // namespace

TEST(Peacekeeping, DeterministicAndHiddenColumnNotInX) {
    const SimDraw a = dgp_peacekeeping(300, 5), b = dgp_peacekeeping(300, 5), c = dgp_peacekeeping(300, 6);
    EXPECT_EQ(a.data.X, b.data.X);
    EXPECT_EQ(a.data.D, b.data.D);
    EXPECT_EQ(*a.data.Y, *b.data.Y);
    EXPECT_NE(a.data.X, c.data.X);
    EXPECT_EQ(a.data.column_names, (std::vector<std::string>{"war_duration", "fatalities", "democracy", "factionalism"}));
    EXPECT_EQ(a.hidden_name, "intensity");
    for (Index j = 0; j < a.data.p(); ++j) EXPECT_NE(a.data.X.col(j), a.hidden);
    // Fatalities are intensity times duration.
    EXPECT_LE((a.data.X.col(1) - a.hidden.cwiseProduct(a.data.X.col(0))).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_THROW(dgp_peacekeeping(10, 1), Error);
}

TEST(Peacekeeping, MarginalsMatchTheDesign) {
    const SimDraw s = dgp_peacekeeping(10000, 11);
    const Vector resid = *s.data.Y - s.hidden / 2500.0;
    const double sd = std::sqrt((resid.array() - resid.mean()).square().sum() / 9999.0);
    EXPECT_NEAR(sd, std::sqrt(0.004), 0.003);
    EXPECT_NEAR(resid.mean(), 0.0, 0.003);
    // E[logistic(u - 2)] for u uniform on [0.02, 2].
    const double p = (std::log(2.0) - std::log1p(std::exp(-1.98))) / 1.98;
    EXPECT_NEAR(treated_share(s.data.D), p, 4 * std::sqrt(p * (1 - p) / 10000));
    EXPECT_NEAR(treated_share(s.data.D), 0.27, 0.05);
    EXPECT_GE(s.hidden.minCoeff(), 100.0);
    EXPECT_LE(s.hidden.maxCoeff(), 10000.0);
    EXPECT_GE(s.data.X.col(0).minCoeff(), 1.0);
    // The outcome carries no treatment effect.
    EXPECT_EQ(*s.y0, *s.y1);
}

TEST(Peacekeeping, EstimateIsIntensityGapPlusNoiseGap) {
    const SimDraw s = dgp_peacekeeping(400, 12);
    const PipelineResult res = run_pipeline(s.data, {});
    const Vector& w = res.solution.unit_weights;
    const double est = weighted_dim(*s.data.Y, s.data.D, w, Estimand::att);
    const Vector noise = *s.data.Y - s.hidden / 2500.0;
    const double parts = weighted_dim(s.hidden, s.data.D, w, Estimand::att) / 2500.0 + weighted_dim(noise, s.data.D, w, Estimand::att);
    EXPECT_NEAR(est, parts, 1e-12);
}

TEST(Peacekeeping, RawDifferenceIsEffectPlusBias) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const SimDraw s = dgp_peacekeeping(500, seed);
        const Vector w = uniform_unit_weights(s.data.D);
        const double raw = weighted_dim(*s.data.Y, s.data.D, w, Estimand::att);
        double satt = 0.0, y0t = 0.0, y0c = 0.0;
        const double nt = static_cast<double>(s.data.n_treated()), nc = static_cast<double>(s.data.n_control());
        for (Index i = 0; i < s.data.n(); ++i) {
            if (s.data.D[static_cast<std::size_t>(i)] == 1) {
                satt += ((*s.y1)(i) - (*s.y0)(i)) / nt;
                y0t += (*s.y0)(i) / nt;
            } else {
                y0c += (*s.y0)(i) / nc;
            }
        }
        EXPECT_NEAR(raw, satt + (y0t - y0c), 1e-12);
        EXPECT_EQ(satt, 0.0);
    }
}

TEST(Logistic1d, PropensityAndGroupSizes) {
    const SimDraw s = dgp_logistic_1d(40000, 3);
    EXPECT_EQ(s.data.p(), 1);
    // Units near x = 1 are treated half the time.
    int near = 0, near_t = 0;
    for (Index i = 0; i < s.data.n(); ++i) {
        if (std::abs(s.data.X(i, 0) - 1.0) < 0.05) {
            ++near;
            near_t += s.data.D[static_cast<std::size_t>(i)];
        }
    }
    EXPECT_NEAR(static_cast<double>(near_t) / near, 0.5, 4 * 0.5 / std::sqrt(near));
    const double p = integrate([](double x) { return std::exp(-0.5 * x * x) / std::sqrt(2 * M_PI) * logistic(2 * x - 2); }, -10, 10);
    EXPECT_NEAR(treated_share(s.data.D), p, 4 * std::sqrt(p * (1 - p) / 40000));
    // This assignment rule gives about 3.4 controls per treated unit.
    const double ratio = (1 - treated_share(s.data.D)) / treated_share(s.data.D);
    EXPECT_NEAR(ratio, (1 - p) / p, 0.15);
    EXPECT_NEAR(ratio, 3.43, 0.2);
}

TEST(Z5, HiddenRadiusAndGroupSizes) {
    const SimDraw s = dgp_z5(40000, 4);
    EXPECT_EQ(s.data.p(), 5);
    EXPECT_GE(s.hidden.minCoeff(), 0.0);
    for (Index i = 0; i < 100; ++i) EXPECT_DOUBLE_EQ(s.hidden(i), std::hypot(s.data.X(i, 0), s.data.X(i, 1)));
    // Radius of a bivariate standard normal has density z exp(-z^2 / 2).
    const double p = integrate([](double z) { return z * std::exp(-0.5 * z * z) * logistic(z - 2); }, 0, 12);
    EXPECT_NEAR(treated_share(s.data.D), p, 4 * std::sqrt(p * (1 - p) / 40000));
    const double ratio = (1 - treated_share(s.data.D)) / treated_share(s.data.D);
    EXPECT_GT(ratio, 1.5);
    EXPECT_LT(ratio, 3.5);
}

TEST(Substream, ReplicatesAreIndependentOfOrder) {
    auto a = substream(9, 4), b = substream(9, 4), c = substream(9, 5);
    EXPECT_EQ(a(), b());
    EXPECT_NE(substream(9, 4)(), c());
}

TEST(RunStudy, Figure12SmokeAndThreadIndependence) {
    StudyConfig cfg;
    cfg.n = 200;
    const StudyReport one = run_study(Study::figure12, 3, 7, cfg);
    cfg.threads = 3;
    const StudyReport three = run_study(Study::figure12, 3, 7, cfg);
    ASSERT_EQ(one.rows.size(), three.rows.size());
    for (std::size_t k = 0; k < one.rows.size(); ++k) EXPECT_EQ(one.rows[k].value, three.rows[k].value);
    for (const char* m : {"raw", "matching", "matching+", "mean_balance", "kbal"}) {
        ASSERT_TRUE(one.find(m, "att", "mean")) << m;
        ASSERT_TRUE(one.find(m, "abs_std_diff:intensity", "mean")) << m;
        EXPECT_EQ(*one.find(m, "att", "bias"), *one.find(m, "att", "mean"));
    }
    EXPECT_EQ(one.n, 200);
    EXPECT_THROW(run_study(Study::figure12, 0, 1, cfg), Error);
}

TEST(RunStudy, ReplicateCanBeRegeneratedAlone) {
    StudyConfig cfg;
    cfg.n = 150;
    const StudyReport rep = run_study(Study::density_fig, 2, 3, cfg);
    const SimDraw second = dgp_logistic_1d(150, 3 * 1000003u + 1);
    for (const auto& row : rep.rows)
        if (row.rep == 1 && row.method == "data" && row.metric == "x") EXPECT_EQ(row.value, second.data.X(row.index, 0));
    const PipelineResult res = run_pipeline(second.data, {});
    for (const auto& row : rep.rows)
        if (row.rep == 1 && row.metric == "r") EXPECT_EQ(row.value, static_cast<double>(res.solution.r));
}

TEST(RunStudy, RScanGridArgminAndMinimum) {
    const SimDraw draw = dgp_z5(150, 8);
    const RScanGrid g = rscan_grid(draw, {}, 25);
    ASSERT_FALSE(g.r.empty());
    const auto best = std::min_element(g.l1.begin(), g.l1.end());
    EXPECT_EQ(g.argmin_r, g.r[static_cast<std::size_t>(best - g.l1.begin())]);
    EXPECT_EQ(g.z_at_argmin, g.z_imbalance[static_cast<std::size_t>(g.argmin_r - 1)]);
    EXPECT_EQ(g.z_min, *std::min_element(g.z_imbalance.begin(), g.z_imbalance.end()));
    StudyConfig cfg;
    cfg.n = 150;
    cfg.r_grid_max = 25;
    const StudyReport rep = run_study(Study::rscan_fig, 2, 8, cfg);
    EXPECT_TRUE(rep.find("kbal", "z_ratio_argmin_to_min", "mean"));
    EXPECT_GE(*rep.find("kbal", "z_ratio_argmin_to_min", "mean"), 1.0);
    EXPECT_THROW(parse_study("figure99"), Error);
}

TEST(Bootstrap, PercentileIntervalCoverageAtSmallScale) {
    // Constant unit effect, so every sample effect equals tau.
    const double tau = 1.0;
    int covered = 0, total = 0;
    for (std::uint64_t rep = 0; rep < 40; ++rep) {
        SimDraw s = dgp_logistic_1d(150, 500 + rep);
        std::mt19937_64 rng(900 + rep);
        std::normal_distribution<double> g;
        Vector y(s.data.n());
        for (Index i = 0; i < s.data.n(); ++i)
            y(i) = s.data.X(i, 0) + 0.5 * s.data.X(i, 0) * s.data.X(i, 0) + tau * s.data.D[static_cast<std::size_t>(i)] + g(rng);
        s.data.Y = y;
        try {
            const BootstrapResult b = bootstrap(s.data, {}, 50, rep, 4);
            ++total;
            if (b.ci95.first <= tau && tau <= b.ci95.second) ++covered;
        } catch (const InfeasibleError&) {
        }
    }
    ASSERT_GE(total, 30);
    const double cov = static_cast<double>(covered) / total;
    EXPECT_GE(cov, 0.80);
    EXPECT_LE(cov, 1.0);
}
