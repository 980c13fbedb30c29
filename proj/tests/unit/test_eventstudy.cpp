#include <gtest/gtest.h>

#include "deepdemand/eventstudy/effects.hpp"
#include "deepdemand/harness/panels.hpp"

using namespace deepdemand;
using namespace deepdemand::eventstudy;

namespace {

Tensor blobs(std::size_t per_blob, std::size_t k, double sd, std::uint64_t seed, std::vector<std::size_t>* truth = nullptr) {
    Rng rng = make_rng(seed);
    Tensor X(Shape{per_blob * k, 2});
    for (std::size_t b = 0; b < k; ++b)
        for (std::size_t i = 0; i < per_blob; ++i) {
            const std::size_t r = b * per_blob + i;
            X.at(r, 0) = 10.0 * std::cos(2.0 * M_PI * static_cast<double>(b) / static_cast<double>(k)) + sd * standard_normal(rng);
            X.at(r, 1) = 10.0 * std::sin(2.0 * M_PI * static_cast<double>(b) / static_cast<double>(k)) + sd * standard_normal(rng);
            if (truth) truth->push_back(b);
        }
    return X;
}

VectorXd as_vector(const std::vector<double>& v) {
    return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

TEST(Poisson, InterceptOnlyIsLogMean) {
    const VectorXd y = (VectorXd(6) << 0, 3, 1, 4, 2, 7).finished();
    const QmleFit f = poisson_qmle(MatrixXd::Ones(6, 1), y);
    ASSERT_TRUE(f.converged);
    EXPECT_NEAR(f.beta(0), std::log(17.0 / 6.0), 1e-12);
}

TEST(Poisson, SaturatedTwoGroupRecoversLogRatio) {
    MatrixXd X(8, 2);
    VectorXd y(8);
    const double counts[8] = {2, 4, 3, 5, 10, 12, 9, 11};
    for (int t = 0; t < 8; ++t) {
        X(t, 0) = 1.0;
        X(t, 1) = t >= 4 ? 1.0 : 0.0;
        y(t) = counts[t];
    }
    const QmleFit f = poisson_qmle(X, y);
    EXPECT_NEAR(f.beta(0), std::log(14.0 / 4.0), 1e-12);
    EXPECT_NEAR(f.beta(1), std::log((42.0 / 4.0) / (14.0 / 4.0)), 1e-12);
}

TEST(Poisson, FirstOrderConditionAndSumPreservation) {
    harness::EventSimConfig cfg;
    cfg.days = 400;
    const auto sim = harness::simulate_event_panel(cfg, 3);
    const Design d = build_design(sim.panel);
    const VectorXd y = as_vector(sim.panel.counts[0]);
    const QmleFit f = poisson_qmle(d.X, y);
    ASSERT_TRUE(f.converged);
    const VectorXd mu = (d.X * f.beta).array().exp().matrix();
    EXPECT_LT((d.X.transpose() * (y - mu)).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_NEAR(mu.sum(), y.sum(), 1e-8 * y.sum());
    const MatrixXd asym = f.covariance - f.covariance.transpose();
    EXPECT_LT(asym.cwiseAbs().maxCoeff(), 1e-12);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(f.covariance);
    EXPECT_GT(es.eigenvalues().minCoeff(), -1e-10);
}

TEST(Poisson, ZeroLagEqualsWhiteSandwich) {
    Rng rng = make_rng(9);
    MatrixXd X(50, 2);
    VectorXd y(50);
    for (int t = 0; t < 50; ++t) {
        X(t, 0) = 1.0;
        X(t, 1) = standard_normal(rng);
        y(t) = std::poisson_distribution<int>(std::exp(1.0 + 0.3 * X(t, 1)))(rng);
    }
    const QmleFit f = poisson_qmle(X, y);
    const VectorXd mu = (X * f.beta).array().exp().matrix();
    MatrixXd A = MatrixXd::Zero(2, 2), B = MatrixXd::Zero(2, 2);
    for (int t = 0; t < 50; ++t) {
        A += mu(t) * X.row(t).transpose() * X.row(t);
        B += (y(t) - mu(t)) * (y(t) - mu(t)) * X.row(t).transpose() * X.row(t);
    }
    const MatrixXd white = A.inverse() * B * A.inverse();
    EXPECT_LT((newey_west_cov(X, y, f.beta, 0) - white).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((f.covariance - white).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_THROW(newey_west_cov(X, y, f.beta, 50), ContractError);
}

TEST(Poisson, SeparatedPeriodIsPinnedAndFlagged) {
    MatrixXd X(10, 2);
    VectorXd y(10);
    for (int t = 0; t < 10; ++t) {
        X(t, 0) = 1.0;
        X(t, 1) = t >= 7 ? 1.0 : 0.0;
        y(t) = t >= 7 ? 0.0 : 5.0;
    }
    const QmleFit f = poisson_qmle(X, y);
    EXPECT_TRUE(f.separated[1]);
    EXPECT_EQ(f.beta(1), kSeparationFloor);
    EXPECT_TRUE(std::isinf(f.se(1)));
    EXPECT_NEAR(f.beta(0), std::log(5.0), 1e-8);
}

TEST(Poisson, CollinearColumnIsDropped) {
    MatrixXd X(6, 3);
    VectorXd y(6);
    for (int t = 0; t < 6; ++t) {
        X(t, 0) = 1.0;
        X(t, 1) = t % 2;
        X(t, 2) = 2.0 * (t % 2);
        y(t) = 1 + t;
    }
    const QmleFit f = poisson_qmle(X, y);
    EXPECT_FALSE(f.dropped[1]);
    EXPECT_TRUE(f.dropped[2]);
    EXPECT_EQ(f.beta(2), 0.0);
}

TEST(Poisson, RejectsNonIntegerCounts) {
    EXPECT_THROW(poisson_qmle(MatrixXd::Ones(2, 1), (VectorXd(2) << 1.5, 2.0).finished()), DataError);
}

TEST(Poisson, EffectPercentMapping) {
    EXPECT_EQ(effect_pct(0.0), 0.0);
    EXPECT_NEAR(effect_pct(std::log(2.0)), 100.0, 1e-12);
    EXPECT_NEAR(effect_pct(-0.478), -38.0, 0.05);
}

TEST(Poisson, HacWidensIntervalsUnderSerialCorrelation) {
    harness::EventSimConfig cfg;
    cfg.ar_rho = 0.7;
    cfg.ar_sd = 0.25;
    double wider = 0.0;
    const int reps = 10;
    for (int r = 0; r < reps; ++r) {
        const auto sim = harness::simulate_event_panel(cfg, 100 + static_cast<std::uint64_t>(r));
        const Design d = build_design(sim.panel);
        const VectorXd y = as_vector(sim.panel.counts[0]);
        QmleOptions o0, o7;
        o7.hac_lag = 7;
        const Eigen::Index c = d.column("period_Lockdown");
        wider += poisson_qmle(d.X, y, o7).se(c) > poisson_qmle(d.X, y, o0).se(c);
    }
    EXPECT_GE(wider, reps - 1);
}

TEST(Poisson, WhiteNoiseHacCloseToRobust) {
    harness::EventSimConfig cfg;
    cfg.ar_rho = 0.0;
    cfg.ar_sd = 0.0;
    double ratio = 0.0;
    const int reps = 10;
    for (int r = 0; r < reps; ++r) {
        const auto sim = harness::simulate_event_panel(cfg, 300 + static_cast<std::uint64_t>(r));
        const Design d = build_design(sim.panel);
        const VectorXd y = as_vector(sim.panel.counts[0]);
        QmleOptions o0, o7;
        o7.hac_lag = 7;
        const Eigen::Index c = d.column("period_Lockdown");
        ratio += poisson_qmle(d.X, y, o7).se(c) / poisson_qmle(d.X, y, o0).se(c);
    }
    EXPECT_NEAR(ratio / reps, 1.0, 0.15);
}

TEST(Fdr, StepUpExamples) {
    const FdrResult a = bh_fdr({0.0, 0.0, 0.0}, 0.05);
    EXPECT_TRUE(a.rejected[0] && a.rejected[1] && a.rejected[2]);
    EXPECT_TRUE(bh_fdr({0.05}, 0.05).rejected[0]);
    EXPECT_FALSE(bh_fdr({0.051}, 0.05).rejected[0]);
    const FdrResult c = bh_fdr({0.01, 0.02, 0.04}, 0.05);
    EXPECT_TRUE(c.rejected[0] && c.rejected[1] && c.rejected[2]);
    EXPECT_NEAR(c.adjusted[0], 0.03, 1e-15);
    EXPECT_NEAR(c.adjusted[1], 0.03, 1e-15);
    EXPECT_NEAR(c.adjusted[2], 0.04, 1e-15);
}

TEST(Fdr, AdjustedValuesAreMonotoneAndCapped) {
    const FdrResult r = bh_fdr({0.9, 0.001, 0.5, 0.03}, 0.05);
    EXPECT_NEAR(r.adjusted[1], 0.004, 1e-15);
    EXPECT_NEAR(r.adjusted[3], 0.06, 1e-15);
    EXPECT_NEAR(r.adjusted[2], 0.5 * 4 / 3, 1e-15);
    EXPECT_LE(r.adjusted[0], 1.0);
    EXPECT_TRUE(r.rejected[1]);
    EXPECT_FALSE(r.rejected[3]);
}

TEST(Fdr, Stars) {
    EXPECT_STREQ(significance_stars(0.0005), "***");
    EXPECT_STREQ(significance_stars(0.005), "**");
    EXPECT_STREQ(significance_stars(0.03), "*");
    EXPECT_STREQ(significance_stars(0.2), "");
}

TEST(Design, ColumnsAndIndicators) {
    harness::EventSimConfig cfg;
    const auto sim = harness::simulate_event_panel(cfg, 1);
    const Design d = build_design(sim.panel);
    EXPECT_EQ(d.names.size(), 2u + 11u + 4u + 6u + 1u);
    EXPECT_DOUBLE_EQ(d.X(0, 1), 0.0);
    EXPECT_DOUBLE_EQ(d.X(d.X.rows() - 1, 1), 1.0);
    for (Eigen::Index t = 0; t < d.X.rows(); ++t) EXPECT_LE(d.X.row(t).segment(13, 4).sum(), 1.0);
    EXPECT_GT(d.X.col(d.column("period_Lockdown")).sum(), 60.0);
}

TEST(Effects, CellFitEqualsDirectFit) {
    harness::EventSimConfig cfg;
    cfg.units = 2;
    const auto sim = harness::simulate_event_panel(cfg, 4);
    const auto eff = period_effects(sim.panel, 7, 0.05);
    const Design d = build_design(sim.panel);
    QmleOptions o;
    o.hac_lag = 7;
    const QmleFit f = poisson_qmle(d.X, as_vector(sim.panel.counts[1]), o);
    const auto it = std::find_if(eff.begin(), eff.end(), [](const PeriodEffect& e) { return e.unit == "unit_0001" && e.period == "Lockdown"; });
    ASSERT_NE(it, eff.end());
    EXPECT_EQ(it->kappa, f.beta(d.column("period_Lockdown")));
    EXPECT_EQ(it->se, f.se(d.column("period_Lockdown")));
}

TEST(Kmeans, KEqualsNHasZeroInertia) {
    const Tensor X = blobs(3, 2, 1.0, 5);
    EXPECT_NEAR(kmeans(X, 6, 1).inertia, 0.0, 1e-20);
}

TEST(Kmeans, RecoversSeparatedBlobsDeterministically) {
    std::vector<std::size_t> truth;
    const Tensor X = blobs(50, 2, 0.5, 6, &truth);
    const Partition a = kmeans(X, 2, 3), b = kmeans(X, 2, 3);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_DOUBLE_EQ(ari(a.labels, truth), 1.0);
    EXPECT_GT(silhouette(X, a.labels), 0.9);
}

TEST(Kmeans, RejectsTooManyClusters) {
    Tensor X(Shape{4, 1}, std::vector<double>{1, 1, 2, 2});
    EXPECT_THROW(kmeans(X, 3, 1), ContractError);
}

TEST(Silhouette, HandInstanceOnALine) {
    Tensor X(Shape{4, 1}, std::vector<double>{0, 1, 4, 5});
    const double s0 = (4.5 - 1.0) / 4.5, s1 = (3.5 - 1.0) / 3.5;
    EXPECT_NEAR(silhouette(X, {0, 0, 1, 1}), (s0 + s1) / 2.0, 1e-15);
}

TEST(Silhouette, IdenticalPointsScoreZeroAndSingleClusterThrows) {
    Tensor X(Shape{4, 2}, 1.0);
    EXPECT_EQ(silhouette(X, {0, 1, 0, 1}), 0.0);
    EXPECT_THROW(silhouette(X, {0, 0, 0, 0}), ContractError);
}

TEST(PartitionAgreement, HandContingency) {
    const std::vector<std::size_t> a{0, 0, 0, 1, 1, 1}, b{0, 0, 1, 0, 1, 1};
    EXPECT_NEAR(ari(a, b), (2.0 - 36.0 / 15.0) / (6.0 - 36.0 / 15.0), 1e-15);
    const double mi = (2.0 / 3.0) * std::log(4.0 / 3.0) + (1.0 / 3.0) * std::log(2.0 / 3.0);
    EXPECT_NEAR(nmi(a, b), mi / std::log(2.0), 1e-15);
    EXPECT_DOUBLE_EQ(ari(a, b), ari(b, a));
}

TEST(PartitionAgreement, IdenticalAndRandom) {
    Rng rng = make_rng(12);
    std::vector<std::size_t> a(1000), b(1000);
    for (auto& v : a) v = rng() % 5;
    for (auto& v : b) v = rng() % 5;
    EXPECT_DOUBLE_EQ(ari(a, a), 1.0);
    EXPECT_NEAR(nmi(a, a), 1.0, 1e-12);
    EXPECT_NEAR(ari(a, b), 0.0, 0.02);
    EXPECT_THROW(ari(a, std::vector<std::size_t>(3)), ContractError);
}

TEST(KSelection, PicksPlantedKAndAppliesFilter) {
    const Tensor X = blobs(30, 4, 0.5, 8);
    Tensor counts(Shape{X.rows(), 10}, 1.0);
    const KSelection s = k_selection(X, {2, 4, 8}, counts, 0.0, 0, 10, 1);
    EXPECT_EQ(s.chosen, 4u);
    // Each of 8 clusters of ~15 points sums to ~15 transactions a day; 25 fails them but not k = 2 or 4.
    const KSelection f = k_selection(X, {2, 4, 8}, counts, 25.0, 0, 10, 1);
    EXPECT_FALSE(f.candidates[2].viable);
    EXPECT_EQ(f.chosen, 4u);
    EXPECT_THROW(k_selection(X, {2, 4}, counts, 1e9, 0, 10, 1), NumericalError);
    const KSelection one = k_selection(X, {2, 8}, counts, 25.0, 0, 10, 1);
    EXPECT_EQ(one.chosen, 2u);
}

TEST(SeedStability, SingleClusterHasEqualRanges) {
    const Tensor X = blobs(10, 2, 0.5, 9);
    const StabilitySummary s = seed_stability(X, 1, 5, 3, [](const Partition&) { return std::vector<double>{-20.0}; });
    for (double r : s.ranges) EXPECT_EQ(r, s.ranges.front());
}

TEST(SeedStability, RecoversPlantedRegimeRange) {
    harness::EventSimConfig cfg;
    const auto sim = harness::simulate_clustered_events(40, 4, 8, {-0.2, -0.8}, 0.1, cfg, 21);
    const StabilitySummary s = seed_stability(sim.embeddings, 4, 5, 7, [&](const Partition& p) {
        return cluster_effects(sim.events.panel, p, "Lockdown");
    });
    for (double r : s.ranges) EXPECT_NEAR(r, sim.planted_range, 0.25 * sim.planted_range);
}
