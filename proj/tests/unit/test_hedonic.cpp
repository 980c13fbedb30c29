#include <gtest/gtest.h>

#include "deepdemand/harness/panels.hpp"
#include "deepdemand/hedonic/index.hpp"

using namespace deepdemand;
using namespace deepdemand::hedonic;

namespace {

Tensor column(const std::vector<double>& v) { return Tensor(Shape{v.size(), 1}, v); }

GbtConfig quick() {
    GbtConfig c;
    c.trees = 60;
    c.max_depth = 4;
    c.learning_rate = 0.1;
    return c;
}

/// Tiny panel with hand prices; features are a single constant column.
HedonicPanel hand_panel(const std::vector<std::tuple<long long, int, double, double>>& rows) {
    HedonicPanel p;
    for (const auto& [a, m, price, q] : rows) {
        p.article.push_back(a);
        p.month.push_back(m);
        p.log_price.push_back(std::log(price));
        p.quantity.push_back(q);
    }
    p.features = Tensor(Shape{rows.size(), 1}, 0.0);
    return p;
}

}  // namespace

TEST(Gbt, PureNoiseTargetPredictsNearMean) {
    Rng rng = make_rng(1);
    std::vector<double> x(400), y(400);
    for (std::size_t i = 0; i < 400; ++i) {
        x[i] = uniform01(rng);
        y[i] = standard_normal(rng);
    }
    GbtConfig c = quick();
    c.min_split_gain = 20.0;
    const GbtEnsemble f = fit_gbt(column(x), y, c, 3);
    const double mean = std::accumulate(y.begin(), y.end(), 0.0) / 400.0;
    for (double p : f.predict(column(x))) EXPECT_NEAR(p, mean, 0.05);
}

TEST(Gbt, InterpolatesExactFunctionOfOneFeature) {
    std::vector<double> x(200), y(200);
    for (std::size_t i = 0; i < 200; ++i) {
        x[i] = static_cast<double>(i);
        y[i] = std::sin(0.1 * x[i]) + 0.01 * x[i];
    }
    GbtConfig c;
    c.trees = 300;
    c.max_depth = 8;
    c.min_leaf_rows = 1;
    c.feature_fraction = 1.0;
    c.learning_rate = 0.3;
    const GbtEnsemble f = fit_gbt(column(x), y, c, 1);
    const auto pred = f.predict(column(x));
    double ss = 0.0, st = 0.0;
    const double mean = std::accumulate(y.begin(), y.end(), 0.0) / 200.0;
    for (std::size_t i = 0; i < 200; ++i) {
        ss += (y[i] - pred[i]) * (y[i] - pred[i]);
        st += (y[i] - mean) * (y[i] - mean);
    }
    EXPECT_GT(1.0 - ss / st, 0.999);
}

TEST(Gbt, TrainingLossNeverIncreases) {
    Rng rng = make_rng(2);
    Tensor X(Shape{300, 3});
    std::vector<double> y(300);
    for (std::size_t i = 0; i < 300; ++i) {
        for (double& v : X.row(i)) v = standard_normal(rng);
        y[i] = X.at(i, 0) * X.at(i, 1) + 0.1 * standard_normal(rng);
    }
    const GbtEnsemble f = fit_gbt(X, y, quick(), 4);
    for (std::size_t k = 1; k < f.train_mse.size(); ++k) EXPECT_LE(f.train_mse[k], f.train_mse[k - 1] + 1e-12);
}

TEST(Gbt, ConstantTargetAndContracts) {
    std::vector<double> x(60, 1.0), y(60, 2.5);
    for (std::size_t i = 0; i < 60; ++i) x[i] = static_cast<double>(i);
    const GbtEnsemble f = fit_gbt(column(x), y, quick(), 1);
    EXPECT_TRUE(f.trees.empty());
    EXPECT_EQ(f.predict(std::vector<double>{3.0}), 2.5);
    EXPECT_THROW(fit_gbt(column(std::vector<double>(10, 0.0)), std::vector<double>(10, 0.0), quick(), 1), ContractError);
    EXPECT_THROW(f.predict(std::vector<double>{1.0, 2.0}), ShapeError);
}

TEST(Gbt, PredictionIsDeterministicAndSeesTheMonth) {
    harness::HedonicSimConfig cfg;
    cfg.months = 6;
    cfg.time_trend = 0.05;
    cfg.age_markdown = 0.0;
    const auto sim = harness::simulate_hedonic_panel(cfg, 5);
    const GbtEnsemble f = fit_surface(sim.panel, quick(), 6);
    const Tensor X = design(sim.panel);
    std::vector<double> row(X.row(0).begin(), X.row(0).end());
    const double a = f.predict(row), b = f.predict(row);
    EXPECT_EQ(a, b);
    row.back() = 1.0;
    const double early = f.predict(row);
    row.back() = 6.0;
    EXPECT_GT(f.predict(row), early + 0.1);
    const std::vector<double> v(X.row(0).begin(), X.row(0).end() - 1), h{6.0};
    EXPECT_EQ(predict_price(f, v, h), f.predict(row));
}

TEST(Gbt, GroupFoldsKeepArticlesTogether) {
    const std::vector<long long> g{1, 1, 2, 2, 3, 3, 4, 5, 6, 7};
    const auto folds = group_folds(g, 3, 9);
    EXPECT_EQ(folds[0], folds[1]);
    EXPECT_EQ(folds[2], folds[3]);
    EXPECT_EQ(folds[4], folds[5]);
}

TEST(Jevons, ConstantDoublingAndHandLink) {
    const double nan = std::nan("");
    EXPECT_EQ(jevons_index({{10, 20}, {10, 20}, {10, 20}}), (std::vector<double>{1, 1, 1}));
    const auto d = jevons_index({{10, 20}, {20, 40}});
    EXPECT_NEAR(d[1], 2.0, 1e-15);
    const auto h = jevons_index({{10, 20, 5, nan}, {11, 19, 6, 3}});
    EXPECT_NEAR(h[1], std::cbrt(1.1 * 0.95 * 1.2), 1e-15);
    std::vector<bool> gaps;
    const auto g = jevons_index({{10, nan}, {nan, 5}, {nan, 6}}, &gaps);
    EXPECT_TRUE(gaps[0]);
    EXPECT_FALSE(gaps[1]);
    EXPECT_NEAR(g[2], 1.2, 1e-15);
}

TEST(Fisher, HandInstanceAndIdentities) {
    // Two articles, observed prices used as the predictions.
    const HedonicPanel p = hand_panel({{1, 1, 10.0, 3.0}, {2, 1, 20.0, 1.0}, {1, 2, 12.0, 2.0}, {2, 2, 18.0, 4.0}});
    const auto s = detail::links_from_predictions(p, p.log_price);
    ASSERT_EQ(s.links.size(), 1u);
    const double L = (12.0 * 3 + 18.0 * 1) / (10.0 * 3 + 20.0 * 1);
    const double P = (12.0 * 2 + 18.0 * 4) / (10.0 * 2 + 20.0 * 4);
    EXPECT_NEAR(s.links[0].laspeyres, L, 1e-15);
    EXPECT_NEAR(s.links[0].paasche, P, 1e-15);
    EXPECT_NEAR(s.links[0].fisher, std::sqrt(L * P), 1e-15);
    EXPECT_GE(s.links[0].fisher, std::min(L, P));
    EXPECT_LE(s.links[0].fisher, std::max(L, P));
    EXPECT_EQ(s.fisher.front(), 1.0);
}

TEST(Fisher, SingleArticleAndIdenticalPredictions) {
    const HedonicPanel one = hand_panel({{1, 1, 10.0, 3.0}, {1, 2, 13.0, 5.0}});
    const auto s = detail::links_from_predictions(one, one.log_price);
    EXPECT_NEAR(s.links[0].laspeyres, 1.3, 1e-15);
    EXPECT_NEAR(s.links[0].paasche, 1.3, 1e-15);
    EXPECT_NEAR(s.links[0].fisher, 1.3, 1e-15);
    const std::vector<double> flat(2, std::log(10.0));
    EXPECT_EQ(detail::links_from_predictions(one, flat).links[0].fisher, 1.0);
}

TEST(Fisher, ZeroQuantityAndMissingMatchesAreGaps) {
    const HedonicPanel p = hand_panel({{1, 1, 10.0, 0.0}, {1, 2, 11.0, 2.0}, {2, 3, 9.0, 1.0}});
    const auto s = detail::links_from_predictions(p, p.log_price);
    ASSERT_EQ(s.links.size(), 2u);
    EXPECT_TRUE(s.links[0].gap);
    EXPECT_TRUE(s.links[1].gap);
    EXPECT_EQ(s.fisher.back(), 1.0);
    EXPECT_EQ(s.warnings.size(), 2u);
}

TEST(Conformal, StepUpRankByHand) {
    std::vector<double> r;
    for (int i = 1; i <= 10; ++i) r.push_back(i % 2 ? i : -i);
    EXPECT_EQ(conformal_band(r, 0.1), 10.0);
    EXPECT_EQ(conformal_band(r, 0.95), 1.0);
    EXPECT_THROW(conformal_band(std::vector<double>(5, 1.0), 0.1), ContractError);
    const PriceBand b = price_band(std::log(20.0), 0.1);
    EXPECT_NEAR(b.fair, 20.0, 1e-12);
    EXPECT_NEAR(b.upper / b.fair, b.fair / b.lower, 1e-12);
}

TEST(Conformal, MeanCoverageOnExchangeableData) {
    Rng rng = make_rng(13);
    const int trials = 300;
    double total = 0.0;
    for (int t = 0; t < trials; ++t) {
        std::vector<double> cal(200);
        for (double& v : cal) v = standard_normal(rng);
        const double hw = conformal_band(cal, 0.1);
        int hit = 0;
        for (int k = 0; k < 200; ++k) hit += std::abs(standard_normal(rng)) <= hw;
        total += hit / 200.0;
    }
    EXPECT_NEAR(total / trials, 0.9, 0.02);
    EXPECT_GE(total / trials, 0.89);
}

TEST(Ob, IdentitiesHoldExactly) {
    Rng rng = make_rng(3);
    Tensor X1(Shape{80, 2}), X2(Shape{70, 2});
    std::vector<double> y1(80), y2(70);
    for (std::size_t i = 0; i < 80; ++i) {
        for (double& v : X1.row(i)) v = standard_normal(rng);
        y1[i] = X1.at(i, 0) + 0.1 * standard_normal(rng);
    }
    for (std::size_t i = 0; i < 70; ++i) {
        for (double& v : X2.row(i)) v = standard_normal(rng) + 0.5;
        y2[i] = 0.8 * X2.at(i, 0) + 0.1 * standard_normal(rng);
    }
    const GbtEnsemble f1 = fit_gbt(X1, y1, quick(), 1), f2 = fit_gbt(X2, y2, quick(), 2);
    const ObResult r = ob_decompose(f1, f2, X1, y1, X2, y2);
    EXPECT_NEAR(r.total, r.composition + r.valuation + r.residual, 1e-12);
    EXPECT_EQ(ob_decompose(f1, f1, X1, y1, X2, y2).valuation, 0.0);
    EXPECT_EQ(ob_decompose(f1, f2, X1, y1, X1, y1).composition, 0.0);
}

TEST(TimeDummy, RecoversPlantedMonthEffects) {
    HedonicPanel p;
    const double month_effect[4] = {0.0, 0.1, -0.05, 0.2};
    const double cat_effect[3] = {0.0, 0.3, -0.2};
    long long id = 0;
    for (int m = 1; m <= 4; ++m)
        for (std::size_t c = 0; c < 3; ++c)
            for (int k = 0; k < 5; ++k) {
                p.article.push_back(id++);
                p.month.push_back(m);
                p.category.push_back(c);
                p.quantity.push_back(1.0);
                p.log_price.push_back(2.0 + cat_effect[c] + month_effect[m - 1]);
            }
    p.features = Tensor(Shape{p.rows(), 1}, 0.0);
    const TimeDummyResult r = time_dummy_index(p);
    for (int m = 0; m < 4; ++m) EXPECT_NEAR(r.effect[static_cast<std::size_t>(m)], month_effect[m], 1e-8);
    EXPECT_EQ(r.index.front(), 1.0);
    for (double& v : p.log_price) v = 2.0;
    for (double v : time_dummy_index(p).index) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(TimeDummy, CollinearCategoryIsDroppedAndReported) {
    // Category 1 appears only in month 2, so its dummy duplicates the month dummy.
    HedonicPanel p;
    for (int k = 0; k < 6; ++k) {
        p.article.push_back(k);
        p.month.push_back(k < 3 ? 1 : 2);
        p.category.push_back(k < 3 ? 0 : 1);
        p.quantity.push_back(1.0);
        p.log_price.push_back(k < 3 ? 1.0 : 1.5);
    }
    p.features = Tensor(Shape{6, 1}, 0.0);
    const TimeDummyResult r = time_dummy_index(p);
    EXPECT_EQ(r.dropped, std::vector<std::string>{"category_1"});
    EXPECT_NEAR(r.effect[1], 0.5, 1e-12);
}

TEST(PerPeriod, SingleMonthAndThinMonthFallback) {
    harness::HedonicSimConfig cfg;
    cfg.months = 1;
    cfg.lifespan = 1;
    cfg.cohort_size = 60;
    const auto one = harness::simulate_hedonic_panel(cfg, 2);
    const IndexSeries s = per_period_index(one.panel, quick(), 1);
    EXPECT_EQ(s.fisher, std::vector<double>{1.0});
    cfg.months = 3;
    cfg.lifespan = 2;
    cfg.cohort_size = 10;
    const auto thin = harness::simulate_hedonic_panel(cfg, 2);
    GbtConfig c = quick();
    c.min_rows = 10;
    const IndexSeries t = per_period_index(thin.panel, c, 1);
    EXPECT_FALSE(t.warnings.empty());
}

TEST(Composition, TurnoverBiasesJevonsButNotFisher) {
    harness::HedonicSimConfig cfg;
    cfg.months = 12;
    const auto sim = harness::simulate_hedonic_panel(cfg, 17);
    const IndexSeries s = fisher_chained(fit_surface(sim.panel, quick(), 3), sim.panel);
    const double jd = std::abs(s.jevons.back() - 1.0), fd = std::abs(s.fisher.back() - 1.0);
    EXPECT_GT(jd, 0.3);
    EXPECT_GT(jd, 5.0 * fd);
    for (const IndexLink& l : s.links) {
        EXPECT_NEAR(l.fisher, std::sqrt(l.laspeyres * l.paasche), 1e-15);
        EXPECT_GE(l.fisher, std::min(l.laspeyres, l.paasche) - 1e-15);
        EXPECT_LE(l.fisher, std::max(l.laspeyres, l.paasche) + 1e-15);
    }
}

namespace {

double mae(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t t = 0; t < a.size(); ++t) s += std::abs(a[t] - b[t]);
    return s / static_cast<double>(a.size());
}

}  // namespace

TEST(PerPeriod, AgreesWithPooledOnStationaryData) {
    harness::HedonicSimConfig cfg;
    cfg.months = 8;
    cfg.cohort_size = 30;
    cfg.age_markdown = 0.0;
    const auto sim = harness::simulate_hedonic_panel(cfg, 31);
    const IndexSeries pooled = fisher_chained(fit_surface(sim.panel, quick(), 1), sim.panel);
    const IndexSeries pp = per_period_index(sim.panel, quick(), 1);
    EXPECT_TRUE(pp.warnings.empty());
    EXPECT_LT(mae(pooled.fisher, pp.fisher), 0.03);
}

TEST(PerPeriod, TracksDriftingCoefficientsBetterThanPooled) {
    harness::HedonicSimConfig cfg;
    cfg.months = 8;
    cfg.cohort_size = 30;
    cfg.age_markdown = 0.0;
    cfg.cohort_size = 60;
    cfg.coefficient_drift = 0.2;
    cfg.noise_sd = 0.02;
    const auto sim = harness::simulate_hedonic_panel(cfg, 32);
    const IndexSeries truth = detail::links_from_predictions(sim.panel, sim.true_log_price);
    const IndexSeries pooled = fisher_chained(fit_surface(sim.panel, quick(), 1), sim.panel);
    const IndexSeries pp = per_period_index(sim.panel, quick(), 1);
    EXPECT_LT(mae(pp.fisher, truth.fisher), mae(pooled.fisher, truth.fisher));
}

TEST(Pooled, ConformalBandBracketsTheChain) {
    harness::HedonicSimConfig cfg;
    cfg.months = 6;
    cfg.cohort_size = 20;
    const auto sim = harness::simulate_hedonic_panel(cfg, 33);
    PooledIndexConfig c;
    c.gbt = quick();
    c.stress_draws = 50;
    const IndexSeries s = pooled_index(sim.panel, c, 4);
    EXPECT_GT(s.half_width, 0.0);
    ASSERT_EQ(s.lower.size(), s.fisher.size());
    EXPECT_EQ(s.lower.front(), 1.0);
    for (std::size_t t = 1; t < s.fisher.size(); ++t) EXPECT_LT(s.lower[t], s.upper[t]);
    const IndexSeries again = pooled_index(sim.panel, c, 4);
    EXPECT_EQ(again.fisher, s.fisher);
    EXPECT_EQ(again.upper, s.upper);
}
