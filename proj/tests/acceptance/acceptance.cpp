// Acceptance suite: one line per criterion, PASS or FAIL, with the measured quantities.
// Usage: acceptance [criterion numbers...]   (no arguments runs all)

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "deepdemand/counterfactual.hpp"
#include "deepdemand/eventstudy/cluster.hpp"
#include "deepdemand/eventstudy/effects.hpp"
#include "deepdemand/harness/panels.hpp"
#include "deepdemand/harness/pipeline.hpp"
#include "deepdemand/harness/sim.hpp"
#include "deepdemand/hedonic/index.hpp"
#include "deepdemand/market.hpp"
#include "deepdemand/threetower.hpp"
#include "test_support.hpp"

using namespace deepdemand;
using market::MatrixXd;
using market::VectorXd;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string num(double v, int digits = 4) {
    std::ostringstream s;
    s.precision(digits);
    s << v;
    return s.str();
}

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

VectorXd week_prices(const demand::ChoicePanel& p, std::size_t t) {
    VectorXd v(static_cast<Eigen::Index>(p.item_count()));
    for (std::size_t j = 0; j < p.item_count(); ++j) v(static_cast<Eigen::Index>(j)) = p.prices.at(j, t);
    return v;
}

/// Column-wise spread (max - min) of off-diagonal cross-elasticities, minimized or maximized over columns.
std::pair<double, double> cross_spread(const MatrixXd& e) {
    double lo_spread = INFINITY, hi_spread = 0.0;
    for (Eigen::Index l = 0; l < e.cols(); ++l) {
        double lo = INFINITY, hi = -INFINITY;
        for (Eigen::Index j = 0; j < e.rows(); ++j)
            if (j != l) {
                lo = std::min(lo, e(j, l));
                hi = std::max(hi, e(j, l));
            }
        lo_spread = std::min(lo_spread, hi - lo);
        hi_spread = std::max(hi_spread, hi - lo);
    }
    return {lo_spread, hi_spread};
}

harness::SimConfig small_market() {
    harness::SimConfig sc;
    sc.consumers = 300;
    sc.items = 40;
    sc.weeks = 10;
    sc.user_dim = 8;
    sc.item_dim = 8;
    sc.taste_rank = 4;
    sc.categories = 4;
    return sc;
}

tower::Catalog random_catalog(std::size_t I, std::size_t J, std::size_t item_dim, std::size_t user_dim, int categories,
                              std::uint64_t seed) {
    Rng rng = make_rng(seed, 0, 0xca7);
    tower::Catalog c;
    c.item_features = numcore::Tensor(numcore::Shape{J, item_dim});
    c.user_features = numcore::Tensor(numcore::Shape{I, user_dim});
    for (double& v : c.item_features.values()) v = standard_normal(rng);
    for (double& v : c.user_features.values()) v = standard_normal(rng);
    for (std::size_t j = 0; j < J; ++j) {
        c.category.push_back(static_cast<int>(j % static_cast<std::size_t>(categories)));
        c.log_ref_price.push_back(std::log(5.0 + 20.0 * uniform01(rng)));
    }
    return c;
}


/// Runs body(seed) on successive seeds until `count` instances succeed. Degenerate random draws (a dead ReLU layer
/// giving a zero embedding, a zero taste vector) raise NumericalError and are skipped.
std::size_t run_instances(std::size_t count, std::uint64_t first, std::size_t& skipped,
                          const std::function<void(std::uint64_t)>& body) {
    std::size_t done = 0;
    for (std::uint64_t s = first; done < count; ++s) {
        try {
            body(s);
            ++done;
        } catch (const NumericalError&) {
            ++skipped;
            if (skipped > 10 * count) throw;
        }
    }
    return done;
}

// ---------------------------------------------------------------------------------------------

Outcome gradient_correctness() {
    const auto t0 = Clock::now();
    double worst_mlp = 0.0, worst_demand = 0.0, worst_tower = 0.0;
    std::size_t nets = 0, skipped = 0;
    const numcore::Activation acts[] = {numcore::Activation::tanh, numcore::Activation::softplus, numcore::Activation::identity,
                                        numcore::Activation::relu};
    nets += run_instances(40, 0, skipped, [&](std::uint64_t s) {
        Rng rng = make_rng(s, 0, 0x9a);
        const std::size_t depth = 1 + s % 3;
        std::vector<std::size_t> widths{2 + rng() % 4};
        std::vector<numcore::Activation> a;
        for (std::size_t d = 0; d < depth; ++d) {
            widths.push_back(d + 1 == depth ? 1 + rng() % 3 : 2 + rng() % 5);
            a.push_back(acts[(s + d) % 4]);
        }
        numcore::Mlp net = numcore::Mlp::make(widths, a, rng);
        numcore::Tensor x(numcore::Shape{4, widths[0]});
        for (double& v : x.values()) v = standard_normal(rng);
        auto loss = [&] {
            double t = 0.0;
            const numcore::Tensor y = net.forward(x);
            for (double v : y.values()) t += v * v + v;
            return t;
        };
        auto params = net.parameters();
        numcore::zero_grads(params);
        numcore::Graph g;
        numcore::Var y = net.forward(g, g.constant(x));
        g.backward(numcore::sum(numcore::add(numcore::square(y), y)));
        worst_mlp = std::max(worst_mlp, testsupport::max_fd_error(params, loss));
    });
    // Demand: every combination of classes, alpha network and taste/seasonal terms.
    nets += run_instances(40, 0, skipped, [&](std::uint64_t s) {
        const std::size_t classes = 1 + s % 2;
        const bool alpha_net = (s / 2) % 2 == 0, taste = (s / 4) % 2 == 0;
        auto panel = testsupport::random_panel(6, 4, 1, 4, 3, 1000 + s);
        auto model = testsupport::random_model(testsupport::small_spec(classes, 4, 3, alpha_net, taste), 2000 + s);
        model.outside_utility = 0.3;
        std::vector<std::vector<double>> q(classes, std::vector<double>(6, 1.0));
        if (classes == 2) {
            // One event per consumer, so the posterior-weighted surrogate has the marginal score as gradient.
            std::vector<std::vector<double>> ll;
            testsupport::em_surrogate(model, panel, nullptr, &ll);
            for (std::size_t i = 0; i < 6; ++i) {
                const double a = model.weights[0] * std::exp(ll[0][i]), b = model.weights[1] * std::exp(ll[1][i]);
                q[0][i] = a / (a + b);
                q[1][i] = b / (a + b);
            }
        }
        model.outside_utility = demand::kNegInf;
        testsupport::em_surrogate(model, panel, &q);
        worst_demand = std::max(worst_demand, testsupport::max_fd_error(model.parameters(),
                                                                        [&] { return -demand::log_likelihood(model, panel); }));
    });
    // Three-tower batch InfoNCE.
    nets += run_instances(20, 0, skipped, [&](std::uint64_t s) {
        const tower::Catalog cat = random_catalog(4, 6, 3, 4, 2, 3000 + s);
        tower::TowerConfig cfg;
        cfg.item_dim = 3;
        cfg.user_dim = 4;
        cfg.emb_dim = 3 + s % 3;
        cfg.hidden = 4 + s % 4;
        cfg.price_hidden = 2 + s % 2;
        cfg.temperature = 0.3 + 0.1 * static_cast<double>(s % 5);
        Rng rng = make_rng(4000 + s);
        tower::EmbeddingModel model = tower::make_model(cfg, rng);
        std::vector<tower::PurchaseRecord> recs;
        std::vector<std::vector<std::size_t>> negs;
        for (std::size_t b = 0; b < 4; ++b) {
            const std::size_t item = (b + s) % 6;
            recs.push_back({b, item, cat.category[item]});
            std::vector<std::size_t> n;
            for (std::size_t j = 0; j < 6; ++j)
                if (j != item && cat.category[j] == cat.category[item]) n.push_back(j);
            negs.push_back(n);
        }
        auto plain = [&] {
            double t = 0.0;
            for (std::size_t b = 0; b < recs.size(); ++b) t += tower::infonce_loss(model, cat, recs[b], negs[b]);
            return t / static_cast<double>(recs.size());
        };
        auto params = model.parameters();
        numcore::zero_grads(params);
        numcore::Graph g;
        std::vector<std::size_t> users, all(6);
        std::iota(all.begin(), all.end(), std::size_t{0});
        std::vector<std::vector<std::size_t>> cand;
        for (std::size_t b = 0; b < recs.size(); ++b) {
            users.push_back(recs[b].consumer);
            cand.push_back({recs[b].item});
            cand.back().insert(cand.back().end(), negs[b].begin(), negs[b].end());
        }
        numcore::Var U = numcore::row_normalize(
            model.user_tower.forward(g, g.constant(tower::detail::select_rows(cat.user_features, users))));
        numcore::Var V = numcore::row_normalize(model.item_tower.forward(g, g.constant(cat.item_features)));
        numcore::Var P = model.price_tower.forward(g, g.constant(tower::detail::price_column(cat.log_ref_price, all)));
        g.backward(tower::detail::batch_infonce(U, V, P, cand, cfg.temperature));
        worst_tower = std::max(worst_tower, testsupport::max_fd_error(params, plain));
    });
    const double worst = std::max({worst_mlp, worst_demand, worst_tower});
    const double secs = seconds_since(t0);
    return {worst < 1e-5 && secs < 30.0 && nets == 100,
            std::to_string(nets) + " nets (" + std::to_string(skipped) + " degenerate draws resampled), max rel err " + num(worst, 3) + " (mlp " + num(worst_mlp, 3) + ", demand " +
                num(worst_demand, 3) + ", tower " + num(worst_tower, 3) + "), " + num(secs, 3) + " s"};
}

Outcome infonce_equals_mnl() {
    double worst = 0.0;
    std::size_t done = 0, skipped = 0;
    done += run_instances(20, 0, skipped, [&](std::uint64_t s) {
        const std::size_t J = 6 + s % 7;
        const tower::Catalog cat = random_catalog(5, J, 4, 3, 1 + static_cast<int>(s % 3), 500 + s);
        tower::TowerConfig cfg;
        cfg.item_dim = 4;
        cfg.user_dim = 3;
        cfg.emb_dim = 5;
        cfg.hidden = 7;
        cfg.temperature = 0.05 + 0.05 * static_cast<double>(s % 4);
        Rng rng = make_rng(600 + s);
        tower::EmbeddingModel model = tower::make_model(cfg, rng);
        for (numcore::Parameter* p : model.price_tower.parameters()) for (double& v : p->value.values()) v = 0.0;
        const std::size_t u = s % 5, item = (3 * s) % J;
        std::vector<std::size_t> negs, set{item};
        for (std::size_t j = 0; j < J; ++j)
            if (j != item && cat.category[j] == cat.category[item]) negs.push_back(j), set.push_back(j);
        const double loss = tower::infonce_loss(model, cat, {u, item, cat.category[item]}, negs);
        // Plain logit with utilities d.v / tau over the category; price term off.
        auto unit = [](std::vector<double> v) {
            long double n = 0;
            for (double x : v) n += static_cast<long double>(x) * x;
            for (double& x : v) x = static_cast<double>(x / std::sqrt(n));
            return v;
        };
        const numcore::Tensor all_u = model.user_tower.forward(cat.user_features);
        const numcore::Tensor all_v = model.item_tower.forward(cat.item_features);
        const auto d = unit(std::vector<double>(all_u.row(u).begin(), all_u.row(u).end()));
        std::vector<long double> util;
        for (std::size_t j : set) {
            const auto v = unit(std::vector<double>(all_v.row(j).begin(), all_v.row(j).end()));
            long double dot = 0;
            for (std::size_t k = 0; k < d.size(); ++k) dot += static_cast<long double>(d[k]) * v[k];
            util.push_back(dot / cfg.temperature);
        }
        long double z = 0;
        for (long double x : util) z += std::exp(x);
        const double nll = static_cast<double>(-(util[0] - std::log(z)));
        worst = std::max(worst, std::abs(loss - nll));
    });
    return {worst < 1e-10 && done == 20, std::to_string(done) + " instances, max |InfoNCE - MNL NLL| = " + num(worst, 3)};
}

Outcome parameter_recovery() {
    const auto t0 = Clock::now();
    const int seeds = 5;
    double est1 = 0, est2 = 0, tru1 = 0, tru2 = 0, est_pi = 0, tru_pi = 0;
    std::string per_seed;
    for (int s = 1; s <= seeds; ++s) {
        harness::SimConfig sc;  // I = 2000, J = 200, T = 30
        const auto sim = harness::simulate_market(sc, static_cast<std::uint64_t>(s));
        demand::ChoicePanel p = sim.panel;
        p.cf_residual = demand::control_function_residual(p.items, demand::mean_log_prices(p), static_cast<std::uint64_t>(s));
        demand::FitConfig fc;
        const auto r = demand::em_fit(p, fc, 100 + static_cast<std::uint64_t>(s));
        est1 += r.report.alpha_bar[0] / seeds;
        est2 += r.report.alpha_bar[1] / seeds;
        est_pi += r.report.pi1 / seeds;
        tru1 += sim.truth.alpha_bar[0] / seeds;
        tru2 += sim.truth.alpha_bar[1] / seeds;
        tru_pi += sim.truth.pi1 / seeds;
        per_seed += (s > 1 ? "; " : "") + num(r.report.alpha_bar[0], 3) + "/" + num(r.report.alpha_bar[1], 3) + "/" +
                    num(r.report.pi1, 3);
    }
    const double e1 = std::abs(est1 / tru1 - 1.0), e2 = std::abs(est2 / tru2 - 1.0), ep = std::abs(est_pi - tru_pi);
    const double secs = seconds_since(t0);
    return {e1 < 0.10 && e2 < 0.10 && ep < 0.05 && secs < 600.0,
            "alpha1 " + num(est1) + " vs " + num(tru1) + " (" + num(100 * e1, 3) + "%), alpha2 " + num(est2) + " vs " +
                num(tru2) + " (" + num(100 * e2, 3) + "%), pi1 " + num(est_pi) + " vs " + num(tru_pi) + " [per seed " +
                per_seed + "], " + num(secs, 3) + " s"};
}

Outcome jacobian_correctness() {
    double worst = 0.0;
    std::size_t done = 0, skipped = 0;
    done += run_instances(10, 0, skipped, [&](std::uint64_t s) {
        const std::size_t classes = 1 + s % 2;
        auto panel = testsupport::random_panel(5, 3, 2, 4, 3, 70 + s);
        auto model = testsupport::random_model(testsupport::small_spec(classes, 4, 3), 80 + s);
        model.outside_utility = 0.5;
        const std::size_t t = s % 2;
        const auto d = market::share_derivatives(market::make_context(model, panel, t), week_prices(panel, t));
        auto mean_share = [&](std::size_t j) {
            const demand::ModelCache mc = demand::build_cache(model, panel);
            double v = 0.0;
            for (std::size_t i = 0; i < 5; ++i) v += demand::mixture_share(mc, panel, i, j, t);
            return v / 5.0;
        };
        for (std::size_t l = 0; l < 3; ++l) {
            const double saved = panel.prices.at(l, t);
            for (std::size_t j = 0; j < 3; ++j) {
                const double fd = testsupport::central_difference(
                    [&](double x) {
                        panel.prices.at(l, t) = x;
                        return mean_share(j);
                    },
                    saved, 1e-5);
                panel.prices.at(l, t) = saved;
                worst = std::max(worst, std::abs(fd - d.jacobian(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(l))));
            }
        }
    });
    return {worst < 1e-6 && done == 10, std::to_string(done) + " instances (J=3, I=5, K=1,2), max abs error " + num(worst, 3)};
}

Outcome supply_round_trip() {
    double worst = 0.0;
    bool all_converged = true;
    for (std::uint64_t s = 0; s < 6; ++s) {
        auto panel = testsupport::random_panel(20, 4, 1, 4, 3, 31 + s);
        auto model = testsupport::random_model(testsupport::small_spec(1 + s % 2, 4, 3), 9 + s);
        model.outside_utility = 0.0;
        const auto ctx = market::make_context(model, panel, 0);
        Rng rng = make_rng(s, 0, 0xc057);
        VectorXd mc(4);
        for (Eigen::Index j = 0; j < 4; ++j) mc(j) = 2.0 + 6.0 * uniform01(rng);
        for (const MatrixXd& omega : {market::ownership_identity(4), market::ownership_monopolist(4)}) {
            const auto eq = market::solve_bertrand_nash(ctx, mc, omega, week_prices(panel, 0));
            all_converged = all_converged && eq.converged;
            const auto d = market::share_derivatives(ctx, eq.prices);
            const auto sup = market::invert_markups(d.shares, d.jacobian, eq.prices, omega);
            worst = std::max(worst, (sup.marginal_cost - mc).cwiseAbs().maxCoeff());
        }
    }
    // Single product: Lerner = 1 / |own elasticity|.
    double lerner_gap = 0.0;
    for (double alpha : {-0.05, -0.2, -0.7})
        for (double price : {3.0, 12.0, 40.0}) {
            MatrixXd base(3, 1);
            base << 1.5, 0.5, -0.2;
            const auto ctx = market::MarketContext::from_primitives({1.0}, {VectorXd::Constant(3, alpha)}, {base}, 0.0);
            const VectorXd p = VectorXd::Constant(1, price);
            const auto d = market::share_derivatives(ctx, p);
            const auto sup = market::invert_markups(d.shares, d.jacobian, p, market::ownership_identity(1));
            const MatrixXd e = market::elasticity_matrix(d.shares, d.jacobian, p);
            lerner_gap = std::max(lerner_gap, std::abs(sup.lerner(0) * std::abs(e(0, 0)) - 1.0));
        }
    return {all_converged && worst < 1e-6 && lerner_gap < 1e-14,
            "max |mc - planted| " + num(worst, 3) + " over 12 equilibria (both ownership regimes), J=1 |Lerner*|eps| - 1| " +
                num(lerner_gap, 3)};
}

Outcome iia_structure() {
    auto panel = testsupport::random_panel(10, 5, 1, 4, 3, 41);
    const auto homogeneous = testsupport::random_model(testsupport::small_spec(1, 4, 3, false, false), 42);
    const auto mixture = testsupport::random_model(testsupport::small_spec(2, 4, 3), 43);
    const VectorXd p = week_prices(panel, 0);
    auto elasticities = [&](const demand::DemandModel& m) {
        const auto d = market::share_derivatives(market::make_context(m, panel, 0), p);
        return market::elasticity_matrix(d.shares, d.jacobian, p);
    };
    const double k1 = cross_spread(elasticities(homogeneous)).second;
    const double k2 = cross_spread(elasticities(mixture)).first;
    return {k1 < 1e-10 && k2 > 0.0,
            "K=1 max within-column spread " + num(k1, 3) + ", K=2 min within-column spread " + num(k2, 3)};
}

Outcome v0_calibration() {
    const auto sim = harness::simulate_market(small_market(), 3);
    demand::ChoicePanel p = sim.panel;
    p.cf_residual = demand::control_function_residual(p.items, demand::mean_log_prices(p), 3);
    demand::FitConfig fc;
    fc.spec = testsupport::small_spec(2, 8, 8);
    fc.epochs = 15;
    demand::DemandModel m = demand::em_fit(p, fc, 4).model;
    const std::vector<double> taus{0.02, 0.04, 0.10, 0.20, 0.30};
    std::vector<double> v0;
    double worst = 0.0;
    for (double tau : taus) {
        m.outside_utility = demand::calibrate_v0(m, p, tau);
        v0.push_back(m.outside_utility);
        worst = std::max(worst, std::abs(demand::mean_inside_share(m, p) - tau));
    }
    bool decreasing = true;
    std::string trace;
    for (std::size_t k = 0; k < v0.size(); ++k) {
        if (k > 0) decreasing = decreasing && v0[k] < v0[k - 1];
        trace += (k ? ", " : "") + std::string("V0(") + num(taus[k], 2) + ")=" + num(v0[k]);
    }
    return {worst <= 1e-6 && decreasing, trace + "; max |share - tau| " + num(worst, 3)};
}

Outcome counterfactual_sanity() {
    Rng rng = make_rng(8, 0, 5);
    const Eigen::Index n = 40, J = 10;
    MatrixXd base(n, J);
    VectorXd alpha(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        alpha(i) = -0.1 - 0.4 * uniform01(rng);
        for (Eigen::Index j = 0; j < J; ++j) base(i, j) = 1.0 + standard_normal(rng);
    }
    const auto ctx = market::MarketContext::from_primitives({1.0}, {alpha}, {base}, 0.0);
    const VectorXd mc = VectorXd::Constant(J, 3.0);
    const MatrixXd omega = market::ownership_monopolist(J);
    const auto eq = market::solve_bertrand_nash(ctx, mc, omega, VectorXd::Constant(J, 8.0));
    const auto prune = counterfactual::prune_assortment(ctx, eq.prices, mc, omega, {0.0, 0.1, 0.2, 0.3, 0.5});
    const bool zero_ok = std::abs(prune[0].profit_change_a) < 1e-9 && std::abs(prune[0].profit_change_b) < 1e-6;
    double worst_premium = INFINITY;
    for (const auto& r : prune) worst_premium = std::min(worst_premium, (r.profit_b - r.profit_a) / std::abs(r.baseline_profit));
    const bool b_ge_a = worst_premium >= -1e-6;

    double last = -INFINITY, worst_step = INFINITY;
    for (std::size_t parts : {1u, 2u, 4u, 8u}) {
        std::vector<std::size_t> labels(static_cast<std::size_t>(n));
        for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i * parts / labels.size();
        const auto o = counterfactual::segment_profit(ctx, labels, mc, omega, eq.prices);
        if (std::isfinite(last)) worst_step = std::min(worst_step, o.profit - last);
        last = o.profit;
    }
    const bool ladder_ok = worst_step >= -1e-9;

    auto panel = testsupport::random_panel(12, 4, 1, 4, 3, 51);
    const auto model = testsupport::random_model(testsupport::small_spec(2, 4, 3), 52);
    std::vector<std::size_t> consumers(12);
    std::iota(consumers.begin(), consumers.end(), std::size_t{0});
    const auto mctx = market::make_context(model, panel, 0);
    const VectorXd mc4 = VectorXd::Constant(4, 3.0);
    const auto eq4 = market::solve_bertrand_nash(mctx, mc4, market::ownership_identity(4), VectorXd::Constant(4, 10.0));
    const auto c0 = counterfactual::collapse_taste(model, panel, 0, consumers, eq4.prices, mc4, market::ownership_identity(4), 0.0, 1000.0);
    const bool noop = std::abs(c0.profit_change) < 1e-6 && std::abs(c0.price_change) < 1e-6 && std::abs(c0.cs_per_consumer) < 1e-6;

    // Symmetric two-item toy: separated tastes versus full collapse onto the shared direction.
    const double kappa = 3.0, cost = 3.0;
    MatrixXd split(2, 2), pooled(2, 2);
    split << kappa, 0.0, 0.0, kappa;
    pooled.setConstant(kappa / std::sqrt(2.0));
    const VectorXd a2 = VectorXd::Constant(2, -0.3), mc2 = VectorXd::Constant(2, cost);
    double oracle_gap = 0.0;
    auto markup = [&](const MatrixXd& b) {
        const auto c = market::MarketContext::from_primitives({1.0}, {a2}, {b}, 0.0);
        const auto e = market::solve_bertrand_nash(c, mc2, market::ownership_monopolist(2), VectorXd::Constant(2, 8.0));
        // Scalar closed form at a common price: p - c = 1 / (|alpha| (1 - S)) for total inside share S.
        const double S = market::shares(c, e.prices).sum();
        oracle_gap = std::max(oracle_gap, std::abs((e.prices(0) - cost) - 1.0 / (0.3 * (1.0 - S))));
        return e.prices(0) - cost;
    };
    const double m_split = markup(split), m_pooled = markup(pooled);
    const bool collapse_ok = m_pooled < m_split && oracle_gap < 1e-6;
    return {zero_ok && b_ge_a && ladder_ok && noop && collapse_ok,
            std::string("depth 0 ") + (zero_ok ? "ok" : "FAIL") + ", min (B-A)/profit " + num(worst_premium, 3) +
                ", min nested ladder step " + num(worst_step, 3) + ", collapse sigma=0 " + (noop ? "no-op" : "FAIL") +
                ", toy markup " + num(m_split) + " -> " + num(m_pooled) + " (closed-form gap " + num(oracle_gap, 3) + ")"};
}

Outcome index_identities() {
    harness::HedonicSimConfig cfg;
    cfg.months = 8;
    const auto sim = harness::simulate_hedonic_panel(cfg, 9);
    hedonic::GbtConfig g;
    g.trees = 60;
    g.max_depth = 4;
    g.learning_rate = 0.1;
    const auto s = hedonic::fisher_chained(hedonic::fit_surface(sim.panel, g, 1), sim.panel);
    double fisher_gap = 0.0;
    bool bracket = true;
    for (const auto& l : s.links) {
        if (l.gap) continue;
        fisher_gap = std::max(fisher_gap, std::abs(l.fisher - std::sqrt(l.laspeyres * l.paasche)));
        bracket = bracket && l.fisher >= std::min(l.laspeyres, l.paasche) - 1e-15 && l.fisher <= std::max(l.laspeyres, l.paasche) + 1e-15;
    }
    const auto jc = hedonic::jevons_index({{10, 20, 7}, {10, 20, 7}, {10, 20, 7}, {10, 20, 7}});
    double jevons_gap = 0.0;
    for (double v : jc) jevons_gap = std::max(jevons_gap, std::abs(v - 1.0));

    const auto months = sim.panel.months();
    std::vector<std::size_t> ra, rb;
    for (std::size_t r = 0; r < sim.panel.rows(); ++r) (sim.panel.month[r] <= months[3] ? ra : rb).push_back(r);
    const auto pa = sim.panel.select(ra), pb = sim.panel.select(rb);
    const auto& X1 = pa.features;
    const auto& X2 = pb.features;
    const auto f1 = hedonic::fit_gbt(X1, pa.log_price, g, 2), f2 = hedonic::fit_gbt(X2, pb.log_price, g, 3);
    const auto r = hedonic::ob_decompose(f1, f2, X1, pa.log_price, X2, pb.log_price);
    const double sum_gap = std::abs(r.total - (r.composition + r.valuation + r.residual));
    const double val_same = hedonic::ob_decompose(f1, f1, X1, pa.log_price, X2, pb.log_price).valuation;
    const double comp_same = hedonic::ob_decompose(f1, f2, X1, pa.log_price, X1, pa.log_price).composition;
    return {fisher_gap < 1e-12 && bracket && jevons_gap == 0.0 && sum_gap < 1e-12 && val_same == 0.0 && comp_same == 0.0,
            "|F - sqrt(LP)| " + num(fisher_gap, 3) + ", bracket " + (bracket ? "holds" : "FAILS") + ", constant-price Jevons gap " +
                num(jevons_gap, 3) + ", OB sum gap " + num(sum_gap, 3) + ", f1=f2 valuation " + num(val_same, 3) +
                ", same window composition " + num(comp_same, 3)};
}

Outcome composition_bias() {
    harness::HedonicSimConfig cfg;
    cfg.months = 12;
    const auto sim = harness::simulate_hedonic_panel(cfg, 17);
    hedonic::GbtConfig g;
    g.trees = 60;
    g.max_depth = 4;
    g.learning_rate = 0.1;
    const auto s = hedonic::fisher_chained(hedonic::fit_surface(sim.panel, g, 3), sim.panel);
    const double jd = std::abs(s.jevons.back() - 1.0), fd = std::abs(s.fisher.back() - 1.0);
    return {jd > 5.0 * fd, "12-month drift: Jevons " + num(s.jevons.back() - 1.0) + ", Fisher " + num(s.fisher.back() - 1.0) +
                               ", ratio " + num(jd / std::max(fd, 1e-300), 3)};
}

Outcome conformal_coverage() {
    Rng rng = make_rng(2024, 0, 0xc0f);
    const int trials = 1000, n = 200, test = 1000;
    const double alpha = 0.10;
    int good = 0;
    double mean = 0.0;
    for (int t = 0; t < trials; ++t) {
        std::vector<double> cal(n);
        for (double& v : cal) v = standard_normal(rng);
        const double hw = hedonic::conformal_band(cal, alpha);
        int hit = 0;
        for (int k = 0; k < test; ++k) hit += std::abs(standard_normal(rng)) <= hw;
        const double cov = static_cast<double>(hit) / test;
        mean += cov / trials;
        good += cov >= 1.0 - alpha;
    }
    const double frac = static_cast<double>(good) / trials;
    return {frac >= 0.95, "trials with coverage >= 0.90: " + num(100 * frac, 3) + "% (need 95%), mean coverage " + num(mean)};
}

Outcome poisson_qmle_checks() {
    const VectorXd y = (VectorXd(6) << 0, 3, 1, 4, 2, 7).finished();
    const auto f = eventstudy::poisson_qmle(MatrixXd::Ones(6, 1), y);
    const double closed_gap = std::abs(f.beta(0) - std::log(17.0 / 6.0));

    harness::EventSimConfig cfg;
    const int reps = 200;
    int covered = 0;
    double mean_kappa = 0.0;
    for (int r = 0; r < reps; ++r) {
        const auto sim = harness::simulate_event_panel(cfg, 5000 + static_cast<std::uint64_t>(r));
        const auto d = eventstudy::build_design(sim.panel);
        const VectorXd counts = Eigen::Map<const VectorXd>(sim.panel.counts[0].data(), static_cast<Eigen::Index>(sim.panel.counts[0].size()));
        eventstudy::QmleOptions o;
        o.hac_lag = 7;
        const auto fit = eventstudy::poisson_qmle(d.X, counts, o);
        const Eigen::Index c = d.column("period_Lockdown");
        mean_kappa += fit.beta(c) / reps;
        covered += std::abs(fit.beta(c) - cfg.kappa.at("Lockdown")) <= 1.959963984540054 * fit.se(c);
    }
    const double cov = static_cast<double>(covered) / reps;
    const double pct = eventstudy::effect_pct(-0.478);
    const bool pct_ok = std::round(pct * 10.0) / 10.0 == -38.0;
    return {closed_gap < 1e-12 && cov >= 0.90 && cov <= 0.98 && pct_ok,
            "intercept-only gap " + num(closed_gap, 3) + ", HAC(7) 95% CI coverage " + num(100 * cov, 3) + "% over " +
                std::to_string(reps) + " reps (mean kappa " + num(mean_kappa) + "), effect_pct(-0.478) = " + num(pct, 4) + "%"};
}

Outcome clustering_metrics() {
    Rng rng = make_rng(12, 0, 0xa1);
    std::vector<std::size_t> a(1000), b(1000);
    for (auto& v : a) v = rng() % 5;
    for (auto& v : b) v = rng() % 5;
    const double ari_same = eventstudy::ari(a, a), nmi_same = eventstudy::nmi(a, a);
    const double ari_rand = eventstudy::ari(a, b), nmi_rand = eventstudy::nmi(a, b);
    const bool agree = std::abs(ari_same - 1.0) < 1e-12 && std::abs(nmi_same - 1.0) < 1e-12 && std::abs(ari_rand) <= 0.02 &&
                       std::abs(nmi_rand) <= 0.02;

    // Planted k on blobs.
    const std::size_t planted = 4, per = 30;
    numcore::Tensor X(numcore::Shape{planted * per, 2});
    Rng brng = make_rng(8, 0, 0xb1);
    for (std::size_t k = 0; k < planted; ++k)
        for (std::size_t i = 0; i < per; ++i) {
            X.at(k * per + i, 0) = 10.0 * std::cos(2.0 * M_PI * k / planted) + 0.5 * standard_normal(brng);
            X.at(k * per + i, 1) = 10.0 * std::sin(2.0 * M_PI * k / planted) + 0.5 * standard_normal(brng);
        }
    const numcore::Tensor ones(numcore::Shape{X.rows(), 10}, 1.0);
    const auto sel = eventstudy::k_selection(X, {2, 3, 4, 5, 6, 8}, ones, 0.0, 0, 10, 1);

    // Seed stability on clustered event panels.
    harness::EventSimConfig ec;
    const auto sim = harness::simulate_clustered_events(40, 4, 8, {-0.2, -0.8}, 0.1, ec, 21);
    const auto st = eventstudy::seed_stability(sim.embeddings, 4, 20, 7, [&](const eventstudy::Partition& p) {
        return eventstudy::cluster_effects(sim.events.panel, p, "Lockdown");
    });
    std::size_t within = 0;
    for (double r : st.ranges) within += std::abs(r - sim.planted_range) <= 0.25 * sim.planted_range;
    const double frac = static_cast<double>(within) / static_cast<double>(st.ranges.size());
    return {agree && sel.chosen == planted && frac >= 0.9,
            "ARI/NMI identical " + num(ari_same) + "/" + num(nmi_same) + ", random " + num(ari_rand, 3) + "/" + num(nmi_rand, 3) +
                ", k chosen " + std::to_string(sel.chosen) + " (planted 4), seeds within 25% of planted range " +
                std::to_string(within) + "/" + std::to_string(st.ranges.size())};
}

Outcome retrieval() {
    harness::SimConfig sc;
    sc.consumers = 2000;
    sc.items = 400;
    sc.weeks = 20;
    sc.user_dim = 16;
    sc.item_dim = 16;
    sc.taste_rank = 8;
    sc.categories = 4;
    const auto sim = harness::simulate_market(sc, 77);
    const auto recs = harness::purchase_records(sim);
    const auto cat = harness::catalog(sim);
    tower::TowerConfig tc;
    tc.item_dim = sc.item_dim;
    tc.user_dim = sc.user_dim;
    tc.emb_dim = 32;
    tc.hidden = 64;
    tc.negatives = 32;
    tc.epochs = 10;
    tc.batch_size = 256;
    tc.learning_rate = 3e-3;
    tc.temperature = 0.1;
    tower::TrainReport rep;
    const auto model = tower::train_three_tower(recs, cat, tc, 5, &rep);
    const std::size_t k = 10;
    const double hit = tower::hit_at_k(model, cat, rep.holdout, k);
    const double per_category = static_cast<double>(sc.items) / static_cast<double>(sc.categories);
    const double baseline = static_cast<double>(k) / per_category;

    // Demand fit on the training weeks, recall on the last fifth.
    demand::ChoicePanel p = sim.panel;
    const std::size_t train_weeks = sc.weeks - sc.weeks / 5;
    std::vector<demand::ChoiceEvent> train, held;
    for (const auto& e : p.events) (e.week < train_weeks ? train : held).push_back(e);
    p.events = train;
    p.cf_residual = demand::control_function_residual(p.items, demand::mean_log_prices(p), 6);
    demand::FitConfig fc;
    fc.spec.user_dim = sc.user_dim;
    fc.spec.item_dim = sc.item_dim;
    fc.spec.hidden = 32;
    fc.spec.taste_rank = 8;
    const auto fit = demand::em_fit(p, fc, 7);
    const auto r = counterfactual::recall_at_k(fit.model, p.consumers, p.items, p.cf_residual,
                                               counterfactual::median_prices(sim.panel, train_weeks), train, held, k);
    return {hit >= 4.0 * baseline && r.model.cold > r.collaborative.cold,
            "Hit@10 " + num(hit) + " vs baseline " + num(baseline) + " (" + num(hit / baseline, 3) + "x); cold Recall@10 model " +
                num(r.model.cold) + " vs item-kNN " + num(r.collaborative.cold) + " (popularity " + num(r.popularity.cold) + ")"};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome determinism() {
    std::istringstream text(
        "consumers = 600\nitems = 60\nweeks = 12\nuser_dim = 16\nitem_dim = 16\ntaste_rank = 4\ncategories = 4\n"
        "tower.epochs = 4\nfit.epochs = 20\ncf.consumers = 300\nhedonic.cohort = 30\nhedonic.months = 8\n"
        "gbt.trees = 40\nhedonic.stress_draws = 40\nevent.units = 30\n");
    const io::Config cfg = io::Config::parse(text, "acceptance");
    const fs::path root = fs::temp_directory_path() / "deepdemand_acceptance";
    fs::remove_all(root);
    const auto a = harness::run_pipeline(cfg, 2024, root / "a");
    const auto b = harness::run_pipeline(cfg, 2024, root / "b");
    std::size_t files = 0, identical = 0;
    for (const auto& entry : fs::recursive_directory_iterator(root / "a")) {
        if (!entry.is_regular_file()) continue;
        ++files;
        const fs::path rel = fs::relative(entry.path(), root / "a");
        identical += fs::exists(root / "b" / rel) && slurp(entry.path()) == slurp(root / "b" / rel);
    }
    bool non_empty = true;
    for (const auto& f : a.files) non_empty = non_empty && slurp(f).find('\n') != slurp(f).rfind('\n');
    return {files > 0 && identical == files && a.files.size() == b.files.size() && non_empty,
            std::to_string(identical) + "/" + std::to_string(files) + " output files byte-identical across two runs, " +
                std::to_string(a.files.size()) + " report tables" + (non_empty ? "" : " (some empty)")};
}

struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
};

const std::vector<Criterion>& criteria() {
    static const std::vector<Criterion> all{
        {1, "gradient correctness", gradient_correctness},
        {2, "InfoNCE equals MNL", infonce_equals_mnl},
        {3, "parameter recovery", parameter_recovery},
        {4, "Jacobian correctness", jacobian_correctness},
        {5, "supply round trip", supply_round_trip},
        {6, "IIA structure", iia_structure},
        {7, "V0 calibration", v0_calibration},
        {8, "counterfactual sanity", counterfactual_sanity},
        {9, "index identities", index_identities},
        {10, "composition-bias direction", composition_bias},
        {11, "conformal coverage", conformal_coverage},
        {12, "Poisson QMLE", poisson_qmle_checks},
        {13, "clustering metrics", clustering_metrics},
        {14, "retrieval", retrieval},
        {15, "end-to-end determinism", determinism},
    };
    return all;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<int> wanted;
    for (int a = 1; a < argc; ++a) wanted.push_back(std::stoi(argv[a]));
    int failures = 0;
    for (const auto& c : criteria()) {
        if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), c.id) == wanted.end()) continue;
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        std::printf("[%s] %2d %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), seconds_since(t0));
        std::fflush(stdout);
        failures += !o.pass;
    }
    return failures == 0 ? 0 : 1;
}
