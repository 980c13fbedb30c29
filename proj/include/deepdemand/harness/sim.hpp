#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "deepdemand/demand.hpp"
#include "deepdemand/threetower.hpp"

namespace deepdemand::harness {

using numcore::Shape;
using numcore::Tensor;

struct SimConfig {
    std::size_t consumers = 2000;
    std::size_t items = 200;
    std::size_t weeks = 30;
    std::size_t user_dim = 64;
    std::size_t item_dim = 64;
    std::size_t taste_rank = 16;
    std::size_t categories = 10;
    std::size_t classes = 2;
    std::vector<double> alpha_mean{-0.45, -0.15};
    double alpha_spread = 0.03;  // within-class sd driven by the consumer embedding
    double pi1 = 0.4;
    double taste_scale = 2.0;
    double seasonal_scale = 0.3;
    double cf_loading = 0.5;
    double residual_sd = 0.2;
    double price_median = 15.0;
    double price_p90 = 30.0;
    double markdown_prob = 0.3;
    double markdown_min = 0.1;
    double markdown_max = 0.5;
    double inside_share = 0.8;
    int first_month = 1;
    bool taste = true;
    bool seasonal = true;
};

/// Planted primitives of a simulated market.
struct SimTruth {
    std::vector<std::size_t> consumer_class;  // 0-based
    std::vector<std::vector<double>> alpha;   // [C][I]
    std::vector<double> alpha_bar;            // mean over consumers, per class
    double pi1 = 0.0;                         // realized class-1 share
    std::vector<double> bias;
    std::vector<double> cf_loading;
    std::vector<double> residual;             // per item, enters log price and utility
    std::vector<double> base_price;
    std::vector<int> category;
    Tensor taste_user;                        // I x K
    Tensor taste_item;                        // J x K, unit rows
    Tensor delta;                             // 12 x K
    double outside_utility = 0.0;
};

struct SimMarket {
    demand::ChoicePanel panel;
    SimTruth truth;
};

namespace detail {

inline Tensor unit_rows(std::size_t n, std::size_t d, Rng& rng) {
    Tensor t(Shape{n, d});
    for (std::size_t r = 0; r < n; ++r) {
        double s = 0.0;
        for (double& v : t.row(r)) {
            v = standard_normal(rng);
            s += v * v;
        }
        s = std::sqrt(s);
        for (double& v : t.row(r)) v /= s;
    }
    return t;
}

inline Tensor gaussian(std::size_t r, std::size_t c, double sd, Rng& rng) {
    Tensor t(Shape{r, c});
    for (double& v : t.values()) v = sd * standard_normal(rng);
    return t;
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

/// Utility of item j in week t for consumer i under the planted primitives.
inline double true_utility(const SimTruth& tr, const demand::ChoicePanel& panel, std::size_t i, std::size_t j,
                           std::size_t t) {
    const std::size_t c = tr.consumer_class[i];
    const std::size_t m = static_cast<std::size_t>(panel.month_of_week[t] - 1);
    double taste = 0.0;
    for (std::size_t q = 0; q < tr.taste_user.cols(); ++q)
        taste += (tr.taste_user.at(i, q) + tr.delta.at(m, q)) * tr.taste_item.at(j, q);
    return tr.alpha[c][i] * panel.prices.at(j, t) + taste + tr.cf_loading[c] * tr.residual[j] + tr.bias[c];
}

/// Exact choice probabilities of consumer i in week t over all items, outside option last.
inline std::vector<double> true_choice_probabilities(const SimTruth& tr, const demand::ChoicePanel& panel, std::size_t i,
                                                     std::size_t t) {
    std::vector<double> u(panel.item_count());
    for (std::size_t j = 0; j < u.size(); ++j) u[j] = true_utility(tr, panel, i, j, t);
    return demand::logit_shares(u, tr.outside_utility);
}

/// One draw from the planted logit; returns the item count for the outside option.
inline std::size_t draw_choice(const SimTruth& tr, const demand::ChoicePanel& panel, std::size_t i, std::size_t t,
                               Rng& rng) {
    const std::vector<double> prob = true_choice_probabilities(tr, panel, i, t);
    double draw = uniform01(rng);
    for (std::size_t k = 0; k < prob.size(); ++k) {
        draw -= prob[k];
        if (draw <= 0.0) return k;
    }
    return prob.size() - 1;
}

/// Synthetic market with known class structure. Consumer class is drawn independently of the embedding.
inline SimMarket simulate_market(const SimConfig& cfg, std::uint64_t seed) {
    if (cfg.consumers < 1 || cfg.items < 2 || cfg.weeks < 2) throw ContractError("simulate_market: market too small");
    if (cfg.alpha_mean.size() < cfg.classes) throw ContractError("simulate_market: one alpha mean per class required");
    if (!(cfg.inside_share > 0.0 && cfg.inside_share < 1.0)) throw ContractError("simulate_market: inside share in (0,1)");
    const std::size_t I = cfg.consumers, J = cfg.items, T = cfg.weeks, K = cfg.taste_rank;
    Rng rng = make_rng(seed, 0, 0x51);
    SimMarket out;
    SimTruth& tr = out.truth;
    demand::ChoicePanel& pn = out.panel;

    pn.consumers = detail::unit_rows(I, cfg.user_dim, rng);
    pn.items = detail::unit_rows(J, cfg.item_dim, rng);

    // Planted linear taste maps.
    const Tensor A = detail::gaussian(K, cfg.user_dim, 1.0, rng);
    const Tensor Bm = detail::gaussian(K, cfg.item_dim, 1.0, rng);
    tr.taste_user = Tensor(Shape{I, K});
    tr.taste_item = Tensor(Shape{J, K});
    for (std::size_t i = 0; i < I; ++i) {
        double s = 0.0;
        for (std::size_t q = 0; q < K; ++q) {
            double v = 0.0;
            for (std::size_t k = 0; k < cfg.user_dim; ++k) v += A.at(q, k) * pn.consumers.at(i, k);
            tr.taste_user.at(i, q) = v;
            s += v * v;
        }
        for (std::size_t q = 0; q < K; ++q)
            tr.taste_user.at(i, q) = cfg.taste ? cfg.taste_scale * tr.taste_user.at(i, q) / std::sqrt(s) : 0.0;
    }
    for (std::size_t j = 0; j < J; ++j) {
        double s = 0.0;
        for (std::size_t q = 0; q < K; ++q) {
            double v = 0.0;
            for (std::size_t k = 0; k < cfg.item_dim; ++k) v += Bm.at(q, k) * pn.items.at(j, k);
            tr.taste_item.at(j, q) = v;
            s += v * v;
        }
        for (std::size_t q = 0; q < K; ++q) tr.taste_item.at(j, q) /= std::sqrt(s);
    }
    tr.delta = Tensor(Shape{demand::kMonths, K});
    if (cfg.taste && cfg.seasonal) {
        const Tensor W = detail::gaussian(8, K, 1.0 / std::sqrt(8.0), rng);
        Tensor z = detail::gaussian(demand::kMonths, 8, 1.0, rng);
        for (std::size_t k = 0; k < 8; ++k) {
            double m = 0.0;
            for (std::size_t r = 0; r < demand::kMonths; ++r) m += z.at(r, k);
            for (std::size_t r = 0; r < demand::kMonths; ++r) z.at(r, k) -= m / 12.0;
        }
        for (std::size_t r = 0; r < demand::kMonths; ++r)
            for (std::size_t q = 0; q < K; ++q) {
                double v = 0.0;
                for (std::size_t k = 0; k < 8; ++k) v += z.at(r, k) * W.at(k, q);
                tr.delta.at(r, q) = cfg.seasonal_scale * v;
            }
    }

    // Classes and price sensitivities.
    const std::size_t C = cfg.classes;
    tr.consumer_class.resize(I);
    std::size_t n1 = 0;
    for (std::size_t i = 0; i < I; ++i) {
        tr.consumer_class[i] = (C > 1 && uniform01(rng) >= cfg.pi1) ? 1 : 0;
        n1 += tr.consumer_class[i] == 0;
    }
    tr.pi1 = static_cast<double>(n1) / static_cast<double>(I);
    tr.alpha.assign(C, std::vector<double>(I));
    tr.alpha_bar.assign(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
        std::vector<double> w(cfg.user_dim);
        for (double& v : w) v = standard_normal(rng);
        const double wn = numcore::norm2(w);
        for (std::size_t i = 0; i < I; ++i) {
            const double z = numcore::dot(w, pn.consumers.row(i)) / wn * std::sqrt(static_cast<double>(cfg.user_dim));
            tr.alpha[c][i] = std::min(cfg.alpha_mean[c] + cfg.alpha_spread * std::tanh(z), -demand::kAlphaFloor - 1e-3);
            tr.alpha_bar[c] += tr.alpha[c][i] / static_cast<double>(I);
        }
    }

    // Prices: log-normal hedonic part plus a residual that also shifts utility.
    const double log_sd = std::log(cfg.price_p90 / cfg.price_median) / 1.2815515655446004;
    const double resid_sd = std::min(cfg.residual_sd, 0.9 * log_sd);
    const double hed_sd = std::sqrt(log_sd * log_sd - resid_sd * resid_sd);
    std::vector<double> h(cfg.item_dim);
    for (double& v : h) v = standard_normal(rng);
    const double hn = numcore::norm2(h);
    tr.residual.resize(J);
    tr.base_price.resize(J);
    tr.category.resize(J);
    for (std::size_t j = 0; j < J; ++j) {
        const double z = numcore::dot(h, pn.items.row(j)) / hn * std::sqrt(static_cast<double>(cfg.item_dim));
        tr.residual[j] = resid_sd * standard_normal(rng);
        tr.base_price[j] = cfg.price_median * std::exp(hed_sd * z + tr.residual[j]);
        tr.category[j] = static_cast<int>(j % std::max<std::size_t>(1, cfg.categories));
    }
    pn.prices = Tensor(Shape{J, T});
    for (std::size_t j = 0; j < J; ++j)
        for (std::size_t t = 0; t < T; ++t) {
            double p = tr.base_price[j];
            if (uniform01(rng) < cfg.markdown_prob)
                p *= 1.0 - (cfg.markdown_min + (cfg.markdown_max - cfg.markdown_min) * uniform01(rng));
            pn.prices.at(j, t) = p;
        }
    pn.month_of_week.resize(T);
    for (std::size_t t = 0; t < T; ++t)
        pn.month_of_week[t] = static_cast<int>((static_cast<std::size_t>(cfg.first_month - 1) + t * 12 / 52) % 12) + 1;

    tr.cf_loading.assign(C, cfg.cf_loading);
    tr.bias.resize(C);
    for (std::size_t c = 0; c < C; ++c) tr.bias[c] = -cfg.alpha_mean[c] * cfg.price_median;

    // Outside utility hitting the target inside share in expectation.
    std::vector<double> lse(I * T);
    {
        std::vector<double> u(J);
        for (std::size_t i = 0; i < I; ++i)
            for (std::size_t t = 0; t < T; ++t) {
                for (std::size_t j = 0; j < J; ++j) u[j] = true_utility(tr, pn, i, j, t);
                lse[i * T + t] = numcore::log_sum_exp(u);
            }
    }
    auto share = [&](double v0) {
        double s = 0.0;
        for (double l : lse) s += detail::logistic(l - v0);
        return s / static_cast<double>(lse.size());
    };
    double lo = -60.0, hi = 60.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (share(mid) > cfg.inside_share ? lo : hi) = mid;
    }
    tr.outside_utility = 0.5 * (lo + hi);

    // Choices, one stream per consumer.
    for (std::size_t i = 0; i < I; ++i) {
        Rng cr = make_rng(seed, i, 0xc401ce);
        for (std::size_t t = 0; t < T; ++t) {
            const std::size_t pick = draw_choice(tr, pn, i, t, cr);
            if (pick < J) pn.events.push_back({i, pick, t});
        }
    }
    return out;
}

/// Purchase records for three-tower training, with log base price as the reference price.
inline std::vector<tower::PurchaseRecord> purchase_records(const SimMarket& m) {
    std::vector<tower::PurchaseRecord> out;
    for (const demand::ChoiceEvent& e : m.panel.events)
        out.push_back({e.consumer, e.item, m.truth.category[e.item], static_cast<int>(e.week),
                       m.panel.prices.at(e.item, e.week), std::log(m.truth.base_price[e.item])});
    return out;
}

inline tower::Catalog catalog(const SimMarket& m) {
    tower::Catalog c;
    c.item_features = m.panel.items;
    c.user_features = m.panel.consumers;
    c.category = m.truth.category;
    for (double p : m.truth.base_price) c.log_ref_price.push_back(std::log(p));
    return c;
}

}  // namespace deepdemand::harness
