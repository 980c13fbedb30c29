#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deepdemand/demand.hpp"

namespace deepdemand::market {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Everything about a market except prices: per consumer and class, alpha and the price-free utility of
/// each item. Shares are averaged over consumers with equal weight.
struct MarketContext {
    std::vector<std::size_t> items;          // catalog ids, column order
    std::vector<double> weights;             // class weights
    std::vector<VectorXd> alpha;             // [C] n
    std::vector<MatrixXd> base;              // [C] n x J
    double outside_utility = demand::kNegInf;

    std::size_t item_count() const { return items.size(); }
    std::size_t consumer_count() const { return alpha.empty() ? 0 : static_cast<std::size_t>(alpha[0].size()); }
    std::size_t class_count() const { return weights.size(); }

    static MarketContext from_primitives(std::vector<double> weights, std::vector<VectorXd> alpha,
                                         std::vector<MatrixXd> base, double v0) {
        if (weights.empty() || alpha.size() != weights.size() || base.size() != weights.size())
            throw ContractError("market: one alpha vector and base matrix per class required");
        MarketContext m;
        m.weights = std::move(weights);
        m.alpha = std::move(alpha);
        m.base = std::move(base);
        m.outside_utility = v0;
        for (std::size_t c = 0; c < m.weights.size(); ++c)
            if (m.base[c].rows() != m.alpha[0].size() || m.alpha[c].size() != m.alpha[0].size() ||
                m.base[c].cols() != m.base[0].cols())
                throw ShapeError("market: class blocks disagree in size");
        m.items.resize(static_cast<std::size_t>(m.base[0].cols()));
        for (std::size_t j = 0; j < m.items.size(); ++j) m.items[j] = j;
        return m;
    }
};

/// Deterministic consumer sample (sorted ids). n >= I returns everyone.
inline std::vector<std::size_t> sample_consumers(std::size_t I, std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> ids(I);
    for (std::size_t i = 0; i < I; ++i) ids[i] = i;
    if (n >= I) return ids;
    Rng rng = make_rng(seed, 0, 0x5a3);
    shuffle_in_place(ids, rng);
    ids.resize(n);
    std::sort(ids.begin(), ids.end());
    return ids;
}

/// Builds a market over `items` for the calendar month of `week`. `item_taste`, when given, replaces the
/// fitted per-class unit item taste vectors (rows indexed by catalog id).
inline MarketContext make_context(const demand::DemandModel& model, const demand::ChoicePanel& panel, std::size_t week,
                                  std::span<const std::size_t> items, std::span<const std::size_t> consumers,
                                  const std::vector<numcore::Tensor>* item_taste = nullptr) {
    if (week >= panel.week_count()) throw ContractError("market: week out of range");
    demand::ModelCache mc = demand::build_cache(model, panel);
    if (item_taste) {
        if (item_taste->size() != mc.classes) throw ShapeError("market: one taste matrix per class required");
        mc.item_taste = *item_taste;
    }
    const int month = panel.month_of_week[week];
    MarketContext ctx;
    ctx.items.assign(items.begin(), items.end());
    ctx.weights = mc.weights;
    ctx.outside_utility = mc.outside_utility;
    const auto n = static_cast<Eigen::Index>(consumers.size());
    const auto J = static_cast<Eigen::Index>(items.size());
    for (std::size_t c = 0; c < mc.classes; ++c) {
        VectorXd a(n);
        MatrixXd b(n, J);
        for (Eigen::Index r = 0; r < n; ++r) {
            const std::size_t i = consumers[static_cast<std::size_t>(r)];
            a(r) = mc.alpha[c][i];
            for (Eigen::Index k = 0; k < J; ++k) {
                const std::size_t j = items[static_cast<std::size_t>(k)];
                b(r, k) = mc.taste_score(c, i, j, month) + mc.gamma[c] * panel.residual(j) + mc.bias[c];
            }
        }
        ctx.alpha.push_back(std::move(a));
        ctx.base.push_back(std::move(b));
    }
    return ctx;
}

inline MarketContext make_context(const demand::DemandModel& model, const demand::ChoicePanel& panel, std::size_t week) {
    std::vector<std::size_t> items(panel.item_count()), consumers(panel.consumer_count());
    for (std::size_t j = 0; j < items.size(); ++j) items[j] = j;
    for (std::size_t i = 0; i < consumers.size(); ++i) consumers[i] = i;
    return make_context(model, panel, week, items, consumers);
}

/// Restricts a market to a subset of its columns.
inline MarketContext subset_items(const MarketContext& ctx, std::span<const std::size_t> columns) {
    MarketContext out;
    out.weights = ctx.weights;
    out.alpha = ctx.alpha;
    out.outside_utility = ctx.outside_utility;
    for (std::size_t k : columns) out.items.push_back(ctx.items.at(k));
    for (const MatrixXd& b : ctx.base) {
        MatrixXd s(b.rows(), static_cast<Eigen::Index>(columns.size()));
        for (std::size_t k = 0; k < columns.size(); ++k) s.col(static_cast<Eigen::Index>(k)) = b.col(static_cast<Eigen::Index>(columns[k]));
        out.base.push_back(std::move(s));
    }
    return out;
}

namespace detail {

inline void check_prices(const MarketContext& ctx, const VectorXd& p) {
    if (static_cast<std::size_t>(p.size()) != ctx.item_count())
        throw ShapeError("market: " + std::to_string(p.size()) + " prices for " + std::to_string(ctx.item_count()) +
                         " items");
}

/// Class-conditional shares [n x J] and outside shares [n].
inline MatrixXd class_shares(const MarketContext& ctx, std::size_t c, const VectorXd& p, VectorXd* outside = nullptr) {
    MatrixXd u = ctx.base[c] + ctx.alpha[c] * p.transpose();
    const bool has_out = std::isfinite(ctx.outside_utility);
    if (outside) outside->resize(u.rows());
    for (Eigen::Index r = 0; r < u.rows(); ++r) {
        double mx = u.row(r).maxCoeff();
        if (has_out) mx = std::max(mx, ctx.outside_utility);
        u.row(r) = (u.row(r).array() - mx).exp();
        const double o = has_out ? std::exp(ctx.outside_utility - mx) : 0.0;
        const double z = u.row(r).sum() + o;
        u.row(r) /= z;
        if (outside) (*outside)(r) = o / z;
    }
    return u;
}

}  // namespace detail

/// Aggregate shares at prices p.
inline VectorXd shares(const MarketContext& ctx, const VectorXd& p) {
    detail::check_prices(ctx, p);
    VectorXd S = VectorXd::Zero(p.size());
    for (std::size_t c = 0; c < ctx.class_count(); ++c)
        S += ctx.weights[c] * detail::class_shares(ctx, c, p).colwise().mean().transpose();
    return S;
}

struct ShareDerivatives {
    VectorXd shares;
    MatrixXd jacobian;  // (j, l) = dS_j / dp_l
};

/// Aggregate shares and their price Jacobian, averaged over the context's consumers.
inline ShareDerivatives share_derivatives(const MarketContext& ctx, const VectorXd& p) {
    detail::check_prices(ctx, p);
    if ((p.array() <= 0.0).any()) throw ContractError("share_derivatives: prices must be positive");
    const auto J = p.size();
    const double n = static_cast<double>(ctx.consumer_count());
    ShareDerivatives out{VectorXd::Zero(J), MatrixXd::Zero(J, J)};
    for (std::size_t c = 0; c < ctx.class_count(); ++c) {
        const MatrixXd s = detail::class_shares(ctx, c, p);
        const MatrixXd as = ctx.alpha[c].asDiagonal() * s;
        const double w = ctx.weights[c] / n;
        out.shares += w * s.colwise().sum().transpose();
        out.jacobian -= w * (as.transpose() * s);
        out.jacobian.diagonal() += w * as.colwise().sum().transpose();
    }
    return out;
}

/// Derivative of the aggregate outside share with respect to each price.
inline VectorXd outside_share_gradient(const MarketContext& ctx, const VectorXd& p) {
    detail::check_prices(ctx, p);
    VectorXd g = VectorXd::Zero(p.size());
    const double n = static_cast<double>(ctx.consumer_count());
    for (std::size_t c = 0; c < ctx.class_count(); ++c) {
        VectorXd o;
        const MatrixXd s = detail::class_shares(ctx, c, p, &o);
        g -= ctx.weights[c] / n * (s.transpose() * (ctx.alpha[c].array() * o.array()).matrix());
    }
    return g;
}

/// eps(j, l) = (p_l / S_j) dS_j/dp_l.
inline MatrixXd elasticity_matrix(const VectorXd& S, const MatrixXd& jac, const VectorXd& p) {
    if (S.size() != p.size() || jac.rows() != S.size() || jac.cols() != S.size())
        throw ShapeError("elasticity_matrix: sizes disagree");
    std::string zero;
    for (Eigen::Index j = 0; j < S.size(); ++j)
        if (!(S(j) > 0.0)) zero += (zero.empty() ? "" : ",") + std::to_string(j);
    if (!zero.empty()) throw NumericalError("elasticity_matrix: zero share for items " + zero);
    MatrixXd e(jac.rows(), jac.cols());
    for (Eigen::Index j = 0; j < S.size(); ++j)
        for (Eigen::Index l = 0; l < S.size(); ++l) e(j, l) = p(l) / S(j) * jac(j, l);
    return e;
}

inline MatrixXd ownership_identity(std::size_t J) {
    return MatrixXd::Identity(static_cast<Eigen::Index>(J), static_cast<Eigen::Index>(J));
}
inline MatrixXd ownership_monopolist(std::size_t J) {
    return MatrixXd::Ones(static_cast<Eigen::Index>(J), static_cast<Eigen::Index>(J));
}

struct SupplyResult {
    VectorXd markup;
    VectorXd marginal_cost;
    VectorXd lerner;
    std::size_t positive_cost = 0;
    double condition_number = 0.0;
};

inline constexpr double kMaxCondition = 1e12;

namespace detail {

/// -Delta^{-1} S with Delta = Omega .* J^T, plus the 1-norm condition number of Delta.
inline VectorXd markups(const VectorXd& S, const MatrixXd& jac, const MatrixXd& omega, double* cond) {
    if (omega.rows() != jac.rows() || omega.cols() != jac.cols()) throw ShapeError("ownership matrix size mismatch");
    const MatrixXd delta = omega.cwiseProduct(jac.transpose());
    const Eigen::PartialPivLU<MatrixXd> lu(delta);
    const MatrixXd inv = lu.inverse();
    const double c = delta.cwiseAbs().colwise().sum().maxCoeff() * inv.cwiseAbs().colwise().sum().maxCoeff();
    if (cond) *cond = c;
    if (!std::isfinite(c) || c > kMaxCondition)
        throw NumericalError("markup inversion: ownership-weighted Jacobian is singular (condition " +
                             std::to_string(c) + ")");
    return -lu.solve(S);
}

}  // namespace detail

/// Bertrand-Nash first-order conditions solved for costs. Negative costs are kept and counted.
inline SupplyResult invert_markups(const VectorXd& S, const MatrixXd& jac, const VectorXd& p, const MatrixXd& omega) {
    if (S.size() != p.size()) throw ShapeError("invert_markups: shares and prices differ in length");
    SupplyResult r;
    r.markup = detail::markups(S, jac, omega, &r.condition_number);
    r.marginal_cost = p - r.markup;
    r.lerner = r.markup.cwiseQuotient(p);
    for (Eigen::Index j = 0; j < p.size(); ++j) r.positive_cost += r.marginal_cost(j) > 0.0;
    return r;
}

struct SolverOptions {
    double damping = 0.5;
    double tolerance = 1e-8;
    std::size_t max_iterations = 500;
    double price_floor = 1e-6;
};

struct Equilibrium {
    VectorXd prices;
    bool converged = false;
    std::size_t iterations = 0;
    double last_change = 0.0;
};

/// Damped fixed point p <- (1-w) p + w (mc + eta(p)).
inline Equilibrium solve_bertrand_nash(const MarketContext& ctx, const VectorXd& mc, const MatrixXd& omega,
                                       const VectorXd& p_init, const SolverOptions& opt = {}) {
    detail::check_prices(ctx, p_init);
    if (mc.size() != p_init.size()) throw ShapeError("solve_bertrand_nash: cost vector length mismatch");
    if (!mc.allFinite()) throw ContractError("solve_bertrand_nash: costs must be finite");
    if ((p_init.array() <= 0.0).any()) throw ContractError("solve_bertrand_nash: starting prices must be positive");
    Equilibrium eq;
    eq.prices = p_init;
    for (std::size_t it = 1; it <= opt.max_iterations; ++it) {
        const ShareDerivatives d = share_derivatives(ctx, eq.prices);
        const VectorXd target = mc + detail::markups(d.shares, d.jacobian, omega, nullptr);
        VectorXd next = (1.0 - opt.damping) * eq.prices + opt.damping * target;
        next = next.cwiseMax(opt.price_floor);
        eq.last_change = (next - eq.prices).cwiseAbs().maxCoeff();
        eq.prices = std::move(next);
        eq.iterations = it;
        if (eq.last_change < opt.tolerance) {
            eq.converged = true;
            break;
        }
    }
    return eq;
}

/// Per-consumer expected maximum utility in money units.
inline VectorXd consumer_surplus(const MarketContext& ctx, const VectorXd& p) {
    detail::check_prices(ctx, p);
    const Eigen::Index n = static_cast<Eigen::Index>(ctx.consumer_count());
    VectorXd cs = VectorXd::Zero(n);
    const bool has_out = std::isfinite(ctx.outside_utility);
    for (std::size_t c = 0; c < ctx.class_count(); ++c) {
        const MatrixXd u = ctx.base[c] + ctx.alpha[c] * p.transpose();
        for (Eigen::Index r = 0; r < n; ++r) {
            double mx = u.row(r).maxCoeff();
            if (has_out) mx = std::max(mx, ctx.outside_utility);
            double z = (u.row(r).array() - mx).exp().sum();
            if (has_out) z += std::exp(ctx.outside_utility - mx);
            cs(r) += ctx.weights[c] / std::abs(ctx.alpha[c](r)) * (mx + std::log(z));
        }
    }
    return cs;
}

/// Surplus of one consumer of the panel at the given prices in the given week.
inline double consumer_surplus(const demand::DemandModel& model, const demand::ChoicePanel& panel, std::size_t i,
                               const VectorXd& prices, std::size_t week) {
    std::vector<std::size_t> items(panel.item_count());
    for (std::size_t j = 0; j < items.size(); ++j) items[j] = j;
    const std::size_t one[1] = {i};
    return consumer_surplus(make_context(model, panel, week, items, one), prices)(0);
}

struct MarketState {
    std::vector<std::size_t> items;
    VectorXd prices;
    VectorXd marginal_cost;
};

struct WelfareDelta {
    double consumer = 0.0;  // market size times mean compensating variation
    double producer = 0.0;
    double total = 0.0;
};

inline double producer_surplus(const MarketContext& ctx, const MarketState& s, double market_size) {
    return market_size * (s.prices - s.marginal_cost).dot(shares(ctx, s.prices));
}

/// Welfare change between two price states of the same catalog and consumers.
inline WelfareDelta welfare_delta(const MarketContext& ctx, const MarketState& s0, const MarketState& s1,
                                  double market_size) {
    if (s0.items != s1.items || s0.items != ctx.items)
        throw ContractError("welfare_delta: states must share the market's catalog");
    if (s0.marginal_cost.size() != s1.marginal_cost.size() || s0.marginal_cost != s1.marginal_cost)
        throw ContractError("welfare_delta: states must share marginal costs");
    WelfareDelta w;
    const VectorXd cv = consumer_surplus(ctx, s1.prices) - consumer_surplus(ctx, s0.prices);
    w.consumer = market_size * cv.mean();
    w.producer = producer_surplus(ctx, s1, market_size) - producer_surplus(ctx, s0, market_size);
    w.total = w.consumer + w.producer;
    return w;
}

/// Share-weighted mean price per item over the weeks it sold; unweighted mean when it never sold.
inline VectorXd reference_prices(const demand::ChoicePanel& panel) {
    const std::size_t J = panel.item_count(), T = panel.week_count();
    std::vector<double> num(J, 0.0), den(J, 0.0);
    for (const demand::ChoiceEvent& e : panel.events) {
        num[e.item] += panel.prices.at(e.item, e.week);
        den[e.item] += 1.0;
    }
    VectorXd p(static_cast<Eigen::Index>(J));
    for (std::size_t j = 0; j < J; ++j) {
        if (den[j] > 0.0) {
            p(static_cast<Eigen::Index>(j)) = num[j] / den[j];
            continue;
        }
        double s = 0.0, n = 0.0;
        for (std::size_t t = 0; t < T; ++t)
            if (panel.on_sale(j, t)) {
                s += panel.prices.at(j, t);
                n += 1.0;
            }
        if (n == 0.0) throw DataError("reference_prices: item " + std::to_string(j) + " is never on sale");
        p(static_cast<Eigen::Index>(j)) = s / n;
    }
    return p;
}

}  // namespace deepdemand::market
