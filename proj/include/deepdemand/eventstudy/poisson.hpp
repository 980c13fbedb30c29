#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "deepdemand/errors.hpp"

namespace deepdemand::eventstudy {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kSeparationFloor = -20.0;

struct QmleOptions {
    double gradient_tolerance = 1e-10;
    std::size_t max_iterations = 100;
    std::size_t hac_lag = 0;
    double rank_tolerance = 1e-10;
};

struct QmleFit {
    VectorXd beta;
    MatrixXd covariance;
    VectorXd se, z, p;
    double log_pseudo_likelihood = 0.0;
    bool converged = false;
    std::size_t iterations = 0;
    double gradient_norm = 0.0;
    std::vector<bool> dropped;    // collinear columns, coefficient fixed at 0
    std::vector<bool> separated;  // indicator columns with no positive counts, coefficient fixed at the floor
};

inline double effect_pct(double kappa) { return 100.0 * std::expm1(kappa); }

inline double normal_two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

namespace detail {

/// Columns (in order) that add rank to the ones kept before them.
inline std::vector<bool> collinear_columns(const MatrixXd& X, double tol) {
    std::vector<bool> drop(static_cast<std::size_t>(X.cols()), false);
    std::vector<Eigen::Index> kept;
    for (Eigen::Index c = 0; c < X.cols(); ++c) {
        if (X.col(c).norm() == 0.0) {
            drop[static_cast<std::size_t>(c)] = true;
            continue;
        }
        MatrixXd sub(X.rows(), static_cast<Eigen::Index>(kept.size()) + 1);
        for (std::size_t k = 0; k < kept.size(); ++k) sub.col(static_cast<Eigen::Index>(k)) = X.col(kept[k]);
        sub.col(sub.cols() - 1) = X.col(c);
        Eigen::ColPivHouseholderQR<MatrixXd> qr(sub);
        qr.setThreshold(tol);
        if (qr.rank() == sub.cols())
            kept.push_back(c);
        else
            drop[static_cast<std::size_t>(c)] = true;
    }
    return drop;
}

inline double poisson_loglik(const VectorXd& y, const VectorXd& eta) {
    double s = 0.0;
    for (Eigen::Index t = 0; t < y.size(); ++t) s += y(t) * eta(t) - std::exp(eta(t)) - std::lgamma(y(t) + 1.0);
    return s;
}

inline MatrixXd sandwich(const MatrixXd& X, const VectorXd& y, const VectorXd& mu, std::size_t lag) {
    const Eigen::Index T = X.rows();
    if (static_cast<Eigen::Index>(lag) >= T) throw ContractError("newey_west_cov: lag must be below the series length");
    const MatrixXd A = X.transpose() * mu.asDiagonal() * X;
    const MatrixXd S = (y - mu).asDiagonal() * X;  // scores by row
    MatrixXd B = S.transpose() * S;
    for (std::size_t l = 1; l <= lag; ++l) {
        const double w = 1.0 - static_cast<double>(l) / static_cast<double>(lag + 1);
        const auto L = static_cast<Eigen::Index>(l);
        const MatrixXd G = S.bottomRows(T - L).transpose() * S.topRows(T - L);
        B += w * (G + G.transpose());
    }
    const MatrixXd Ainv = A.ldlt().solve(MatrixXd::Identity(A.rows(), A.cols()));
    const MatrixXd V = Ainv * B * Ainv;
    return 0.5 * (V + V.transpose());
}

}  // namespace detail

/// Sandwich A^{-1} B A^{-1} with Bartlett-weighted score autocovariances. Rows must be time-ordered.
inline MatrixXd newey_west_cov(const MatrixXd& X, const VectorXd& y, const VectorXd& beta, std::size_t lag) {
    if (y.size() != X.rows() || beta.size() != X.cols()) throw ShapeError("newey_west_cov: sizes disagree");
    return detail::sandwich(X, y, (X * beta).array().exp().matrix(), lag);
}

/// Poisson QMLE by Newton with step halving. Collinear columns are dropped and indicator columns whose
/// rows all have zero counts are pinned at the separation floor; both are reported.
inline QmleFit poisson_qmle(const MatrixXd& X, const VectorXd& y, const QmleOptions& opt = {}) {
    const Eigen::Index n = X.rows(), k = X.cols();
    if (y.size() != n) throw ShapeError("poisson_qmle: one count per design row required");
    if (n == 0 || k == 0) throw ContractError("poisson_qmle: empty design");
    for (Eigen::Index t = 0; t < n; ++t)
        if (!(y(t) >= 0.0) || y(t) != std::floor(y(t))) throw DataError("poisson_qmle: counts must be non-negative integers");
    QmleFit fit;
    fit.dropped = detail::collinear_columns(X, opt.rank_tolerance);
    fit.separated.assign(static_cast<std::size_t>(k), false);
    for (Eigen::Index c = 0; c < k; ++c) {
        if (fit.dropped[static_cast<std::size_t>(c)]) continue;
        const bool indicator = (X.col(c).array() >= 0.0).all() && (X.col(c).array() > 0.0).any();
        if (!indicator) continue;
        bool any_positive = false;
        for (Eigen::Index t = 0; t < n; ++t) any_positive = any_positive || (X(t, c) > 0.0 && y(t) > 0.0);
        const bool constant = (X.col(c).array() == X(0, c)).all();
        if (!any_positive && !constant) fit.separated[static_cast<std::size_t>(c)] = true;
    }
    std::vector<Eigen::Index> free;
    for (Eigen::Index c = 0; c < k; ++c)
        if (!fit.dropped[static_cast<std::size_t>(c)] && !fit.separated[static_cast<std::size_t>(c)]) free.push_back(c);
    const auto m = static_cast<Eigen::Index>(free.size());
    MatrixXd Xf(n, m);
    for (Eigen::Index c = 0; c < m; ++c) Xf.col(c) = X.col(free[static_cast<std::size_t>(c)]);
    VectorXd offset = VectorXd::Zero(n);
    for (Eigen::Index c = 0; c < k; ++c)
        if (fit.separated[static_cast<std::size_t>(c)]) offset += kSeparationFloor * X.col(c);

    // Start from the intercept-only solution when a constant column exists.
    VectorXd b = VectorXd::Zero(m);
    const double ybar = y.mean();
    for (Eigen::Index c = 0; c < m; ++c)
        if ((Xf.col(c).array() == Xf(0, c)).all() && Xf(0, c) != 0.0) {
            b(c) = std::log(std::max(ybar, 1e-12)) / Xf(0, c);
            break;
        }
    VectorXd eta = Xf * b + offset;
    double ll = detail::poisson_loglik(y, eta);
    for (std::size_t it = 1; it <= opt.max_iterations; ++it) {
        const VectorXd mu = eta.array().exp().matrix();
        const VectorXd g = Xf.transpose() * (y - mu);
        fit.gradient_norm = g.cwiseAbs().maxCoeff();
        fit.iterations = it - 1;
        if (fit.gradient_norm < opt.gradient_tolerance) {
            fit.converged = true;
            break;
        }
        const MatrixXd H = Xf.transpose() * mu.asDiagonal() * Xf;
        const VectorXd step = H.ldlt().solve(g);
        double scale = 1.0;
        VectorXd nb;
        double nll = -INFINITY;
        for (int h = 0; h < 40; ++h) {
            nb = b + scale * step;
            const VectorXd ne = Xf * nb + offset;
            nll = detail::poisson_loglik(y, ne);
            if (nll >= ll - 1e-12 * std::abs(ll)) break;
            scale *= 0.5;
        }
        const double moved = (nb - b).cwiseAbs().maxCoeff();
        b = nb;
        eta = Xf * b + offset;
        ll = nll;
        if (moved < 1e-14 * (1.0 + b.cwiseAbs().maxCoeff())) {
            // At machine precision: accept if the gradient is negligible relative to the counts.
            const VectorXd g2 = Xf.transpose() * (y - eta.array().exp().matrix());
            fit.gradient_norm = g2.cwiseAbs().maxCoeff();
            fit.iterations = it;
            fit.converged = fit.gradient_norm < 1e-8 * std::max(1.0, y.sum());
            break;
        }
    }
    fit.beta = VectorXd::Zero(k);
    for (Eigen::Index c = 0; c < m; ++c) fit.beta(free[static_cast<std::size_t>(c)]) = b(c);
    for (Eigen::Index c = 0; c < k; ++c)
        if (fit.separated[static_cast<std::size_t>(c)]) fit.beta(c) = kSeparationFloor;
    fit.log_pseudo_likelihood = ll;

    if (static_cast<Eigen::Index>(opt.hac_lag) >= n)
        throw ContractError("poisson_qmle: HAC lag must be below the series length");
    const MatrixXd Vfree = detail::sandwich(Xf, y, eta.array().exp().matrix(), opt.hac_lag);
    fit.covariance = MatrixXd::Zero(k, k);
    for (Eigen::Index a = 0; a < m; ++a)
        for (Eigen::Index c = 0; c < m; ++c)
            fit.covariance(free[static_cast<std::size_t>(a)], free[static_cast<std::size_t>(c)]) = Vfree(a, c);
    fit.se = VectorXd::Zero(k);
    fit.z = VectorXd::Zero(k);
    fit.p = VectorXd::Ones(k);
    for (Eigen::Index c = 0; c < k; ++c) {
        if (fit.dropped[static_cast<std::size_t>(c)] || fit.separated[static_cast<std::size_t>(c)]) {
            fit.se(c) = INFINITY;
            continue;
        }
        fit.se(c) = std::sqrt(std::max(0.0, fit.covariance(c, c)));
        fit.z(c) = fit.se(c) > 0.0 ? fit.beta(c) / fit.se(c) : 0.0;
        fit.p(c) = normal_two_sided_p(fit.z(c));
    }
    return fit;
}

struct FdrResult {
    std::vector<bool> rejected;
    std::vector<double> adjusted;
};

/// Benjamini-Hochberg step-up at level q.
inline FdrResult bh_fdr(const std::vector<double>& p, double q) {
    const std::size_t m = p.size();
    for (double v : p)
        if (!(v >= 0.0 && v <= 1.0)) throw ContractError("bh_fdr: p-values must lie in [0,1]");
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
    FdrResult r{std::vector<bool>(m, false), std::vector<double>(m, 1.0)};
    double running = 1.0;
    for (std::size_t r_ = m; r_ > 0; --r_) {
        const std::size_t idx = order[r_ - 1];
        running = std::min(running, static_cast<double>(m) * p[idx] / static_cast<double>(r_));
        r.adjusted[idx] = std::min(1.0, running);
    }
    for (std::size_t i = 0; i < m; ++i) r.rejected[i] = r.adjusted[i] <= q;
    return r;
}

inline const char* significance_stars(double p) {
    if (p < 0.001) return "***";
    if (p < 0.01) return "**";
    if (p < 0.05) return "*";
    return "";
}

/// Daily unit series with the covariates of the structural-break regression.
struct EventPanel {
    std::vector<std::string> units;
    std::vector<std::vector<double>> counts;  // [unit][day]
    std::vector<int> month;                   // 1..12 per day
    std::vector<int> dow;                     // 0..6 per day
    std::vector<int> discount;                // 0/1 per day
    std::vector<std::string> period;          // per day, empty for the baseline
    std::vector<std::string> date;            // optional ISO dates
    std::vector<std::string> periods{"WHO", "Lockdown", "Reopening", "Post-Recovery"};

    std::size_t days() const { return month.size(); }

    void validate() const {
        const std::size_t D = days();
        if (dow.size() != D || discount.size() != D || period.size() != D)
            throw DataError("event panel: covariate columns differ in length");
        if (!date.empty() && date.size() != D) throw DataError("event panel: date column differs in length");
        if (counts.size() != units.size()) throw DataError("event panel: one count series per unit required");
        for (std::size_t u = 0; u < counts.size(); ++u) {
            if (counts[u].size() != D) throw DataError("event panel: unit " + units[u] + " has a short series");
            for (double c : counts[u])
                if (!(c >= 0.0) || c != std::floor(c)) throw DataError("event panel: unit " + units[u] + " has a bad count");
        }
        for (const std::string& p : period)
            if (!p.empty() && std::find(periods.begin(), periods.end(), p) == periods.end())
                throw DataError("event panel: unknown period label " + p);
    }
};

struct Design {
    MatrixXd X;
    std::vector<std::string> names;

    Eigen::Index column(const std::string& name) const {
        const auto it = std::find(names.begin(), names.end(), name);
        if (it == names.end()) throw ContractError("design has no column " + name);
        return it - names.begin();
    }
};

/// intercept, trend in [0,1], month 2..12 dummies, one indicator per period, dow 1..6 dummies, discount flag.
inline Design build_design(const EventPanel& panel) {
    const std::size_t D = panel.days();
    Design d;
    d.names = {"intercept", "trend"};
    for (int m = 2; m <= 12; ++m) d.names.push_back("month_" + std::to_string(m));
    for (const std::string& p : panel.periods) d.names.push_back("period_" + p);
    for (int w = 1; w <= 6; ++w) d.names.push_back("dow_" + std::to_string(w));
    d.names.push_back("discount");
    d.X = MatrixXd::Zero(static_cast<Eigen::Index>(D), static_cast<Eigen::Index>(d.names.size()));
    for (std::size_t t = 0; t < D; ++t) {
        const auto r = static_cast<Eigen::Index>(t);
        d.X(r, 0) = 1.0;
        d.X(r, 1) = D > 1 ? static_cast<double>(t) / static_cast<double>(D - 1) : 0.0;
        if (panel.month[t] >= 2) d.X(r, 2 + panel.month[t] - 2) = 1.0;
        for (std::size_t p = 0; p < panel.periods.size(); ++p)
            if (panel.period[t] == panel.periods[p]) d.X(r, static_cast<Eigen::Index>(13 + p)) = 1.0;
        const auto base = static_cast<Eigen::Index>(13 + panel.periods.size());
        if (panel.dow[t] >= 1) d.X(r, base + panel.dow[t] - 1) = 1.0;
        d.X(r, base + 6) = panel.discount[t] ? 1.0 : 0.0;
    }
    return d;
}

}  // namespace deepdemand::eventstudy
