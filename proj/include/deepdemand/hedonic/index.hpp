#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "deepdemand/hedonic/gbt.hpp"

namespace deepdemand::hedonic {

/// Article-month rows with a feature block. Months are integer indices, not necessarily starting at 1.
struct HedonicPanel {
    std::vector<long long> article;
    std::vector<int> month;
    std::vector<double> log_price;
    std::vector<double> quantity;
    Tensor features;                 // rows x F, month excluded
    std::vector<std::size_t> category;  // optional small categorical block

    std::size_t rows() const { return article.size(); }

    void validate() const {
        const std::size_t n = rows();
        if (month.size() != n || log_price.size() != n || quantity.size() != n)
            throw ShapeError("hedonic panel: column lengths differ");
        if (features.rows() != n && n > 0) throw ShapeError("hedonic panel: feature rows differ from panel rows");
        if (!category.empty() && category.size() != n) throw ShapeError("hedonic panel: category column length differs");
        std::set<std::pair<long long, int>> seen;
        for (std::size_t r = 0; r < n; ++r) {
            if (!(quantity[r] >= 0.0)) throw DataError("hedonic panel: negative quantity in row " + std::to_string(r));
            if (!std::isfinite(log_price[r])) throw DataError("hedonic panel: non-finite log price in row " + std::to_string(r));
            for (double v : features.row(r))
                if (!std::isfinite(v)) throw DataError("hedonic panel: incomplete features in row " + std::to_string(r));
            if (!seen.emplace(article[r], month[r]).second)
                throw DataError("hedonic panel: duplicate article-month in row " + std::to_string(r));
        }
    }

    std::vector<int> months() const {
        std::vector<int> m(month.begin(), month.end());
        std::sort(m.begin(), m.end());
        m.erase(std::unique(m.begin(), m.end()), m.end());
        return m;
    }

    HedonicPanel select(const std::vector<std::size_t>& rows_) const {
        HedonicPanel out;
        out.features = Tensor(Shape{rows_.size(), features.cols()});
        for (std::size_t i = 0; i < rows_.size(); ++i) {
            const std::size_t r = rows_[i];
            out.article.push_back(article[r]);
            out.month.push_back(month[r]);
            out.log_price.push_back(log_price[r]);
            out.quantity.push_back(quantity[r]);
            if (!category.empty()) out.category.push_back(category[r]);
            std::copy(features.row(r).begin(), features.row(r).end(), out.features.row(i).begin());
        }
        return out;
    }
};

/// Feature block with the month appended as the last column.
inline Tensor design(const HedonicPanel& p) {
    const std::size_t F = p.features.cols();
    Tensor X(Shape{p.rows(), F + 1});
    for (std::size_t r = 0; r < p.rows(); ++r) {
        std::copy(p.features.row(r).begin(), p.features.row(r).end(), X.row(r).begin());
        X.at(r, F) = static_cast<double>(p.month[r]);
    }
    return X;
}

inline Tensor features_only(const HedonicPanel& p) { return p.features; }

inline double predict_price(const GbtEnsemble& f, std::span<const double> v, std::span<const double> h) {
    std::vector<double> x(v.begin(), v.end());
    x.insert(x.end(), h.begin(), h.end());
    return f.predict(x);
}

inline GbtEnsemble fit_surface(const HedonicPanel& p, const GbtConfig& cfg, std::uint64_t seed) {
    return fit_gbt(design(p), p.log_price, cfg, seed);
}

// ---------------------------------------------------------------------------------------------
// Index series.

struct IndexLink {
    int from = 0, to = 0;
    std::size_t matched = 0;
    double jevons = 1.0;
    double laspeyres = 1.0, paasche = 1.0, fisher = 1.0;
    bool gap = false;  // link undefined; the chain carries forward
};

struct IndexSeries {
    std::vector<int> months;
    std::vector<IndexLink> links;
    std::vector<double> jevons;  // chained, 1 at the first month
    std::vector<double> fisher;
    std::vector<double> lower, upper;  // band on the chained Fisher, empty when not computed
    double half_width = 0.0;           // conformal log-scale half-width
    std::vector<std::string> warnings;
};

namespace detail {

/// month -> (article -> row)
inline std::map<int, std::map<long long, std::size_t>> rows_by_month(const HedonicPanel& p) {
    std::map<int, std::map<long long, std::size_t>> out;
    for (std::size_t r = 0; r < p.rows(); ++r) out[p.month[r]][p.article[r]] = r;
    return out;
}

/// Articles sold (positive quantity) in both months.
inline std::vector<std::pair<std::size_t, std::size_t>> matched(const HedonicPanel& p, const std::map<long long, std::size_t>& a,
                                                               const std::map<long long, std::size_t>& b) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (const auto& [id, ra] : a) {
        auto it = b.find(id);
        if (it != b.end() && p.quantity[ra] > 0.0 && p.quantity[it->second] > 0.0) out.emplace_back(ra, it->second);
    }
    return out;
}

inline void chain(IndexSeries& s) {
    s.jevons.assign(1, 1.0);
    s.fisher.assign(1, 1.0);
    for (const IndexLink& l : s.links) {
        s.jevons.push_back(s.jevons.back() * (l.gap ? 1.0 : l.jevons));
        s.fisher.push_back(s.fisher.back() * (l.gap ? 1.0 : l.fisher));
    }
}

/// Links from observed prices and per-row predicted log prices.
inline IndexSeries links_from_predictions(const HedonicPanel& p, std::span<const double> predicted) {
    IndexSeries s;
    const auto by_month = rows_by_month(p);
    for (const auto& [m, _] : by_month) s.months.push_back(m);
    for (std::size_t k = 0; k + 1 < s.months.size(); ++k) {
        IndexLink l;
        l.from = s.months[k];
        l.to = s.months[k + 1];
        const auto pairs = matched(p, by_month.at(l.from), by_month.at(l.to));
        l.matched = pairs.size();
        if (pairs.empty()) {
            l.gap = true;
            s.warnings.push_back("no matched articles between months " + std::to_string(l.from) + " and " + std::to_string(l.to));
            s.links.push_back(l);
            continue;
        }
        double log_j = 0.0, ln = 0.0, ld = 0.0, pn = 0.0, pd = 0.0;
        for (const auto& [a, b] : pairs) {
            log_j += p.log_price[b] - p.log_price[a];
            const double p0 = std::exp(predicted[a]), p1 = std::exp(predicted[b]);
            ln += p1 * p.quantity[a];
            ld += p0 * p.quantity[a];
            pn += p1 * p.quantity[b];
            pd += p0 * p.quantity[b];
        }
        l.jevons = std::exp(log_j / static_cast<double>(pairs.size()));
        if (!(ld > 0.0 && pd > 0.0)) {
            l.gap = true;
            s.warnings.push_back("zero Fisher denominator between months " + std::to_string(l.from) + " and " + std::to_string(l.to));
        } else {
            l.laspeyres = ln / ld;
            l.paasche = pn / pd;
            l.fisher = std::sqrt(l.laspeyres * l.paasche);
        }
        s.links.push_back(l);
    }
    chain(s);
    return s;
}

}  // namespace detail

/// Chained geometric mean of matched price relatives. prices[t][j] is NaN when article j is absent in month t.
inline std::vector<double> jevons_index(const std::vector<std::vector<double>>& prices, std::vector<bool>* gaps = nullptr) {
    std::vector<double> chain(prices.empty() ? 0 : 1, 1.0);
    if (gaps) gaps->clear();
    for (std::size_t t = 0; t + 1 < prices.size(); ++t) {
        double s = 0.0;
        std::size_t n = 0;
        for (std::size_t j = 0; j < std::min(prices[t].size(), prices[t + 1].size()); ++j) {
            const double a = prices[t][j], b = prices[t + 1][j];
            if (std::isnan(a) || std::isnan(b)) continue;
            if (!(a > 0.0 && b > 0.0)) throw DataError("jevons_index: prices must be positive");
            s += std::log(b / a);
            ++n;
        }
        if (gaps) gaps->push_back(n == 0);
        chain.push_back(chain.back() * (n ? std::exp(s / static_cast<double>(n)) : 1.0));
    }
    return chain;
}

/// Pooled-surface Fisher index with the matched-model Jevons alongside.
inline IndexSeries fisher_chained(const GbtEnsemble& f, const HedonicPanel& p) {
    const std::vector<double> pred = f.predict(design(p));
    return detail::links_from_predictions(p, pred);
}

// ---------------------------------------------------------------------------------------------
// Conformal bands.

/// The ceil((n+1)(1-alpha))-th smallest absolute residual.
inline double conformal_band(std::span<const double> residuals, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ContractError("conformal_band: alpha must lie in (0, 1)");
    const std::size_t n = residuals.size();
    const auto need = static_cast<std::size_t>(std::ceil(1.0 / alpha - 1e-9));
    if (n < need)
        throw ContractError("conformal_band: " + std::to_string(n) + " residuals cannot support coverage at alpha " +
                            std::to_string(alpha));
    std::vector<double> a(n);
    for (std::size_t i = 0; i < n; ++i) a[i] = std::abs(residuals[i]);
    std::sort(a.begin(), a.end());
    auto k = static_cast<std::size_t>(std::ceil(static_cast<double>(n + 1) * (1.0 - alpha) - 1e-9));
    k = std::clamp<std::size_t>(k, 1, n);
    return a[k - 1];
}

struct PriceBand {
    double fair = 0.0, lower = 0.0, upper = 0.0;
};

inline PriceBand price_band(double predicted_log_price, double half_width) {
    return {std::exp(predicted_log_price), std::exp(predicted_log_price - half_width), std::exp(predicted_log_price + half_width)};
}

/// Monte Carlo stress band on the chained Fisher: predicted log prices perturbed by resampled out-of-fold residuals.
inline void stress_band(IndexSeries& s, const HedonicPanel& p, std::span<const double> predicted,
                        std::span<const double> residuals, double alpha, std::size_t draws, std::uint64_t seed) {
    const std::size_t T = s.fisher.size();
    std::vector<std::vector<double>> paths(T);
    Rng rng = make_rng(seed, 0, 0x57e55);
    std::vector<double> perturbed(predicted.begin(), predicted.end());
    for (std::size_t d = 0; d < draws; ++d) {
        for (std::size_t r = 0; r < perturbed.size(); ++r) {
            const auto k = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(residuals.size()));
            perturbed[r] = predicted[r] + residuals[std::min(k, residuals.size() - 1)];
        }
        const IndexSeries z = detail::links_from_predictions(p, perturbed);
        for (std::size_t t = 0; t < T; ++t) paths[t].push_back(z.fisher[t]);
    }
    s.lower.resize(T);
    s.upper.resize(T);
    for (std::size_t t = 0; t < T; ++t) {
        std::sort(paths[t].begin(), paths[t].end());
        const auto at = [&](double q) {
            const double pos = q * static_cast<double>(paths[t].size() - 1);
            const auto lo = static_cast<std::size_t>(std::floor(pos));
            const std::size_t hi = std::min(lo + 1, paths[t].size() - 1);
            return paths[t][lo] + (pos - static_cast<double>(lo)) * (paths[t][hi] - paths[t][lo]);
        };
        s.lower[t] = at(alpha / 2.0);
        s.upper[t] = at(1.0 - alpha / 2.0);
    }
}

struct PooledIndexConfig {
    GbtConfig gbt;
    double alpha = 0.10;
    std::size_t folds = 5;
    std::size_t stress_draws = 200;
};

/// Pooled surface, Fisher chain, conformal half-width from article-level out-of-fold residuals and a stress band.
inline IndexSeries pooled_index(const HedonicPanel& p, const PooledIndexConfig& cfg, std::uint64_t seed) {
    p.validate();
    const Tensor X = design(p);
    const GbtEnsemble f = fit_gbt(X, p.log_price, cfg.gbt, seed);
    const std::vector<double> pred = f.predict(X);
    IndexSeries s = detail::links_from_predictions(p, pred);
    const std::vector<double> oof = cross_fit_predictions(X, p.log_price, p.article, cfg.gbt, stream_seed(seed, 1, 0xcf), cfg.folds);
    std::vector<double> resid(p.rows());
    for (std::size_t r = 0; r < p.rows(); ++r) resid[r] = p.log_price[r] - oof[r];
    s.half_width = conformal_band(resid, cfg.alpha);
    if (cfg.stress_draws > 0) stress_band(s, p, pred, resid, cfg.alpha, cfg.stress_draws, stream_seed(seed, 2, 0x57));
    return s;
}

// ---------------------------------------------------------------------------------------------
// Alternatives.

struct TimeDummyResult {
    std::vector<int> months;
    std::vector<double> effect;  // log scale, base month 0
    std::vector<double> index;   // exp(effect)
    std::vector<std::string> dropped;
};

/// Pooled OLS of log price on category dummies and month dummies; the first month is the base.
inline TimeDummyResult time_dummy_index(const HedonicPanel& p, double rank_tolerance = 1e-10) {
    p.validate();
    TimeDummyResult out;
    out.months = p.months();
    if (out.months.empty()) throw ContractError("time_dummy_index: empty panel");
    std::map<int, std::size_t> month_col;
    std::vector<std::string> names{"intercept"};
    for (std::size_t k = 1; k < out.months.size(); ++k) {
        month_col[out.months[k]] = names.size();
        names.push_back("month_" + std::to_string(out.months[k]));
    }
    std::map<std::size_t, std::size_t> cat_col;
    if (!p.category.empty()) {
        std::set<std::size_t> cats(p.category.begin(), p.category.end());
        for (auto it = std::next(cats.begin()); it != cats.end(); ++it) {
            cat_col[*it] = names.size();
            names.push_back("category_" + std::to_string(*it));
        }
    }
    const auto n = static_cast<Eigen::Index>(p.rows());
    Eigen::MatrixXd X = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(names.size()));
    Eigen::VectorXd y(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        const auto ru = static_cast<std::size_t>(r);
        X(r, 0) = 1.0;
        if (auto it = month_col.find(p.month[ru]); it != month_col.end()) X(r, static_cast<Eigen::Index>(it->second)) = 1.0;
        if (!p.category.empty())
            if (auto it = cat_col.find(p.category[ru]); it != cat_col.end()) X(r, static_cast<Eigen::Index>(it->second)) = 1.0;
        y(r) = p.log_price[ru];
    }
    // Greedy drop of columns that add no rank, in column order.
    std::vector<Eigen::Index> keep;
    for (Eigen::Index c = 0; c < X.cols(); ++c) {
        keep.push_back(c);
        Eigen::MatrixXd sub = X(Eigen::all, keep);
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(sub);
        qr.setThreshold(rank_tolerance);
        if (qr.rank() < static_cast<Eigen::Index>(keep.size())) {
            keep.pop_back();
            out.dropped.push_back(names[static_cast<std::size_t>(c)]);
        }
    }
    const Eigen::MatrixXd Xk = X(Eigen::all, keep);
    const Eigen::VectorXd beta = Xk.colPivHouseholderQr().solve(y);
    std::vector<double> coef(names.size(), 0.0);
    for (std::size_t k = 0; k < keep.size(); ++k) coef[static_cast<std::size_t>(keep[k])] = beta(static_cast<Eigen::Index>(k));
    for (int m : out.months) {
        const double e = month_col.count(m) ? coef[month_col.at(m)] : 0.0;
        out.effect.push_back(e);
        out.index.push_back(std::exp(e));
    }
    return out;
}

/// One surface per month (features only); falls back to the pooled surface for thin months.
inline IndexSeries per_period_index(const HedonicPanel& p, const GbtConfig& cfg, std::uint64_t seed,
                                    std::size_t min_rows_per_month = 30) {
    p.validate();
    const auto months = p.months();
    std::vector<double> pred(p.rows(), 0.0);
    std::vector<std::string> warnings;
    std::optional<GbtEnsemble> pooled;
    for (std::size_t k = 0; k < months.size(); ++k) {
        std::vector<std::size_t> rows;
        for (std::size_t r = 0; r < p.rows(); ++r)
            if (p.month[r] == months[k]) rows.push_back(r);
        if (rows.size() < std::max(min_rows_per_month, cfg.min_rows)) {
            if (!pooled) pooled = fit_surface(p, cfg, seed);
            warnings.push_back("month " + std::to_string(months[k]) + " has " + std::to_string(rows.size()) +
                               " rows; using the pooled surface");
            const Tensor X = design(p.select(rows));
            for (std::size_t i = 0; i < rows.size(); ++i) pred[rows[i]] = pooled->predict(X.row(i));
            continue;
        }
        const HedonicPanel sub = p.select(rows);
        const GbtEnsemble f = fit_gbt(sub.features, sub.log_price, cfg, stream_seed(seed, k, 0x9e7));
        for (std::size_t i = 0; i < rows.size(); ++i) pred[rows[i]] = f.predict(sub.features.row(i));
    }
    IndexSeries s = detail::links_from_predictions(p, pred);
    s.warnings.insert(s.warnings.begin(), warnings.begin(), warnings.end());
    return s;
}

// ---------------------------------------------------------------------------------------------
// Oaxaca-Blinder.

struct ObResult {
    double total = 0.0, composition = 0.0, valuation = 0.0, residual = 0.0;
};

/// Cotton-average decomposition of the mean log price change between two windows. Each surface takes the
/// design rows of its window (X1, X2 must share columns).
inline ObResult ob_decompose(const GbtEnsemble& f1, const GbtEnsemble& f2, const Tensor& X1, std::span<const double> y1,
                             const Tensor& X2, std::span<const double> y2) {
    if (X1.rows() != y1.size() || X2.rows() != y2.size()) throw ShapeError("ob_decompose: rows and targets differ");
    if (X1.rows() == 0 || X2.rows() == 0) throw ContractError("ob_decompose: empty window");
    const auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); };
    const std::vector<double> y1v(y1.begin(), y1.end()), y2v(y2.begin(), y2.end());
    const double f1_1 = mean(f1.predict(X1)), f1_2 = mean(f1.predict(X2));
    const double f2_1 = mean(f2.predict(X1)), f2_2 = mean(f2.predict(X2));
    ObResult r;
    r.total = mean(y2v) - mean(y1v);
    r.composition = 0.5 * ((f1_2 - f1_1) + (f2_2 - f2_1));
    r.valuation = 0.5 * ((f2_2 - f1_2) + (f2_1 - f1_1));
    r.residual = r.total - r.composition - r.valuation;
    return r;
}

/// Removes calendar-month means from log prices (month index taken modulo 12).
inline HedonicPanel deseasonalize(HedonicPanel p) {
    std::map<int, std::pair<double, std::size_t>> acc;
    double grand = 0.0;
    for (std::size_t r = 0; r < p.rows(); ++r) {
        auto& a = acc[((p.month[r] - 1) % 12 + 12) % 12];
        a.first += p.log_price[r];
        ++a.second;
        grand += p.log_price[r];
    }
    grand /= static_cast<double>(std::max<std::size_t>(p.rows(), 1));
    for (std::size_t r = 0; r < p.rows(); ++r) {
        const auto& a = acc[((p.month[r] - 1) % 12 + 12) % 12];
        p.log_price[r] -= a.first / static_cast<double>(a.second) - grand;
    }
    return p;
}

/// Fits period-specific surfaces on the features and decomposes.
inline ObResult ob_from_panels(const HedonicPanel& a, const HedonicPanel& b, const GbtConfig& cfg, std::uint64_t seed,
                               bool deseasonalized = false) {
    const HedonicPanel pa = deseasonalized ? deseasonalize(a) : a;
    const HedonicPanel pb = deseasonalized ? deseasonalize(b) : b;
    pa.validate();
    pb.validate();
    if (pa.features.cols() != pb.features.cols()) throw ShapeError("ob: windows have different feature widths");
    const GbtEnsemble f1 = fit_gbt(pa.features, pa.log_price, cfg, stream_seed(seed, 1, 0x0b));
    const GbtEnsemble f2 = fit_gbt(pb.features, pb.log_price, cfg, stream_seed(seed, 2, 0x0b));
    return ob_decompose(f1, f2, pa.features, pa.log_price, pb.features, pb.log_price);
}

}  // namespace deepdemand::hedonic
