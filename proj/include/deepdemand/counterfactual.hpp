#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <vector>

#include "deepdemand/eventstudy/cluster.hpp"
#include "deepdemand/market.hpp"

namespace deepdemand::counterfactual {

using market::MarketContext;
using market::MatrixXd;
using market::VectorXd;
using numcore::Shape;
using numcore::Tensor;

// ---------------------------------------------------------------------------------------------
// Assortment pruning.

struct PruneResult {
    double depth = 0.0;
    std::size_t dropped = 0;
    double profit_change_a = 0.0;  // %, prices held at observed values
    double profit_change_b = 0.0;  // %, survivors re-priced at the new equilibrium
    double price_shift = 0.0;      // %, mean over survivors of the Method B price change
    bool converged = true;
    double profit_a = 0.0, profit_b = 0.0, baseline_profit = 0.0;  // per unit of market size
};

inline double profit(const MarketContext& ctx, const VectorXd& p, const VectorXd& mc) {
    return (p - mc).dot(market::shares(ctx, p));
}

inline MatrixXd subset_ownership(const MatrixXd& omega, std::span<const std::size_t> keep) {
    MatrixXd out(static_cast<Eigen::Index>(keep.size()), static_cast<Eigen::Index>(keep.size()));
    for (std::size_t a = 0; a < keep.size(); ++a)
        for (std::size_t b = 0; b < keep.size(); ++b)
            out(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
                omega(static_cast<Eigen::Index>(keep[a]), static_cast<Eigen::Index>(keep[b]));
    return out;
}

inline VectorXd subset_vector(const VectorXd& v, std::span<const std::size_t> keep) {
    VectorXd out(static_cast<Eigen::Index>(keep.size()));
    for (std::size_t a = 0; a < keep.size(); ++a) out(static_cast<Eigen::Index>(a)) = v(static_cast<Eigen::Index>(keep[a]));
    return out;
}

/// Drops the lowest-share fraction of items and compares profit with and without re-pricing.
inline std::vector<PruneResult> prune_assortment(const MarketContext& ctx, const VectorXd& prices, const VectorXd& mc,
                                                 const MatrixXd& omega, const std::vector<double>& depths,
                                                 const market::SolverOptions& opt = {}) {
    const std::size_t J = ctx.item_count();
    if (static_cast<std::size_t>(prices.size()) != J || static_cast<std::size_t>(mc.size()) != J)
        throw ShapeError("prune_assortment: prices and costs must cover every item");
    const VectorXd S0 = market::shares(ctx, prices);
    const double base = (prices - mc).dot(S0);
    std::vector<std::size_t> order(J);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return S0(static_cast<Eigen::Index>(a)) < S0(static_cast<Eigen::Index>(b)); });
    std::vector<PruneResult> out;
    for (double depth : depths) {
        if (!(depth >= 0.0 && depth < 1.0)) throw ContractError("prune_assortment: depth must lie in [0, 1)");
        PruneResult r;
        r.depth = depth;
        r.baseline_profit = base;
        r.dropped = static_cast<std::size_t>(std::floor(depth * static_cast<double>(J) + 1e-9));
        std::vector<std::size_t> keep(order.begin() + static_cast<std::ptrdiff_t>(r.dropped), order.end());
        std::sort(keep.begin(), keep.end());
        const MarketContext sub = market::subset_items(ctx, keep);
        const VectorXd p = subset_vector(prices, keep);
        const VectorXd c = subset_vector(mc, keep);
        r.profit_a = profit(sub, p, c);
        const market::Equilibrium eq = market::solve_bertrand_nash(sub, c, subset_ownership(omega, keep), p, opt);
        r.converged = eq.converged;
        r.profit_b = profit(sub, eq.prices, c);
        r.profit_change_a = 100.0 * (r.profit_a / base - 1.0);
        r.profit_change_b = 100.0 * (r.profit_b / base - 1.0);
        r.price_shift = 100.0 * (eq.prices.cwiseQuotient(p).array() - 1.0).mean();
        out.push_back(r);
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Taste-space collapse.

struct CollapseResult {
    double sigma = 0.0;
    double profit_change = 0.0;    // %
    double cs_per_consumer = 0.0;  // mean compensating variation
    double total_welfare = 0.0;    // market size times mean CV plus producer surplus change
    double price_change = 0.0;     // %, mean over items
    double markup_change = 0.0;    // %, mean over items
    std::vector<double> cosine_before, cosine_after;  // per class, mean cosine to the class centroid
    bool converged = true;
    VectorXd prices;
};

inline double mean_cosine_to_centroid(const Tensor& t) {
    std::vector<double> c(t.cols(), 0.0);
    for (std::size_t j = 0; j < t.rows(); ++j)
        for (std::size_t q = 0; q < t.cols(); ++q) c[q] += t.at(j, q) / static_cast<double>(t.rows());
    const double cn = numcore::norm2(c);
    double s = 0.0;
    for (std::size_t j = 0; j < t.rows(); ++j) s += numcore::dot(t.row(j), c) / (numcore::norm2(t.row(j)) * cn);
    return s / static_cast<double>(t.rows());
}

/// Moves each unit item taste vector toward its class centroid by sigma within-class standard deviations of
/// the centroid distances (never past the centroid), then re-normalizes.
inline Tensor collapse_item_taste(const Tensor& t, double sigma) {
    if (!(sigma >= 0.0)) throw ContractError("collapse: sigma must be >= 0");
    const std::size_t J = t.rows(), K = t.cols();
    std::vector<double> c(K, 0.0);
    for (std::size_t j = 0; j < J; ++j)
        for (std::size_t q = 0; q < K; ++q) c[q] += t.at(j, q) / static_cast<double>(J);
    std::vector<double> dist(J);
    for (std::size_t j = 0; j < J; ++j) {
        double s = 0.0;
        for (std::size_t q = 0; q < K; ++q) s += (c[q] - t.at(j, q)) * (c[q] - t.at(j, q));
        dist[j] = std::sqrt(s);
    }
    const double mean = std::accumulate(dist.begin(), dist.end(), 0.0) / static_cast<double>(J);
    double var = 0.0;
    for (double d : dist) var += (d - mean) * (d - mean);
    const double sd = J > 1 ? std::sqrt(var / static_cast<double>(J - 1)) : 0.0;
    Tensor out = t;
    if (sigma == 0.0) return out;
    for (std::size_t j = 0; j < J; ++j) {
        if (dist[j] == 0.0) continue;
        const double step = std::min(sigma * sd, dist[j]) / dist[j];
        for (std::size_t q = 0; q < K; ++q) out.at(j, q) += step * (c[q] - t.at(j, q));
        const double n = numcore::norm2(out.row(j));
        if (!(n > 0.0)) throw NumericalError("collapse: item " + std::to_string(j) + " collapsed to the origin");
        for (double& v : out.row(j)) v /= n;
    }
    return out;
}

/// Collapses item tastes, re-solves the equilibrium from the baseline prices and reports the changes.
/// The baseline is (prices, mc) on the uncollapsed market.
inline CollapseResult collapse_taste(const demand::DemandModel& model, const demand::ChoicePanel& panel,
                                     std::size_t week, std::span<const std::size_t> consumers, const VectorXd& prices,
                                     const VectorXd& mc, const MatrixXd& omega, double sigma, double market_size,
                                     const market::SolverOptions& opt = {}) {
    if (!model.spec.taste) throw ContractError("collapse_taste: model has no taste channel");
    std::vector<std::size_t> items(panel.item_count());
    std::iota(items.begin(), items.end(), std::size_t{0});
    const demand::ModelCache cache = demand::build_cache(model, panel);
    std::vector<Tensor> moved;
    CollapseResult r;
    r.sigma = sigma;
    for (std::size_t c = 0; c < cache.classes; ++c) {
        moved.push_back(collapse_item_taste(cache.item_taste[c], sigma));
        r.cosine_before.push_back(mean_cosine_to_centroid(cache.item_taste[c]));
        r.cosine_after.push_back(mean_cosine_to_centroid(moved.back()));
    }
    const MarketContext base = market::make_context(model, panel, week, items, consumers);
    const MarketContext coll = market::make_context(model, panel, week, items, consumers, &moved);
    const market::Equilibrium eq = market::solve_bertrand_nash(coll, mc, omega, prices, opt);
    r.converged = eq.converged;
    r.prices = eq.prices;
    const double p0 = profit(base, prices, mc), p1 = profit(coll, eq.prices, mc);
    r.profit_change = 100.0 * (p1 / p0 - 1.0);
    const VectorXd cv = market::consumer_surplus(coll, eq.prices) - market::consumer_surplus(base, prices);
    r.cs_per_consumer = cv.mean();
    r.total_welfare = market_size * (r.cs_per_consumer + p1 - p0);
    r.price_change = 100.0 * (eq.prices.cwiseQuotient(prices).array() - 1.0).mean();
    r.markup_change = 100.0 * ((eq.prices - mc).cwiseQuotient(prices - mc).array() - 1.0).mean();
    return r;
}

// ---------------------------------------------------------------------------------------------
// Segmented pricing.

struct SegmentOutcome {
    double profit = 0.0;       // sum over segments of segment size times per-consumer profit
    double price_shift = 0.0;  // %, consumer-weighted mean of segment price changes vs the reference prices
    std::size_t converged = 0;
    std::size_t segments = 0;
};

/// Each segment gets its own equilibrium prices.
inline SegmentOutcome segment_profit(const MarketContext& ctx, const std::vector<std::size_t>& labels,
                                     const VectorXd& mc, const MatrixXd& omega, const VectorXd& p_ref,
                                     const market::SolverOptions& opt = {}) {
    if (labels.size() != ctx.consumer_count()) throw ContractError("segment_profit: one label per consumer required");
    std::map<std::size_t, std::vector<Eigen::Index>> groups;
    for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(static_cast<Eigen::Index>(i));
    SegmentOutcome out;
    for (const auto& [label, members] : groups) {
        MarketContext seg;
        seg.items = ctx.items;
        seg.weights = ctx.weights;
        seg.outside_utility = ctx.outside_utility;
        for (std::size_t c = 0; c < ctx.class_count(); ++c) {
            seg.alpha.push_back(ctx.alpha[c](members));
            seg.base.push_back(ctx.base[c](members, Eigen::all));
        }
        const market::Equilibrium eq = market::solve_bertrand_nash(seg, mc, omega, p_ref, opt);
        const double n = static_cast<double>(members.size());
        out.profit += n * profit(seg, eq.prices, mc);
        out.price_shift += n * 100.0 * (eq.prices.cwiseQuotient(p_ref).array() - 1.0).mean();
        out.converged += eq.converged;
        ++out.segments;
    }
    out.price_shift /= static_cast<double>(labels.size());
    return out;
}

/// Reassigns members of clusters smaller than min_size to the nearest surviving centroid; labels are compacted.
inline std::size_t merge_small_segments(const Tensor& points, eventstudy::Partition& part, std::size_t min_size) {
    std::vector<std::size_t> size(part.k, 0);
    for (std::size_t l : part.labels) ++size[l];
    std::vector<bool> alive(part.k);
    std::size_t merged = 0;
    for (std::size_t c = 0; c < part.k; ++c) alive[c] = size[c] >= min_size;
    if (std::none_of(alive.begin(), alive.end(), [](bool b) { return b; }))
        alive[static_cast<std::size_t>(std::max_element(size.begin(), size.end()) - size.begin())] = true;
    for (std::size_t c = 0; c < part.k; ++c) merged += !alive[c];
    for (std::size_t i = 0; i < part.labels.size(); ++i) {
        if (alive[part.labels[i]]) continue;
        double best = INFINITY;
        for (std::size_t c = 0; c < part.k; ++c) {
            if (!alive[c]) continue;
            const double d = eventstudy::detail::sq_dist(points.row(i), part.centroids.row(c));
            if (d < best) {
                best = d;
                part.labels[i] = c;
            }
        }
    }
    std::vector<std::size_t> remap(part.k, 0);
    std::size_t next = 0;
    for (std::size_t c = 0; c < part.k; ++c)
        if (alive[c]) remap[c] = next++;
    for (std::size_t& l : part.labels) l = remap[l];
    part.k = next;
    return merged;
}

struct LadderResult {
    std::size_t segments = 0;  // requested
    std::size_t effective_segments = 0;
    std::size_t merged = 0;
    double profit = 0.0;
    double profit_gain = 0.0;  // % vs a single segment
    double price_shift = 0.0;  // % vs the reference prices
    std::size_t converged = 0;
};

/// k-means segments on consumer embeddings (rows aligned with the context's consumers).
inline std::vector<LadderResult> segment_pricing_ladder(const MarketContext& ctx, const Tensor& embeddings,
                                                        const VectorXd& mc, const MatrixXd& omega, const VectorXd& p_ref,
                                                        const std::vector<std::size_t>& segment_counts,
                                                        std::uint64_t seed = 7, std::size_t min_segment = 10,
                                                        const market::SolverOptions& opt = {}) {
    if (embeddings.rows() != ctx.consumer_count()) throw ShapeError("ladder: one embedding per consumer required");
    const std::vector<std::size_t> one(ctx.consumer_count(), 0);
    const SegmentOutcome uniform = segment_profit(ctx, one, mc, omega, p_ref, opt);
    std::vector<LadderResult> out;
    for (std::size_t ns : segment_counts) {
        if (ns < 1) throw ContractError("ladder: segment counts must be >= 1");
        LadderResult r;
        r.segments = ns;
        SegmentOutcome o = uniform;
        if (ns > 1) {
            eventstudy::Partition part = eventstudy::kmeans(embeddings, ns, seed);
            r.merged = merge_small_segments(embeddings, part, min_segment);
            o = segment_profit(ctx, part.labels, mc, omega, p_ref, opt);
        }
        r.effective_segments = o.segments;
        r.profit = o.profit;
        r.profit_gain = 100.0 * (o.profit / uniform.profit - 1.0);
        r.price_shift = o.price_shift;
        r.converged = o.converged;
        out.push_back(r);
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Recommender validation.

struct SliceRates {
    double all = 0.0, warm = 0.0, cold = 0.0;
    std::size_t users_all = 0, users_warm = 0, users_cold = 0;
};

struct CfConfig {
    std::size_t neighbors = 50;
    double shrinkage = 0.0;
    std::size_t min_co = 1;
};

struct RecallResult {
    SliceRates model, popularity, collaborative;
    CfConfig cf_config;
    std::size_t skipped_users = 0;
};

namespace detail {

/// Top-k item ids by descending score, ties by ascending id.
inline std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::size_t m = std::min(k, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m), idx.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    });
    idx.resize(m);
    return idx;
}

struct Split {
    std::vector<std::set<std::size_t>> train_items;              // per user
    std::vector<std::vector<std::size_t>> heldout;               // per user, item per event
};

/// Mean per-user hit rate on each slice for a user -> scores function.
template <typename ScoreFn>
SliceRates slice_rates(const Split& split, std::size_t J, std::size_t k, ScoreFn&& scores) {
    SliceRates r;
    std::vector<double> s(J);
    for (std::size_t u = 0; u < split.heldout.size(); ++u) {
        if (split.heldout[u].empty()) continue;
        scores(u, s);
        const auto top = top_k(s, k);
        const std::set<std::size_t> hit(top.begin(), top.end());
        std::size_t n_all = 0, h_all = 0, n_w = 0, h_w = 0, n_c = 0, h_c = 0;
        for (std::size_t j : split.heldout[u]) {
            const bool h = hit.count(j) > 0;
            const bool warm = split.train_items[u].count(j) > 0;
            ++n_all;
            h_all += h;
            (warm ? n_w : n_c) += 1;
            (warm ? h_w : h_c) += h;
        }
        r.all += static_cast<double>(h_all) / static_cast<double>(n_all);
        ++r.users_all;
        if (n_w) {
            r.warm += static_cast<double>(h_w) / static_cast<double>(n_w);
            ++r.users_warm;
        }
        if (n_c) {
            r.cold += static_cast<double>(h_c) / static_cast<double>(n_c);
            ++r.users_cold;
        }
    }
    if (r.users_all) r.all /= static_cast<double>(r.users_all);
    if (r.users_warm) r.warm /= static_cast<double>(r.users_warm);
    if (r.users_cold) r.cold /= static_cast<double>(r.users_cold);
    return r;
}

}  // namespace detail

/// Item-item cosine similarities on the binary user-item incidence matrix.
class ItemKnn {
public:
    ItemKnn(const std::vector<std::set<std::size_t>>& baskets, std::size_t J) : J_(J), co_(J * J, 0.0), n_(J, 0.0) {
        for (const auto& b : baskets)
            for (std::size_t a : b) {
                n_[a] += 1.0;
                for (std::size_t c : b)
                    if (c != a) co_[a * J + c] += 1.0;
            }
    }

    /// Neighbor lists under a configuration: for each item, the top `neighbors` similar items.
    std::vector<std::vector<std::pair<std::size_t, double>>> neighbors(const CfConfig& cfg) const {
        std::vector<std::vector<std::pair<std::size_t, double>>> out(J_);
        std::vector<double> s(J_);
        for (std::size_t j = 0; j < J_; ++j) {
            for (std::size_t l = 0; l < J_; ++l) {
                const double co = co_[j * J_ + l];
                s[l] = (l != j && co >= static_cast<double>(cfg.min_co) && co > 0.0)
                           ? co / (std::sqrt(n_[j] * n_[l]) + cfg.shrinkage)
                           : 0.0;
            }
            for (std::size_t l : detail::top_k(s, cfg.neighbors))
                if (s[l] > 0.0) out[j].emplace_back(l, s[l]);
        }
        return out;
    }

private:
    std::size_t J_;
    std::vector<double> co_;
    std::vector<double> n_;
};

/// Recall@k for the demand model's taste score at fixed prices, against popularity and item-kNN baselines.
/// `item_prices` is the price band each item is scored at.
inline RecallResult recall_at_k(const demand::DemandModel& model, const Tensor& consumers, const Tensor& items,
                                const std::vector<double>& residuals, const std::vector<double>& item_prices,
                                const std::vector<demand::ChoiceEvent>& training,
                                const std::vector<demand::ChoiceEvent>& heldout, std::size_t k) {
    const std::size_t I = consumers.rows(), J = items.rows();
    if (item_prices.size() != J) throw ShapeError("recall_at_k: one price per item required");
    detail::Split split;
    split.train_items.resize(I);
    split.heldout.resize(I);
    std::vector<double> pop(J, 0.0);
    for (const auto& e : training) {
        if (e.consumer >= I || e.item >= J) throw DataError("recall_at_k: training event out of range");
        split.train_items[e.consumer].insert(e.item);
        pop[e.item] += 1.0;
    }
    for (const auto& e : heldout) {
        if (e.consumer >= I || e.item >= J) throw DataError("recall_at_k: held-out event out of range");
        split.heldout[e.consumer].push_back(e.item);
    }
    RecallResult out;
    for (std::size_t u = 0; u < I; ++u) out.skipped_users += split.heldout[u].empty();

    const demand::ModelCache mc = demand::build_cache(model, consumers, items);
    out.model = detail::slice_rates(split, J, k, [&](std::size_t u, std::vector<double>& s) {
        for (std::size_t j = 0; j < J; ++j) {
            double v = 0.0;
            for (std::size_t c = 0; c < mc.classes; ++c) {
                double taste = 0.0;
                if (mc.has_taste)
                    for (std::size_t q = 0; q < mc.taste[c].cols(); ++q) taste += mc.taste[c].at(u, q) * mc.item_taste[c].at(j, q);
                const double resid = residuals.empty() ? 0.0 : residuals[j];
                v += mc.weights[c] * (mc.alpha[c][u] * item_prices[j] + taste + mc.gamma[c] * resid + mc.bias[c]);
            }
            s[j] = v;
        }
    });
    out.popularity = detail::slice_rates(split, J, k, [&](std::size_t, std::vector<double>& s) { s = pop; });

    const ItemKnn knn(split.train_items, J);
    bool first = true;
    for (std::size_t nb : {10u, 50u})
        for (double shrink : {0.0, 10.0})
            for (std::size_t minco : {1u, 2u}) {
                const CfConfig cfg{nb, shrink, minco};
                const auto nbrs = knn.neighbors(cfg);
                const SliceRates r = detail::slice_rates(split, J, k, [&](std::size_t u, std::vector<double>& s) {
                    std::fill(s.begin(), s.end(), 0.0);
                    for (std::size_t l : split.train_items[u])
                        for (const auto& [j, w] : nbrs[l]) s[j] += w;
                    for (std::size_t j = 0; j < J; ++j) s[j] += 1e-9 * pop[j];  // popularity breaks empty-history ties
                });
                if (first || r.all > out.collaborative.all) {
                    out.collaborative = r;
                    out.cf_config = cfg;
                    first = false;
                }
            }
    return out;
}

/// Median price per item over the training weeks it was on sale.
inline std::vector<double> median_prices(const demand::ChoicePanel& panel, std::size_t weeks) {
    std::vector<double> out(panel.item_count());
    for (std::size_t j = 0; j < panel.item_count(); ++j) {
        std::vector<double> v;
        for (std::size_t t = 0; t < std::min(weeks, panel.week_count()); ++t)
            if (panel.on_sale(j, t)) v.push_back(panel.prices.at(j, t));
        if (v.empty()) throw DataError("median_prices: item " + std::to_string(j) + " has no training price");
        std::sort(v.begin(), v.end());
        out[j] = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Scoring unseen designs.

struct DesignScore {
    std::size_t id = 0;
    std::vector<double> score;     // per class
    std::vector<std::size_t> rank;  // per class, 1 = best
    std::size_t rank_gap = 0;
};

/// Class-c score: mean over consumers of r_i^c . t^c(x), seasonal shift off.
inline std::vector<DesignScore> score_new_design(const demand::DemandModel& model, const Tensor& consumers,
                                                 const Tensor& designs) {
    if (!model.spec.taste) throw ContractError("score_new_design: model has no taste channel");
    const std::size_t C = model.classes.size(), N = designs.rows();
    if (designs.cols() != model.spec.item_dim)
        throw ShapeError("score_new_design: designs have " + std::to_string(designs.cols()) + " features, expected " +
                         std::to_string(model.spec.item_dim));
    std::vector<DesignScore> out(N);
    for (std::size_t n = 0; n < N; ++n) {
        out[n].id = n;
        out[n].score.resize(C);
        out[n].rank.resize(C);
    }
    for (std::size_t c = 0; c < C; ++c) {
        const Tensor r = model.classes[c].r_net.forward(consumers);
        std::vector<double> rbar(r.cols(), 0.0);
        for (std::size_t i = 0; i < r.rows(); ++i)
            for (std::size_t q = 0; q < r.cols(); ++q) rbar[q] += r.at(i, q) / static_cast<double>(r.rows());
        std::vector<double> s(N);
        for (std::size_t n = 0; n < N; ++n) {
            const auto t = demand::normalized_item_taste(model, c, designs.row(n), n);
            s[n] = out[n].score[c] = numcore::dot(rbar, t);
        }
        const auto order = detail::top_k(s, N);
        for (std::size_t pos = 0; pos < order.size(); ++pos) out[order[pos]].rank[c] = pos + 1;
    }
    for (DesignScore& d : out) {
        const auto [lo, hi] = std::minmax_element(d.rank.begin(), d.rank.end());
        d.rank_gap = *hi - *lo;
    }
    return out;
}

/// Kendall tau-b between two score vectors.
inline double kendall_tau(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ContractError("kendall_tau: lengths differ");
    double concordant = 0.0, discordant = 0.0, ties_a = 0.0, ties_b = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = i + 1; j < a.size(); ++j) {
            const double da = a[i] - a[j], db = b[i] - b[j];
            if (da == 0.0 && db == 0.0) continue;
            if (da == 0.0) {
                ties_a += 1.0;
                continue;
            }
            if (db == 0.0) {
                ties_b += 1.0;
                continue;
            }
            (da * db > 0.0 ? concordant : discordant) += 1.0;
        }
    const double denom = std::sqrt((concordant + discordant + ties_a) * (concordant + discordant + ties_b));
    return denom > 0.0 ? (concordant - discordant) / denom : 0.0;
}

}  // namespace deepdemand::counterfactual
