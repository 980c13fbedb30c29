#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "deepdemand/errors.hpp"
#include "deepdemand/numcore/rng.hpp"
#include "deepdemand/numcore/tensor.hpp"

namespace deepdemand::eventstudy {

using numcore::Shape;
using numcore::Tensor;

struct Partition {
    std::vector<std::size_t> labels;
    std::size_t k = 0;
    std::uint64_t seed = 0;
    double inertia = 0.0;
    Tensor centroids;  // k x d
    std::size_t iterations = 0;
    std::size_t reseeded = 0;
};

namespace detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

inline std::size_t distinct_rows(const Tensor& X) {
    std::set<std::vector<double>> seen;
    for (std::size_t r = 0; r < X.rows(); ++r) seen.emplace(X.row(r).begin(), X.row(r).end());
    return seen.size();
}

}  // namespace detail

/// Lloyd's algorithm from a k-means++ start. Stops at an assignment fixpoint or after max_iterations.
inline Partition kmeans(const Tensor& X, std::size_t k, std::uint64_t seed, std::size_t max_iterations = 300) {
    const std::size_t n = X.rows(), d = X.cols();
    if (k < 1) throw ContractError("kmeans: k must be >= 1");
    if (k > detail::distinct_rows(X))
        throw ContractError("kmeans: k = " + std::to_string(k) + " exceeds the number of distinct points");
    Rng rng = make_rng(seed, 0, 0x4b6d);
    Partition part;
    part.k = k;
    part.seed = seed;
    part.centroids = Tensor(Shape{k, d});
    auto set_centroid = [&](std::size_t c, std::size_t r) {
        std::copy(X.row(r).begin(), X.row(r).end(), part.centroids.row(c).begin());
    };
    set_centroid(0, static_cast<std::size_t>(rng() % n));
    std::vector<double> best(n);
    for (std::size_t r = 0; r < n; ++r) best[r] = detail::sq_dist(X.row(r), part.centroids.row(0));
    for (std::size_t c = 1; c < k; ++c) {
        const double total = std::accumulate(best.begin(), best.end(), 0.0);
        double draw = uniform01(rng) * total;
        std::size_t pick = n - 1;
        for (std::size_t r = 0; r < n; ++r) {
            if (best[r] <= 0.0) continue;
            draw -= best[r];
            if (draw < 0.0) {
                pick = r;
                break;
            }
        }
        if (best[pick] <= 0.0)  // rounding fell through to a covered point
            pick = static_cast<std::size_t>(std::max_element(best.begin(), best.end()) - best.begin());
        set_centroid(c, pick);
        for (std::size_t r = 0; r < n; ++r) best[r] = std::min(best[r], detail::sq_dist(X.row(r), part.centroids.row(c)));
    }

    part.labels.assign(n, k);
    std::vector<double> dist(n);
    for (std::size_t it = 1; it <= max_iterations; ++it) {
        bool changed = false;
        for (std::size_t r = 0; r < n; ++r) {
            std::size_t arg = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < k; ++c) {
                const double v = detail::sq_dist(X.row(r), part.centroids.row(c));
                if (v < bd) {
                    bd = v;
                    arg = c;
                }
            }
            dist[r] = bd;
            if (part.labels[r] != arg) {
                part.labels[r] = arg;
                changed = true;
            }
        }
        part.iterations = it;
        // Recompute centroids; an empty cluster takes the point farthest from its centroid.
        std::vector<std::size_t> count(k, 0);
        for (std::size_t r = 0; r < n; ++r) ++count[part.labels[r]];
        for (std::size_t c = 0; c < k; ++c) {
            if (count[c] > 0) continue;
            const std::size_t far = static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin());
            --count[part.labels[far]];
            part.labels[far] = c;
            count[c] = 1;
            dist[far] = 0.0;
            ++part.reseeded;
            changed = true;
        }
        part.centroids.fill(0.0);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t q = 0; q < d; ++q) part.centroids.at(part.labels[r], q) += X.at(r, q);
        for (std::size_t c = 0; c < k; ++c)
            for (std::size_t q = 0; q < d; ++q) part.centroids.at(c, q) /= static_cast<double>(count[c]);
        if (!changed) break;
    }
    part.inertia = 0.0;
    for (std::size_t r = 0; r < n; ++r) part.inertia += detail::sq_dist(X.row(r), part.centroids.row(part.labels[r]));
    return part;
}

/// Mean silhouette; points in singleton clusters score 0.
inline double silhouette(const Tensor& X, const std::vector<std::size_t>& labels) {
    const std::size_t n = X.rows();
    if (labels.size() != n) throw ContractError("silhouette: one label per point required");
    const std::size_t k = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
    std::vector<std::size_t> size(k, 0);
    for (std::size_t l : labels) ++size[l];
    std::size_t used = 0;
    for (std::size_t s : size) used += s > 0;
    if (used < 2) throw ContractError("silhouette: need at least two clusters");
    double total = 0.0;
    std::vector<double> sum(k);
    for (std::size_t i = 0; i < n; ++i) {
        std::fill(sum.begin(), sum.end(), 0.0);
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) sum[labels[j]] += std::sqrt(detail::sq_dist(X.row(i), X.row(j)));
        const std::size_t own = labels[i];
        if (size[own] <= 1) continue;
        const double a = sum[own] / static_cast<double>(size[own] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c)
            if (c != own && size[c] > 0) b = std::min(b, sum[c] / static_cast<double>(size[c]));
        const double m = std::max(a, b);
        total += m > 0.0 ? (b - a) / m : 0.0;
    }
    return total / static_cast<double>(n);
}

namespace detail {

struct Contingency {
    std::map<std::pair<std::size_t, std::size_t>, double> cells;
    std::map<std::size_t, double> rows, cols;
    double n = 0.0;
};

inline Contingency contingency(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    if (a.size() != b.size()) throw ContractError("partition comparison: label vectors cover different units");
    Contingency t;
    for (std::size_t i = 0; i < a.size(); ++i) {
        t.cells[{a[i], b[i]}] += 1.0;
        t.rows[a[i]] += 1.0;
        t.cols[b[i]] += 1.0;
    }
    t.n = static_cast<double>(a.size());
    return t;
}

inline double choose2(double x) { return x * (x - 1.0) / 2.0; }

}  // namespace detail

/// Adjusted Rand index.
inline double ari(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    const detail::Contingency t = detail::contingency(a, b);
    double sum_cells = 0.0, sum_rows = 0.0, sum_cols = 0.0;
    for (const auto& [key, v] : t.cells) sum_cells += detail::choose2(v);
    for (const auto& [key, v] : t.rows) sum_rows += detail::choose2(v);
    for (const auto& [key, v] : t.cols) sum_cols += detail::choose2(v);
    const double total = detail::choose2(t.n);
    const double expected = total > 0.0 ? sum_rows * sum_cols / total : 0.0;
    const double max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index == expected) return 1.0;  // both trivial partitions
    return (sum_cells - expected) / (max_index - expected);
}

/// Normalized mutual information 2 I / (H_a + H_b).
inline double nmi(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    const detail::Contingency t = detail::contingency(a, b);
    auto entropy = [&](const std::map<std::size_t, double>& m) {
        double h = 0.0;
        for (const auto& [key, v] : m) h -= v / t.n * std::log(v / t.n);
        return h;
    };
    const double ha = entropy(t.rows), hb = entropy(t.cols);
    double mi = 0.0;
    for (const auto& [key, v] : t.cells)
        mi += v / t.n * std::log(v * t.n / (t.rows.at(key.first) * t.cols.at(key.second)));
    if (ha + hb == 0.0) return 1.0;
    return 2.0 * mi / (ha + hb);
}

struct KCandidate {
    std::size_t k = 0;
    double silhouette = 0.0;
    double min_cluster_volume = 0.0;  // smallest mean daily transactions over clusters in the pre-window
    bool viable = false;
    Partition partition;
};

struct KSelection {
    std::size_t chosen = 0;
    std::vector<KCandidate> candidates;
};

/// Chooses k by silhouette among candidates whose every cluster averages at least `min_daily` transactions
/// over days [pre_begin, pre_end) of `daily_counts` (one row per point).
inline KSelection k_selection(const Tensor& X, const std::vector<std::size_t>& ks, const Tensor& daily_counts,
                              double min_daily, std::size_t pre_begin, std::size_t pre_end, std::uint64_t seed) {
    if (ks.empty()) throw ContractError("k_selection: no candidate k");
    if (daily_counts.rows() != X.rows()) throw ShapeError("k_selection: one count series per point required");
    if (pre_end <= pre_begin || pre_end > daily_counts.cols()) throw ContractError("k_selection: bad pre-window");
    KSelection sel;
    double best = -std::numeric_limits<double>::infinity();
    const double days = static_cast<double>(pre_end - pre_begin);
    for (std::size_t k : ks) {
        KCandidate c;
        c.k = k;
        c.partition = kmeans(X, k, seed);
        c.silhouette = k >= 2 ? silhouette(X, c.partition.labels) : 0.0;
        std::vector<double> vol(k, 0.0);
        for (std::size_t r = 0; r < X.rows(); ++r)
            for (std::size_t t = pre_begin; t < pre_end; ++t) vol[c.partition.labels[r]] += daily_counts.at(r, t);
        c.min_cluster_volume = *std::min_element(vol.begin(), vol.end()) / days;
        c.viable = c.min_cluster_volume >= min_daily && k >= 2;
        if (c.viable && c.silhouette > best) {
            best = c.silhouette;
            sel.chosen = k;
        }
        sel.candidates.push_back(std::move(c));
    }
    if (sel.chosen == 0) throw NumericalError("k_selection: no candidate k passes the volume filter");
    return sel;
}

struct StabilitySummary {
    std::vector<double> ranges;  // max - min of per-cluster effects, per seed
    double mean = 0.0, sd = 0.0, p5 = 0.0, p50 = 0.0, p95 = 0.0;
};

inline double percentile(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Re-clusters with n_seeds initializations and records the spread of the per-cluster effects each time.
inline StabilitySummary seed_stability(const Tensor& X, std::size_t k, std::size_t n_seeds, std::uint64_t master_seed,
                                       const std::function<std::vector<double>(const Partition&)>& effects) {
    StabilitySummary s;
    for (std::size_t r = 0; r < n_seeds; ++r) {
        const Partition p = kmeans(X, k, stream_seed(master_seed, r, 0x57ab));
        const std::vector<double> e = effects(p);
        if (e.empty()) throw ContractError("seed_stability: effect closure returned no values");
        s.ranges.push_back(*std::max_element(e.begin(), e.end()) - *std::min_element(e.begin(), e.end()));
    }
    const double n = static_cast<double>(s.ranges.size());
    s.mean = std::accumulate(s.ranges.begin(), s.ranges.end(), 0.0) / n;
    for (double v : s.ranges) s.sd += (v - s.mean) * (v - s.mean);
    s.sd = s.ranges.size() > 1 ? std::sqrt(s.sd / (n - 1.0)) : 0.0;
    s.p5 = percentile(s.ranges, 0.05);
    s.p50 = percentile(s.ranges, 0.50);
    s.p95 = percentile(s.ranges, 0.95);
    return s;
}

}  // namespace deepdemand::eventstudy
