#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "deepdemand/errors.hpp"
#include "deepdemand/numcore/rng.hpp"
#include "deepdemand/numcore/tensor.hpp"

namespace deepdemand::hedonic {

using numcore::Shape;
using numcore::Tensor;

struct GbtConfig {
    std::size_t trees = 300;
    std::size_t max_depth = 6;
    double learning_rate = 0.05;
    std::size_t min_leaf_rows = 20;
    double feature_fraction = 0.8;
    double min_split_gain = 0.0;
    std::size_t min_rows = 50;
};

/// Binary regression tree stored as a flat node array; node 0 is the root.
struct RegressionTree {
    struct Node {
        int feature = -1;  // -1 marks a leaf
        double threshold = 0.0;  // go left when x[feature] <= threshold
        int left = -1;
        int right = -1;
        double value = 0.0;
    };
    std::vector<Node> nodes;

    double predict(std::span<const double> x) const {
        int n = 0;
        while (nodes[static_cast<std::size_t>(n)].feature >= 0) {
            const Node& nd = nodes[static_cast<std::size_t>(n)];
            n = x[static_cast<std::size_t>(nd.feature)] <= nd.threshold ? nd.left : nd.right;
        }
        return nodes[static_cast<std::size_t>(n)].value;
    }
};

struct GbtEnsemble {
    std::vector<RegressionTree> trees;
    double learning_rate = 0.05;
    double base = 0.0;
    std::size_t feature_count = 0;
    std::vector<double> train_mse;  // after each round (index 0 = base only)

    double predict(std::span<const double> x) const {
        if (x.size() != feature_count)
            throw ShapeError("gbt predict: " + std::to_string(x.size()) + " features, trained on " +
                             std::to_string(feature_count));
        double s = 0.0;
        for (const RegressionTree& t : trees) s += t.predict(x);
        return base + learning_rate * s;
    }

    std::vector<double> predict(const Tensor& X) const {
        std::vector<double> out(X.rows());
        for (std::size_t r = 0; r < X.rows(); ++r) out[r] = predict(X.row(r));
        return out;
    }
};

namespace detail {

struct SplitCandidate {
    double gain = 0.0;
    int feature = -1;
    double threshold = 0.0;
};

/// Grows one least-squares tree level by level with exact greedy split search over presorted columns.
inline RegressionTree grow_tree(const Tensor& X, std::span<const double> residual,
                                const std::vector<std::vector<std::size_t>>& sorted, std::span<const std::size_t> features,
                                const GbtConfig& cfg) {
    const std::size_t n = X.rows();
    RegressionTree tree;
    tree.nodes.push_back({});
    std::vector<int> node_of(n, 0);
    std::vector<int> frontier{0};
    for (std::size_t depth = 0; depth < cfg.max_depth && !frontier.empty(); ++depth) {
        const std::size_t nn = tree.nodes.size();
        std::vector<double> tot_sum(nn, 0.0);
        std::vector<std::size_t> tot_cnt(nn, 0);
        for (std::size_t r = 0; r < n; ++r) {
            tot_sum[static_cast<std::size_t>(node_of[r])] += residual[r];
            ++tot_cnt[static_cast<std::size_t>(node_of[r])];
        }
        std::vector<char> active(nn, 0);
        for (int f : frontier) active[static_cast<std::size_t>(f)] = 1;
        std::vector<SplitCandidate> best(nn);
        std::vector<double> left_sum(nn);
        std::vector<std::size_t> left_cnt(nn);
        std::vector<double> last_value(nn);
        for (std::size_t f : features) {
            std::fill(left_sum.begin(), left_sum.end(), 0.0);
            std::fill(left_cnt.begin(), left_cnt.end(), 0);
            std::fill(last_value.begin(), last_value.end(), NAN);
            for (std::size_t r : sorted[f]) {
                const auto node = static_cast<std::size_t>(node_of[r]);
                if (!active[node]) continue;
                const double x = X.at(r, f);
                // Evaluate the boundary between the previous distinct value and this one.
                if (left_cnt[node] >= cfg.min_leaf_rows && x != last_value[node] &&
                    tot_cnt[node] - left_cnt[node] >= cfg.min_leaf_rows) {
                    const double ls = left_sum[node];
                    const double rs = tot_sum[node] - ls;
                    const double lc = static_cast<double>(left_cnt[node]);
                    const double rc = static_cast<double>(tot_cnt[node] - left_cnt[node]);
                    const double gain =
                        ls * ls / lc + rs * rs / rc - tot_sum[node] * tot_sum[node] / static_cast<double>(tot_cnt[node]);
                    if (gain > best[node].gain) {
                        best[node].gain = gain;
                        best[node].feature = static_cast<int>(f);
                        best[node].threshold = 0.5 * (last_value[node] + x);
                    }
                }
                left_sum[node] += residual[r];
                ++left_cnt[node];
                last_value[node] = x;
            }
        }
        std::vector<int> next;
        for (int f : frontier) {
            const auto idx = static_cast<std::size_t>(f);
            const SplitCandidate& s = best[idx];
            if (s.feature < 0 || s.gain <= cfg.min_split_gain) continue;
            const int l = static_cast<int>(tree.nodes.size());
            tree.nodes.push_back({});
            tree.nodes.push_back({});
            tree.nodes[idx].feature = s.feature;
            tree.nodes[idx].threshold = s.threshold;
            tree.nodes[idx].left = l;
            tree.nodes[idx].right = l + 1;
            next.push_back(l);
            next.push_back(l + 1);
        }
        if (next.empty()) break;
        for (std::size_t r = 0; r < n; ++r) {
            const RegressionTree::Node& nd = tree.nodes[static_cast<std::size_t>(node_of[r])];
            if (nd.feature >= 0)
                node_of[r] = X.at(r, static_cast<std::size_t>(nd.feature)) <= nd.threshold ? nd.left : nd.right;
        }
        frontier = std::move(next);
    }
    std::vector<double> leaf_sum(tree.nodes.size(), 0.0);
    std::vector<std::size_t> leaf_cnt(tree.nodes.size(), 0);
    for (std::size_t r = 0; r < n; ++r) {
        leaf_sum[static_cast<std::size_t>(node_of[r])] += residual[r];
        ++leaf_cnt[static_cast<std::size_t>(node_of[r])];
    }
    for (std::size_t i = 0; i < tree.nodes.size(); ++i)
        if (tree.nodes[i].feature < 0)
            tree.nodes[i].value = leaf_cnt[i] ? leaf_sum[i] / static_cast<double>(leaf_cnt[i]) : 0.0;
    return tree;
}

inline double mse(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return a.empty() ? 0.0 : s / static_cast<double>(a.size());
}

}  // namespace detail

/// Least-squares gradient boosting. A constant target yields the base mean and no trees.
inline GbtEnsemble fit_gbt(const Tensor& X, std::span<const double> y, const GbtConfig& cfg, std::uint64_t seed) {
    const std::size_t n = X.rows();
    if (y.size() != n) throw ShapeError("fit_gbt: target length does not match rows");
    if (n < cfg.min_rows)
        throw ContractError("fit_gbt: need at least " + std::to_string(cfg.min_rows) + " rows, got " + std::to_string(n));
    GbtEnsemble ens;
    ens.learning_rate = cfg.learning_rate;
    ens.feature_count = X.cols();
    ens.base = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
    std::vector<double> pred(n, ens.base);
    ens.train_mse.push_back(detail::mse(pred, y));
    const bool constant = std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; });
    if (constant) return ens;

    std::vector<std::vector<std::size_t>> sorted(X.cols());
    for (std::size_t f = 0; f < X.cols(); ++f) {
        sorted[f].resize(n);
        std::iota(sorted[f].begin(), sorted[f].end(), std::size_t{0});
        std::stable_sort(sorted[f].begin(), sorted[f].end(),
                         [&](std::size_t a, std::size_t b) { return X.at(a, f) < X.at(b, f); });
    }
    Rng rng = make_rng(seed, 0, 0x6b7);
    const std::size_t n_feat =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.feature_fraction * static_cast<double>(X.cols()))));
    std::vector<std::size_t> all(X.cols());
    std::iota(all.begin(), all.end(), std::size_t{0});
    std::vector<double> residual(n);
    for (std::size_t round = 0; round < cfg.trees; ++round) {
        for (std::size_t r = 0; r < n; ++r) residual[r] = y[r] - pred[r];
        shuffle_in_place(all, rng);
        std::vector<std::size_t> feats(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_feat));
        std::sort(feats.begin(), feats.end());
        RegressionTree tree = detail::grow_tree(X, residual, sorted, feats, cfg);
        for (std::size_t r = 0; r < n; ++r) pred[r] += cfg.learning_rate * tree.predict(X.row(r));
        ens.trees.push_back(std::move(tree));
        ens.train_mse.push_back(detail::mse(pred, y));
    }
    return ens;
}

/// Fold index per row, assigned by group (e.g. article id) so a group never straddles folds.
inline std::vector<std::size_t> group_folds(std::span<const long long> groups, std::size_t folds, std::uint64_t seed) {
    std::vector<long long> uniq(groups.begin(), groups.end());
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    Rng rng = make_rng(seed, 0, 0xf01d);
    shuffle_in_place(uniq, rng);
    std::vector<std::size_t> out(groups.size());
    std::vector<std::pair<long long, std::size_t>> fold_of;
    for (std::size_t k = 0; k < uniq.size(); ++k) fold_of.emplace_back(uniq[k], k % folds);
    std::sort(fold_of.begin(), fold_of.end());
    for (std::size_t r = 0; r < groups.size(); ++r) {
        auto it = std::lower_bound(fold_of.begin(), fold_of.end(), std::pair{groups[r], std::size_t{0}});
        out[r] = it->second;
    }
    return out;
}

/// Out-of-fold predictions from a k-fold cross-fit with group-level folds.
inline std::vector<double> cross_fit_predictions(const Tensor& X, std::span<const double> y,
                                                 std::span<const long long> groups, const GbtConfig& cfg,
                                                 std::uint64_t seed, std::size_t folds = 5) {
    if (groups.size() != X.rows() || y.size() != X.rows()) throw ShapeError("cross_fit: row counts differ");
    const std::vector<std::size_t> fold = group_folds(groups, folds, seed);
    std::vector<double> oof(X.rows(), 0.0);
    GbtConfig inner = cfg;
    inner.min_rows = 1;
    for (std::size_t k = 0; k < folds; ++k) {
        std::vector<std::size_t> train, test;
        for (std::size_t r = 0; r < X.rows(); ++r) (fold[r] == k ? test : train).push_back(r);
        if (test.empty()) continue;
        if (train.empty()) throw ContractError("cross_fit: a fold leaves no training rows");
        Tensor Xt(Shape{train.size(), X.cols()});
        std::vector<double> yt(train.size());
        for (std::size_t i = 0; i < train.size(); ++i) {
            std::copy(X.row(train[i]).begin(), X.row(train[i]).end(), Xt.row(i).begin());
            yt[i] = y[train[i]];
        }
        const GbtEnsemble ens = fit_gbt(Xt, yt, inner, stream_seed(seed, k, 0xcf));
        for (std::size_t r : test) oof[r] = ens.predict(X.row(r));
    }
    return oof;
}

}  // namespace deepdemand::hedonic
