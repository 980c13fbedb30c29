#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "deepdemand/numcore/adamw.hpp"
#include "deepdemand/numcore/mlp.hpp"

namespace deepdemand::tower {

using numcore::Activation;
using numcore::Graph;
using numcore::Mlp;
using numcore::Shape;
using numcore::Tensor;
using numcore::Var;

struct TowerConfig {
    std::size_t item_dim = 0;
    std::size_t user_dim = 0;
    std::size_t emb_dim = 64;
    std::size_t hidden = 256;
    std::size_t price_hidden = 16;
    double temperature = 0.07;
    std::size_t negatives = 64;
    std::size_t epochs = 20;
    std::size_t batch_size = 256;
    double learning_rate = 1e-3;
    double weight_decay = 1e-4;
    double holdout_fraction = 0.1;
    std::size_t patience = 3;

    void validate() const {
        if (emb_dim < 1) throw ContractError("TowerConfig: emb_dim must be >= 1");
        if (!(temperature > 0.0)) throw ContractError("TowerConfig: temperature must be > 0");
        if (negatives < 1) throw ContractError("TowerConfig: negatives must be >= 1");
        if (item_dim < 1 || user_dim < 1) throw ContractError("TowerConfig: feature widths must be >= 1");
        if (batch_size < 1 || epochs < 1) throw ContractError("TowerConfig: batch_size and epochs must be >= 1");
    }
};

/// Items, their categories and log reference prices, and the user feature block.
struct Catalog {
    Tensor item_features;             // [J x item_dim]
    std::vector<int> category;        // per item
    std::vector<double> log_ref_price;  // per item, input to the price tower
    Tensor user_features;             // [I x user_dim]

    std::size_t item_count() const { return item_features.rows(); }
    std::size_t user_count() const { return user_features.rows(); }

    /// Item ids grouped by category, each list ascending.
    std::map<int, std::vector<std::size_t>> items_by_category() const {
        std::map<int, std::vector<std::size_t>> out;
        for (std::size_t j = 0; j < category.size(); ++j) out[category[j]].push_back(j);
        return out;
    }

    void validate() const {
        const std::size_t J = item_count();
        if (category.size() != J || log_ref_price.size() != J)
            throw DataError("catalog: category/price lists do not match item count");
    }
};

struct PurchaseRecord {
    std::size_t consumer = 0;
    std::size_t item = 0;
    int category = 0;
    int week = 0;
    double price = 0.0;
    double log_ref_price = 0.0;
};

struct EmbeddingModel {
    Mlp user_tower;
    Mlp item_tower;
    Mlp price_tower;
    TowerConfig config;

    std::vector<numcore::Parameter*> parameters() {
        std::vector<numcore::Parameter*> out;
        for (Mlp* net : {&user_tower, &item_tower, &price_tower})
            for (numcore::Parameter* p : net->parameters()) out.push_back(p);
        return out;
    }
};

/// (d.v - softplus(d.p)) / tau
inline double affinity(std::span<const double> d, std::span<const double> v, std::span<const double> p, double tau) {
    if (!(tau > 0.0)) throw ContractError("affinity: temperature must be > 0");
    if (d.size() != v.size() || d.size() != p.size()) throw ShapeError("affinity: embedding lengths differ");
    return (numcore::dot(d, v) - numcore::softplus(numcore::dot(d, p))) / tau;
}

/// -log softmax(affinities)[positive].
inline double infonce_from_affinities(std::span<const double> affinities, std::size_t positive) {
    if (affinities.size() < 2) throw ContractError("infonce: need at least one negative");
    return numcore::log_sum_exp(affinities) - affinities[positive];
}

inline EmbeddingModel make_model(const TowerConfig& cfg, Rng& rng) {
    cfg.validate();
    EmbeddingModel m;
    m.config = cfg;
    m.user_tower = Mlp::make({cfg.user_dim, cfg.hidden, cfg.emb_dim}, {Activation::relu, Activation::identity}, rng,
                             "user_tower");
    m.item_tower = Mlp::make({cfg.item_dim, cfg.hidden, cfg.emb_dim}, {Activation::relu, Activation::identity}, rng,
                             "item_tower");
    m.price_tower = Mlp::make({1, cfg.price_hidden, cfg.emb_dim}, {Activation::tanh, Activation::identity}, rng,
                              "price_tower");
    return m;
}

namespace detail {

inline Tensor normalize_rows(Tensor t) {
    for (std::size_t r = 0; r < t.rows(); ++r) {
        const double n = numcore::norm2(t.row(r));
        if (!(n > 0.0)) throw NumericalError("tower output row " + std::to_string(r) + " has zero norm");
        for (double& v : t.row(r)) v /= n;
    }
    return t;
}

inline Tensor select_rows(const Tensor& t, std::span<const std::size_t> rows) {
    Tensor out(Shape{rows.size(), t.cols()});
    for (std::size_t k = 0; k < rows.size(); ++k) std::copy(t.row(rows[k]).begin(), t.row(rows[k]).end(), out.row(k).begin());
    return out;
}

inline Tensor price_column(std::span<const double> log_prices, std::span<const std::size_t> rows) {
    Tensor out(Shape{rows.size(), 1});
    for (std::size_t k = 0; k < rows.size(); ++k) out[k] = log_prices[rows[k]];
    return out;
}

/// Mean InfoNCE over a batch. Row b of `users` scores candidate rows cand[b] of `items`/`prices`;
/// cand[b][0] is the purchased item.
inline Var batch_infonce(Var users, Var items, Var prices, std::vector<std::vector<std::size_t>> cand, double tau) {
    const Tensor& U = users.value();
    const Tensor& V = items.value();
    const Tensor& P = prices.value();
    const std::size_t B = cand.size();
    std::vector<std::vector<double>> prob(B);
    std::vector<std::vector<double>> sig(B);
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        std::vector<double> aff(cand[b].size());
        sig[b].resize(cand[b].size());
        for (std::size_t k = 0; k < cand[b].size(); ++k) {
            const std::size_t j = cand[b][k];
            const double dp = numcore::dot(U.row(b), P.row(j));
            sig[b][k] = numcore::sigmoid(dp);
            aff[k] = (numcore::dot(U.row(b), V.row(j)) - numcore::softplus(dp)) / tau;
        }
        const double lse = numcore::log_sum_exp(aff);
        loss += lse - aff[0];
        prob[b].resize(aff.size());
        for (std::size_t k = 0; k < aff.size(); ++k) prob[b][k] = std::exp(aff[k] - lse);
    }
    loss /= static_cast<double>(B);
    return users.graph->record(
        Tensor::scalar(loss), {users, items, prices},
        [users, items, prices, cand = std::move(cand), prob = std::move(prob), sig = std::move(sig), tau](
            Graph& g, std::size_t self) {
            const double scale = g.out_grad(self)[0] / (static_cast<double>(cand.size()) * tau);
            const Tensor& U = g.value(users);
            const Tensor& V = g.value(items);
            const Tensor& P = g.value(prices);
            Tensor* gu = g.accumulate(users);
            Tensor* gv = g.accumulate(items);
            Tensor* gp = g.accumulate(prices);
            const std::size_t d = U.cols();
            for (std::size_t b = 0; b < cand.size(); ++b) {
                for (std::size_t k = 0; k < cand[b].size(); ++k) {
                    const double ga = scale * (prob[b][k] - (k == 0 ? 1.0 : 0.0));
                    const std::size_t j = cand[b][k];
                    const double s = sig[b][k];
                    for (std::size_t c = 0; c < d; ++c) {
                        if (gu) gu->at(b, c) += ga * (V.at(j, c) - s * P.at(j, c));
                        if (gv) gv->at(j, c) += ga * U.at(b, c);
                        if (gp) gp->at(j, c) -= ga * s * U.at(b, c);
                    }
                }
            }
        });
}

}  // namespace detail

struct Embeddings {
    Tensor items;   // [J x d], unit rows
    Tensor users;   // [I x d], unit rows
    Tensor prices;  // [J x d]
};

/// Runs the three towers over full feature blocks. Row order follows the inputs.
inline Embeddings extract_embeddings(const EmbeddingModel& model, const Tensor& item_features, const Tensor& user_features,
                                     std::span<const double> item_log_prices) {
    if (item_features.cols() != model.config.item_dim || user_features.cols() != model.config.user_dim)
        throw ShapeError("extract_embeddings: feature width does not match the trained towers");
    if (item_log_prices.size() != item_features.rows())
        throw ShapeError("extract_embeddings: one log price per item required");
    Embeddings e;
    e.items = detail::normalize_rows(model.item_tower.forward(item_features));
    e.users = detail::normalize_rows(model.user_tower.forward(user_features));
    Tensor pin(Shape{item_log_prices.size(), 1}, std::vector<double>(item_log_prices.begin(), item_log_prices.end()));
    e.prices = model.price_tower.forward(pin);
    return e;
}

inline Embeddings extract_embeddings(const EmbeddingModel& model, const Catalog& catalog) {
    return extract_embeddings(model, catalog.item_features, catalog.user_features, catalog.log_ref_price);
}

/// InfoNCE for one purchase against an explicit negative list (drawn from the positive's category).
inline double infonce_loss(const EmbeddingModel& model, const Catalog& catalog, const PurchaseRecord& positive,
                           std::span<const std::size_t> negatives) {
    if (negatives.empty()) throw ContractError("infonce_loss: empty negative set");
    std::vector<std::size_t> rows{positive.item};
    for (std::size_t j : negatives) {
        if (j == positive.item) throw ContractError("infonce_loss: positive item appears among negatives");
        if (catalog.category[j] != catalog.category[positive.item])
            throw ContractError("infonce_loss: negative " + std::to_string(j) + " is outside the positive's category");
        rows.push_back(j);
    }
    const Tensor items = detail::normalize_rows(model.item_tower.forward(detail::select_rows(catalog.item_features, rows)));
    const Tensor prices = model.price_tower.forward(detail::price_column(catalog.log_ref_price, rows));
    const std::size_t u = positive.consumer;
    const Tensor user = detail::normalize_rows(
        model.user_tower.forward(detail::select_rows(catalog.user_features, std::span<const std::size_t>(&u, 1))));
    std::vector<double> aff(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k)
        aff[k] = affinity(user.row(0), items.row(k), prices.row(k), model.config.temperature);
    return infonce_from_affinities(aff, 0);
}

/// Mean full-category InfoNCE over records (categories with a single item are skipped).
inline double full_category_loss(const EmbeddingModel& model, const Catalog& catalog,
                                 std::span<const PurchaseRecord> records) {
    const Embeddings e = extract_embeddings(model, catalog);
    const auto groups = catalog.items_by_category();
    double total = 0.0;
    std::size_t n = 0;
    std::vector<double> aff;
    for (const PurchaseRecord& r : records) {
        const auto& items = groups.at(catalog.category[r.item]);
        if (items.size() < 2) continue;
        aff.clear();
        double pos = 0.0;
        for (std::size_t j : items) {
            const double a = affinity(e.users.row(r.consumer), e.items.row(j), e.prices.row(j), model.config.temperature);
            aff.push_back(a);
            if (j == r.item) pos = a;
        }
        total += numcore::log_sum_exp(aff) - pos;
        ++n;
    }
    return n ? total / static_cast<double>(n) : 0.0;
}

struct TrainReport {
    std::vector<double> train_loss;    // mean sampled-negative loss per epoch
    std::vector<double> holdout_loss;  // full-category loss per epoch on the held-out split
    double initial_holdout_loss = 0.0;
    std::size_t skipped_records = 0;   // purchases in single-item categories
    std::size_t best_epoch = 0;
    bool early_stopped = false;
    std::vector<PurchaseRecord> holdout;
};

/// Trains the three towers on purchase records with within-category sampled negatives.
/// The item tower only ever sees item features; prices reach the model through the price tower.
inline EmbeddingModel train_three_tower(std::span<const PurchaseRecord> records, const Catalog& catalog,
                                        const TowerConfig& config, std::uint64_t seed, TrainReport* report = nullptr) {
    config.validate();
    catalog.validate();
    if (catalog.item_features.cols() != config.item_dim || catalog.user_features.cols() != config.user_dim)
        throw ShapeError("train_three_tower: catalog feature widths do not match config");
    Rng rng = make_rng(seed, 0, 0x70fe);
    EmbeddingModel model = make_model(config, rng);
    const auto groups = catalog.items_by_category();

    TrainReport rep;
    std::vector<PurchaseRecord> usable;
    for (const PurchaseRecord& r : records) {
        if (r.item >= catalog.item_count() || r.consumer >= catalog.user_count())
            throw DataError("purchase record references unknown consumer/item");
        if (groups.at(catalog.category[r.item]).size() < 2) {
            ++rep.skipped_records;
            continue;
        }
        usable.push_back(r);
    }
    if (usable.empty()) throw DataError("train_three_tower: no usable purchase records");
    shuffle_in_place(usable, rng);
    const std::size_t n_hold = std::min(usable.size() - 1,
                                        static_cast<std::size_t>(config.holdout_fraction * static_cast<double>(usable.size())));
    std::vector<PurchaseRecord> holdout(usable.end() - static_cast<std::ptrdiff_t>(n_hold), usable.end());
    usable.resize(usable.size() - n_hold);

    numcore::OptState opt(numcore::AdamWConfig{.learning_rate = config.learning_rate, .weight_decay = config.weight_decay});
    auto params = model.parameters();
    const bool track_holdout = !holdout.empty();
    double best = track_holdout ? full_category_loss(model, catalog, holdout) : INFINITY;
    rep.initial_holdout_loss = best;
    EmbeddingModel best_model = model;
    std::size_t since_best = 0;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle_in_place(usable, rng);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < usable.size(); start += config.batch_size) {
            const std::size_t end = std::min(usable.size(), start + config.batch_size);
            std::vector<std::size_t> user_rows;
            std::vector<std::size_t> item_rows;
            std::unordered_map<std::size_t, std::size_t> local;
            auto local_item = [&](std::size_t j) {
                auto [it, inserted] = local.try_emplace(j, item_rows.size());
                if (inserted) item_rows.push_back(j);
                return it->second;
            };
            std::vector<std::vector<std::size_t>> cand;
            for (std::size_t b = start; b < end; ++b) {
                const PurchaseRecord& r = usable[b];
                user_rows.push_back(r.consumer);
                std::vector<std::size_t> pool;
                for (std::size_t j : groups.at(catalog.category[r.item]))
                    if (j != r.item) pool.push_back(j);
                const std::size_t take = std::min(config.negatives, pool.size());
                for (std::size_t k = 0; k < take; ++k) {
                    const std::size_t pick = k + static_cast<std::size_t>(rng() % (pool.size() - k));
                    std::swap(pool[k], pool[pick]);
                }
                std::vector<std::size_t> c{local_item(r.item)};
                for (std::size_t k = 0; k < take; ++k) c.push_back(local_item(pool[k]));
                cand.push_back(std::move(c));
            }
            numcore::zero_grads(params);
            Graph g;
            Var U = numcore::row_normalize(
                model.user_tower.forward(g, g.constant(detail::select_rows(catalog.user_features, user_rows))));
            Var V = numcore::row_normalize(
                model.item_tower.forward(g, g.constant(detail::select_rows(catalog.item_features, item_rows))));
            Var P = model.price_tower.forward(g, g.constant(detail::price_column(catalog.log_ref_price, item_rows)));
            Var loss = detail::batch_infonce(U, V, P, std::move(cand), config.temperature);
            g.backward(loss);
            numcore::adamw_step(opt, params);
            epoch_loss += loss.value().item();
            ++batches;
        }
        rep.train_loss.push_back(epoch_loss / static_cast<double>(batches));
        if (!track_holdout) continue;
        const double h = full_category_loss(model, catalog, holdout);
        rep.holdout_loss.push_back(h);
        if (h < best) {
            best = h;
            best_model = model;
            rep.best_epoch = epoch + 1;
            since_best = 0;
        } else if (++since_best >= config.patience) {
            rep.early_stopped = true;
            break;
        }
    }
    if (track_holdout) model = std::move(best_model);
    rep.holdout = std::move(holdout);
    if (report) *report = std::move(rep);
    return model;
}

/// Fraction of purchases whose item ranks in the top k of its own category by affinity.
/// Ties are broken by ascending item id.
inline double hit_at_k(const EmbeddingModel& model, const Catalog& catalog, std::span<const PurchaseRecord> heldout,
                       std::size_t k) {
    if (heldout.empty()) return 0.0;
    const Embeddings e = extract_embeddings(model, catalog);
    const auto groups = catalog.items_by_category();
    std::size_t hits = 0;
    for (const PurchaseRecord& r : heldout) {
        const auto& items = groups.at(catalog.category[r.item]);
        const double tau = model.config.temperature;
        const double pos = affinity(e.users.row(r.consumer), e.items.row(r.item), e.prices.row(r.item), tau);
        std::size_t rank = 1;
        for (std::size_t j : items) {
            if (j == r.item) continue;
            const double a = affinity(e.users.row(r.consumer), e.items.row(j), e.prices.row(j), tau);
            if (a > pos || (a == pos && j < r.item)) ++rank;
        }
        if (rank <= k) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(heldout.size());
}

}  // namespace deepdemand::tower
