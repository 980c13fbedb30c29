#include <gtest/gtest.h>

#include <numeric>

#include "deepdemand/harness/sim.hpp"
#include "deepdemand/threetower.hpp"
#include "test_support.hpp"

using namespace deepdemand;
using tower::Catalog;
using tower::PurchaseRecord;

namespace {

tower::TowerConfig small_config() {
    tower::TowerConfig c;
    c.item_dim = 3;
    c.user_dim = 4;
    c.emb_dim = 5;
    c.hidden = 6;
    c.price_hidden = 3;
    c.temperature = 0.5;
    return c;
}

Catalog random_catalog(std::size_t I, std::size_t J, int categories, std::uint64_t seed) {
    Rng rng = make_rng(seed, 0, 3);
    Catalog c;
    c.item_features = numcore::Tensor(numcore::Shape{J, 3});
    c.user_features = numcore::Tensor(numcore::Shape{I, 4});
    for (double& v : c.item_features.values()) v = standard_normal(rng);
    for (double& v : c.user_features.values()) v = standard_normal(rng);
    for (std::size_t j = 0; j < J; ++j) {
        c.category.push_back(static_cast<int>(j) % categories);
        c.log_ref_price.push_back(2.0 + 0.5 * standard_normal(rng));
    }
    return c;
}

}  // namespace

TEST(Tower, AffinityMatchesHandFormula) {
    const std::vector<double> d{0.6, 0.8}, v{1.0, 0.0}, p{0.5, -0.5};
    // d.v = 0.6, d.p = -0.1
    EXPECT_NEAR(tower::affinity(d, v, p, 0.1), (0.6 - std::log1p(std::exp(-0.1))) / 0.1, 1e-14);
    EXPECT_THROW(tower::affinity(d, v, p, 0.0), ContractError);
    EXPECT_THROW(tower::affinity(d, std::vector<double>{1.0}, p, 1.0), ShapeError);
}

TEST(Tower, InfoNceIsMultinomialLogitNegativeLogProbability) {
    const std::vector<double> a{0.3, -1.2, 2.5, 0.0};
    for (std::size_t k = 0; k < a.size(); ++k) {
        const auto s = demand::logit_shares(a, demand::kNegInf);
        EXPECT_NEAR(tower::infonce_from_affinities(a, k), -std::log(s[k]), 1e-14);
    }
    EXPECT_THROW(tower::infonce_from_affinities(std::vector<double>{1.0}, 0), ContractError);
}

TEST(Tower, BatchLossGradientMatchesFiniteDifferences) {
    const Catalog cat = random_catalog(4, 6, 2, 1);
    Rng rng = make_rng(2, 0, 0);
    tower::EmbeddingModel model = tower::make_model(small_config(), rng);
    const std::vector<PurchaseRecord> recs{{0, 0}, {1, 3}, {2, 4}, {3, 1}};
    const std::vector<std::vector<std::size_t>> negs{{2, 4}, {1, 5}, {0}, {3, 5}};
    auto plain = [&] {
        double s = 0.0;
        for (std::size_t b = 0; b < recs.size(); ++b) s += tower::infonce_loss(model, cat, recs[b], negs[b]);
        return s / static_cast<double>(recs.size());
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
    numcore::Var U = numcore::row_normalize(model.user_tower.forward(g, g.constant(tower::detail::select_rows(cat.user_features, users))));
    numcore::Var V = numcore::row_normalize(model.item_tower.forward(g, g.constant(cat.item_features)));
    numcore::Var P = model.price_tower.forward(g, g.constant(tower::detail::price_column(cat.log_ref_price, all)));
    numcore::Var loss = tower::detail::batch_infonce(U, V, P, cand, model.config.temperature);
    EXPECT_NEAR(loss.value().item(), plain(), 1e-12);
    g.backward(loss);
    EXPECT_LT(testsupport::max_fd_error(params, plain), 1e-5);
}

TEST(Tower, NegativesMustShareThePositivesCategory) {
    const Catalog cat = random_catalog(2, 6, 2, 3);
    Rng rng = make_rng(4, 0, 0);
    const auto model = tower::make_model(small_config(), rng);
    const PurchaseRecord r{0, 0};
    EXPECT_THROW(tower::infonce_loss(model, cat, r, std::vector<std::size_t>{1}), ContractError);
    EXPECT_THROW(tower::infonce_loss(model, cat, r, std::vector<std::size_t>{0, 2}), ContractError);
    EXPECT_THROW(tower::infonce_loss(model, cat, r, std::vector<std::size_t>{}), ContractError);
}

TEST(Tower, FullCategoryLossWithOneRivalEqualsPairwiseLoss) {
    const Catalog cat = random_catalog(3, 4, 2, 5);
    Rng rng = make_rng(6, 0, 0);
    const auto model = tower::make_model(small_config(), rng);
    const std::vector<PurchaseRecord> recs{{1, 0}, {2, 3}};
    const double pair = 0.5 * (tower::infonce_loss(model, cat, recs[0], std::vector<std::size_t>{2}) +
                               tower::infonce_loss(model, cat, recs[1], std::vector<std::size_t>{1}));
    EXPECT_NEAR(tower::full_category_loss(model, cat, recs), pair, 1e-12);
}

TEST(Tower, HitRateIsOneWhenKCoversTheCategory) {
    const Catalog cat = random_catalog(5, 9, 3, 7);
    Rng rng = make_rng(8, 0, 0);
    const auto model = tower::make_model(small_config(), rng);
    std::vector<PurchaseRecord> recs;
    for (std::size_t i = 0; i < 5; ++i) recs.push_back({i, (i * 4) % 9});
    EXPECT_DOUBLE_EQ(tower::hit_at_k(model, cat, recs, 3), 1.0);
    const double h1 = tower::hit_at_k(model, cat, recs, 1);
    EXPECT_GE(h1, 0.0);
    EXPECT_LE(h1, tower::hit_at_k(model, cat, recs, 2));
}

TEST(Tower, ExtractedEmbeddingsAreUnitRows) {
    const Catalog cat = random_catalog(5, 6, 2, 9);
    Rng rng = make_rng(10, 0, 0);
    const auto model = tower::make_model(small_config(), rng);
    const auto e = tower::extract_embeddings(model, cat);
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(numcore::norm2(e.items.row(j)), 1.0, 1e-14);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(numcore::norm2(e.users.row(i)), 1.0, 1e-14);
    EXPECT_EQ(e.prices.rows(), 6u);
    EXPECT_THROW(tower::extract_embeddings(model, cat.item_features, cat.user_features, std::vector<double>(2)), ShapeError);
}

TEST(Tower, ConfigValidationRejectsBadSettings) {
    auto c = small_config();
    c.temperature = 0.0;
    EXPECT_THROW(c.validate(), ContractError);
    c = small_config();
    c.negatives = 0;
    EXPECT_THROW(c.validate(), ContractError);
}

TEST(Tower, TrainingOnSimulatedPurchasesBeatsTheStart) {
    harness::SimConfig sc;
    sc.consumers = 300;
    sc.items = 40;
    sc.weeks = 6;
    sc.user_dim = 8;
    sc.item_dim = 8;
    sc.taste_rank = 4;
    sc.categories = 4;
    const auto sim = harness::simulate_market(sc, 21);
    const auto recs = harness::purchase_records(sim);
    const auto cat = harness::catalog(sim);
    tower::TowerConfig cfg;
    cfg.item_dim = 8;
    cfg.user_dim = 8;
    cfg.emb_dim = 8;
    cfg.hidden = 16;
    cfg.negatives = 5;
    cfg.epochs = 8;
    cfg.batch_size = 64;
    cfg.learning_rate = 5e-3;
    cfg.temperature = 0.2;
    tower::TrainReport rep, rep2;
    const auto model = tower::train_three_tower(recs, cat, cfg, 4, &rep);
    const auto again = tower::train_three_tower(recs, cat, cfg, 4, &rep2);
    EXPECT_EQ(rep.train_loss, rep2.train_loss);
    ASSERT_FALSE(rep.holdout.empty());
    const double end = tower::full_category_loss(model, cat, rep.holdout);
    EXPECT_LT(end, rep.initial_holdout_loss);
    EXPECT_GT(tower::hit_at_k(model, cat, rep.holdout, 3), 3.0 / 10.0);
    (void)again;
}

TEST(Tower, RecordsOutsideTheCatalogAreRejected) {
    const Catalog cat = random_catalog(2, 4, 2, 11);
    const std::vector<PurchaseRecord> recs{{5, 0}};
    EXPECT_THROW(tower::train_three_tower(recs, cat, small_config(), 1), DataError);
}
