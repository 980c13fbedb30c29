#pragma once

#include <cstdio>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "deepdemand/counterfactual.hpp"
#include "deepdemand/demand.hpp"
#include "deepdemand/eventstudy/cluster.hpp"
#include "deepdemand/eventstudy/effects.hpp"
#include "deepdemand/harness/io.hpp"
#include "deepdemand/harness/panels.hpp"
#include "deepdemand/harness/sim.hpp"
#include "deepdemand/hedonic/index.hpp"
#include "deepdemand/market.hpp"
#include "deepdemand/threetower.hpp"

namespace deepdemand::harness {

namespace fs = std::filesystem;
using io::cell;
using io::Table;
using market::MatrixXd;
using market::VectorXd;

inline constexpr const char* kVersion = "1.0.0";

/// Conditions that do not stop a run but are reported; convergence flags map to exit code 3.
struct RunFlags {
    std::vector<std::string> convergence;
    std::vector<std::string> warnings;
};

// ---------------------------------------------------------------------------------------------
// Typed views of a key=value configuration.

inline SimConfig sim_config(const io::Config& c) {
    SimConfig s;
    s.consumers = c.count("consumers", s.consumers);
    s.items = c.count("items", s.items);
    s.weeks = c.count("weeks", s.weeks);
    s.user_dim = c.count("user_dim", s.user_dim);
    s.item_dim = c.count("item_dim", s.item_dim);
    s.taste_rank = c.count("taste_rank", s.taste_rank);
    s.categories = c.count("categories", s.categories);
    s.pi1 = c.num("pi1", s.pi1);
    s.alpha_mean = c.list("alpha_mean", s.alpha_mean);
    s.inside_share = c.num("inside_share", s.inside_share);
    s.taste_scale = c.num("taste_scale", s.taste_scale);
    s.markdown_prob = c.num("markdown_prob", s.markdown_prob);
    return s;
}

inline tower::TowerConfig tower_config(const io::Config& c, std::size_t item_dim, std::size_t user_dim) {
    tower::TowerConfig t;
    t.item_dim = item_dim;
    t.user_dim = user_dim;
    t.emb_dim = c.count("tower.emb_dim", 32);
    t.hidden = c.count("tower.hidden", 64);
    t.price_hidden = c.count("tower.price_hidden", t.price_hidden);
    t.temperature = c.num("tower.temperature", 0.2);
    t.negatives = c.count("tower.negatives", 16);
    t.epochs = c.count("tower.epochs", 10);
    t.batch_size = c.count("tower.batch", 256);
    t.learning_rate = c.num("tower.lr", 3e-3);
    t.weight_decay = c.num("tower.weight_decay", t.weight_decay);
    return t;
}

inline demand::FitConfig fit_config(const io::Config& c, std::size_t user_dim, std::size_t item_dim) {
    demand::FitConfig f;
    f.spec.classes = c.count("fit.classes", 2);
    f.spec.user_dim = user_dim;
    f.spec.item_dim = item_dim;
    f.spec.hidden = c.count("fit.hidden", 32);
    f.spec.taste_rank = c.count("fit.taste_rank", 8);
    f.spec.season_rank = c.count("fit.season_rank", 4);
    f.spec.alpha_network = c.flag("fit.alpha_network", true);
    f.spec.taste = c.flag("fit.taste", true);
    f.spec.seasonal = c.flag("fit.seasonal", true);
    f.spec.control_function = c.flag("fit.control_function", true);
    f.epochs = c.count("fit.epochs", 60);
    f.batch_consumers = c.count("fit.batch", f.batch_consumers);
    f.learning_rate = c.num("fit.lr", f.learning_rate);
    f.patience = c.count("fit.patience", f.patience);
    return f;
}

inline hedonic::GbtConfig gbt_config(const io::Config& c) {
    hedonic::GbtConfig g;
    g.trees = c.count("gbt.trees", 100);
    g.max_depth = c.count("gbt.max_depth", 4);
    g.learning_rate = c.num("gbt.lr", 0.1);
    g.min_leaf_rows = c.count("gbt.min_leaf_rows", g.min_leaf_rows);
    g.feature_fraction = c.num("gbt.feature_fraction", g.feature_fraction);
    return g;
}

inline HedonicSimConfig hedonic_config(const io::Config& c) {
    HedonicSimConfig h;
    h.cohort_size = c.count("hedonic.cohort", 40);
    h.months = c.count("hedonic.months", 12);
    h.lifespan = c.count("hedonic.lifespan", h.lifespan);
    h.features = c.count("hedonic.features", h.features);
    h.age_markdown = c.num("hedonic.age_markdown", h.age_markdown);
    h.time_trend = c.num("hedonic.trend", h.time_trend);
    return h;
}

inline EventSimConfig event_config(const io::Config& c) {
    EventSimConfig e;
    e.days = c.count("event.days", e.days);
    e.ar_rho = c.num("event.ar_rho", e.ar_rho);
    e.ar_sd = c.num("event.ar_sd", e.ar_sd);
    e.base_log_rate = c.num("event.base_log_rate", 2.0);
    e.unit_log_rate_sd = c.num("event.unit_log_rate_sd", 0.3);
    return e;
}

inline std::vector<std::size_t> counts_of(const std::vector<double>& v) {
    std::vector<std::size_t> out;
    for (double x : v) {
        if (!(x >= 0.0) || x != std::floor(x)) throw ContractError("expected a list of non-negative integers");
        out.push_back(static_cast<std::size_t>(x));
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Item categories stored beside a choice panel (categories.csv: item_id,category).

inline void save_categories(const fs::path& file, const std::vector<int>& category) {
    Table t({"item_id", "category"});
    for (std::size_t j = 0; j < category.size(); ++j) t.row({cell(j), std::to_string(category[j])});
    t.save(file);
}

/// Missing file means a single category.
inline std::vector<int> load_categories(const fs::path& file, std::size_t items) {
    std::vector<int> out(items, 0);
    if (!fs::exists(file)) return out;
    io::detail::read_csv(file, {"item_id", "category"}, [&](const auto& f, std::size_t n) {
        const std::size_t j = io::detail::to_index(f[0], file, n);
        if (j >= items) throw DataError(io::detail::where(file, n) + "item out of range");
        out[j] = static_cast<int>(io::detail::to_int(f[1], file, n));
    });
    return out;
}

/// Reference price per item: median observed price.
inline std::vector<double> log_reference_prices(const demand::ChoicePanel& p) {
    const std::vector<double> med = counterfactual::median_prices(p, p.week_count());
    std::vector<double> out;
    for (double m : med) out.push_back(std::log(m));
    return out;
}

inline tower::Catalog panel_catalog(const demand::ChoicePanel& p, const std::vector<int>& category) {
    tower::Catalog c;
    c.item_features = p.items;
    c.user_features = p.consumers;
    c.category = category;
    c.log_ref_price = log_reference_prices(p);
    return c;
}

inline std::vector<tower::PurchaseRecord> panel_records(const demand::ChoicePanel& p, const tower::Catalog& c) {
    std::vector<tower::PurchaseRecord> out;
    for (const auto& e : p.events)
        out.push_back({e.consumer, e.item, c.category[e.item], static_cast<int>(e.week), p.prices.at(e.item, e.week),
                       c.log_ref_price[e.item]});
    return out;
}

// ---------------------------------------------------------------------------------------------
// Report tables.

inline MatrixXd ownership(const std::string& name, std::size_t J) {
    if (name == "monopolist") return market::ownership_monopolist(J);
    if (name == "single") return market::ownership_identity(J);
    throw ContractError("ownership must be monopolist or single, got " + name);
}

struct SupplyOutput {
    Table table{{"item_id", "price", "share", "eps_own", "markup", "mc", "lerner"}};
    market::SupplyResult result;
    VectorXd prices;
};

inline SupplyOutput supply_table(const market::MarketContext& ctx, const VectorXd& prices, const MatrixXd& omega) {
    SupplyOutput out;
    out.prices = prices;
    const auto d = market::share_derivatives(ctx, prices);
    const MatrixXd e = market::elasticity_matrix(d.shares, d.jacobian, prices);
    out.result = market::invert_markups(d.shares, d.jacobian, prices, omega);
    for (Eigen::Index j = 0; j < prices.size(); ++j)
        out.table.row({cell(ctx.items[static_cast<std::size_t>(j)]), cell(prices(j)), cell(d.shares(j), 8), cell(e(j, j)),
                       cell(out.result.markup(j)), cell(out.result.marginal_cost(j)), cell(out.result.lerner(j))});
    return out;
}

inline Table prune_table(const std::vector<counterfactual::PruneResult>& rs, RunFlags& flags) {
    Table t({"depth", "dropped", "profit_change_a_pct", "profit_change_b_pct", "repricing_premium_pct", "price_shift_pct",
             "converged"});
    for (const auto& r : rs) {
        if (!r.converged) flags.convergence.push_back("prune depth " + cell(r.depth, 2) + ": equilibrium did not converge");
        t.row({cell(r.depth, 3), cell(r.dropped), cell(r.profit_change_a, 4), cell(r.profit_change_b, 4),
               cell(r.profit_change_b - r.profit_change_a, 4), cell(r.price_shift, 4), cell(r.converged)});
    }
    return t;
}

inline Table collapse_table(const std::vector<counterfactual::CollapseResult>& rs, RunFlags& flags) {
    Table t({"sigma", "profit_change_pct", "cs_per_consumer", "total_welfare", "price_change_pct", "markup_change_pct",
             "cosine_before", "cosine_after", "converged"});
    for (const auto& r : rs) {
        if (!r.converged) flags.convergence.push_back("collapse sigma " + cell(r.sigma, 2) + ": equilibrium did not converge");
        const double cb = std::accumulate(r.cosine_before.begin(), r.cosine_before.end(), 0.0) / static_cast<double>(r.cosine_before.size());
        const double ca = std::accumulate(r.cosine_after.begin(), r.cosine_after.end(), 0.0) / static_cast<double>(r.cosine_after.size());
        t.row({cell(r.sigma, 3), cell(r.profit_change, 4), cell(r.cs_per_consumer), cell(r.total_welfare, 4),
               cell(r.price_change, 4), cell(r.markup_change, 4), cell(cb), cell(ca), cell(r.converged)});
    }
    return t;
}

inline Table ladder_table(const std::vector<counterfactual::LadderResult>& rs, RunFlags& flags) {
    Table t({"segments", "effective_segments", "merged", "profit", "profit_gain_pct", "price_shift_pct", "converged"});
    for (const auto& r : rs) {
        if (r.converged != r.effective_segments)
            flags.convergence.push_back("ladder " + cell(r.segments) + ": a segment equilibrium did not converge");
        t.row({cell(r.segments), cell(r.effective_segments), cell(r.merged), cell(r.profit, 6), cell(r.profit_gain, 4),
               cell(r.price_shift, 4), cell(r.converged)});
    }
    return t;
}

inline Table recall_table(const counterfactual::RecallResult& r, std::size_t k) {
    Table t({"method", "k", "all", "warm", "cold", "users_all", "users_warm", "users_cold"});
    auto add = [&](const std::string& name, const counterfactual::SliceRates& s) {
        t.row({name, cell(k), cell(s.all), cell(s.warm), cell(s.cold), cell(s.users_all), cell(s.users_warm), cell(s.users_cold)});
    };
    add("model", r.model);
    add("popularity", r.popularity);
    add("item_knn", r.collaborative);
    return t;
}

inline Table design_table(const std::vector<counterfactual::DesignScore>& ds, const std::vector<std::string>& ids = {}) {
    std::vector<std::string> cols{"design_id"};
    const std::size_t C = ds.empty() ? 0 : ds[0].score.size();
    for (std::size_t c = 0; c < C; ++c) cols.push_back("score_class" + std::to_string(c + 1));
    for (std::size_t c = 0; c < C; ++c) cols.push_back("rank_class" + std::to_string(c + 1));
    cols.push_back("rank_gap");
    Table t(cols);
    for (const auto& d : ds) {
        std::vector<std::string> row{ids.empty() ? cell(d.id) : ids.at(d.id)};
        for (double s : d.score) row.push_back(cell(s));
        for (std::size_t r : d.rank) row.push_back(cell(r));
        row.push_back(cell(d.rank_gap));
        t.row(row);
    }
    return t;
}

inline Table index_table(const hedonic::IndexSeries& s) {
    Table t({"month", "matched", "jevons_link", "laspeyres", "paasche", "fisher_link", "jevons", "fisher", "lower", "upper", "gap"});
    for (std::size_t k = 0; k < s.months.size(); ++k) {
        const bool has_link = k > 0 && k - 1 < s.links.size();
        const hedonic::IndexLink l = has_link ? s.links[k - 1] : hedonic::IndexLink{};
        t.row({cell(s.months[k]), cell(has_link ? l.matched : std::size_t{0}), cell(l.jevons), cell(l.laspeyres), cell(l.paasche),
               cell(l.fisher), cell(s.jevons[k]), cell(s.fisher[k]), s.lower.empty() ? "" : cell(s.lower[k]),
               s.upper.empty() ? "" : cell(s.upper[k]), cell(l.gap)});
    }
    return t;
}

inline Table time_dummy_table(const hedonic::TimeDummyResult& r) {
    Table t({"month", "effect", "index"});
    for (std::size_t k = 0; k < r.months.size(); ++k) t.row({cell(r.months[k]), cell(r.effect[k]), cell(r.index[k])});
    return t;
}

inline Table ob_table(const hedonic::ObResult& r, const std::string& label = "raw") {
    Table t({"series", "total", "composition", "valuation", "residual"});
    t.row({label, cell(r.total, 8), cell(r.composition, 8), cell(r.valuation, 8), cell(r.residual, 8)});
    return t;
}

inline Table effects_table(const std::vector<eventstudy::PeriodEffect>& es, RunFlags& flags) {
    Table t({"unit", "period", "kappa", "se", "z", "p", "p_adjusted", "effect_pct", "stars", "rejected", "separated"});
    for (const auto& e : es) {
        if (!e.converged) flags.convergence.push_back("poisson fit for " + e.unit + " did not converge");
        t.row({e.unit, e.period, cell(e.kappa), cell(e.se), cell(e.z, 4), cell(e.p, 8), cell(e.p_adjusted, 8), cell(e.effect, 4),
               eventstudy::significance_stars(e.p), cell(e.rejected), cell(e.separated)});
    }
    return t;
}

inline Table k_table(const eventstudy::KSelection& sel) {
    Table t({"k", "silhouette", "min_cluster_volume", "viable", "chosen"});
    for (const auto& c : sel.candidates)
        t.row({cell(c.k), cell(c.silhouette), cell(c.min_cluster_volume, 4), cell(c.viable), cell(c.k == sel.chosen)});
    return t;
}

inline Table partition_table(const std::vector<std::string>& ids, const eventstudy::Partition& p) {
    Table t({"id", "cluster"});
    for (std::size_t i = 0; i < p.labels.size(); ++i) t.row({ids.empty() ? cell(i) : ids[i], cell(p.labels[i])});
    return t;
}

/// First day carrying any period label; the pre-window for the volume filter ends there.
inline std::size_t first_event_day(const eventstudy::EventPanel& p) {
    for (std::size_t t = 0; t < p.days(); ++t)
        if (!p.period[t].empty()) return t;
    return p.days();
}

// ---------------------------------------------------------------------------------------------
// End-to-end run.

struct PipelineReport {
    std::vector<fs::path> files;  // report tables, in write order
    RunFlags flags;
};

namespace detail {

inline std::string hex(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace detail

struct SimulatedData {
    SimMarket market;
    HedonicSim hedonic;
    ClusteredEventSim events;
};

/// The three synthetic panels a run works on, each from its own seed stream.
inline SimulatedData simulate_data(const io::Config& cfg, std::uint64_t seed) {
    const std::vector<double> regimes = cfg.list("event.regimes", {-0.7, -0.4, -0.1});
    return {simulate_market(sim_config(cfg), stream_seed(seed, 1, 0x5100)),
            simulate_hedonic_panel(hedonic_config(cfg), stream_seed(seed, 6, 0x4ed)),
            simulate_clustered_events(cfg.count("event.units", 60), cfg.count("event.blobs", 3), cfg.count("event.dim", 8), regimes,
                                      cfg.num("event.blob_sd", 0.25), event_config(cfg), stream_seed(seed, 10, 0xe7))};
}

/// panel/ (choice panel with categories.csv), hedonic_panel.csv, events_daily.csv, units.emb.
inline std::vector<fs::path> save_data(const fs::path& dir, const SimulatedData& d) {
    io::save_panel(dir / "panel", d.market.panel);
    save_categories(dir / "panel" / "categories.csv", d.market.truth.category);
    io::save_hedonic(dir / "hedonic_panel.csv", d.hedonic.panel);
    io::save_events(dir / "events_daily.csv", d.events.events.panel);
    io::save_embeddings(dir / "units.emb", {d.events.events.panel.units, d.events.embeddings});
    return {dir / "panel", dir / "hedonic_panel.csv", dir / "events_daily.csv", dir / "units.emb"};
}

/// Structured-text run record: version, seed, config hash and a content hash per report. No clock values.
inline void write_manifest(const fs::path& file, const io::Config& cfg, std::uint64_t seed, const std::vector<fs::path>& files,
                           const RunFlags& flags) {
    std::ofstream m = io::detail::open_out(file);
    m << "version = " << kVersion << "\n";
    m << "seed = " << seed << "\n";
    m << "config_hash = " << detail::hex(io::fnv1a(cfg.canonical())) << "\n";
    m << "[config]\n" << cfg.canonical();
    m << "[reports]\n";
    for (const auto& f : files) {
        std::ifstream in(f, std::ios::binary);
        const std::string body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        m << f.filename().string() << " = " << detail::hex(io::fnv1a(body)) << "\n";
    }
    m << "[warnings]\n";
    for (const auto& w : flags.warnings) m << w << "\n";
    m << "[convergence]\n";
    for (const auto& w : flags.convergence) m << w << "\n";
}

/// Simulates every panel, runs each module on it and writes report tables plus manifest.txt into `out`.
inline PipelineReport run_pipeline(const io::Config& cfg, std::uint64_t seed, const fs::path& out) {
    fs::create_directories(out);
    PipelineReport rep;
    RunFlags& flags = rep.flags;
    auto emit = [&](const std::string& name, const Table& t) {
        t.save(out / name);
        rep.files.push_back(out / name);
    };

    // Market simulation and embeddings.
    const SimConfig sc = sim_config(cfg);
    const SimulatedData data = simulate_data(cfg, seed);
    save_data(out / "data", data);
    const SimMarket& sim = data.market;
    const auto records = purchase_records(sim);
    const tower::Catalog catalog = harness::catalog(sim);
    tower::TrainReport trep;
    const tower::EmbeddingModel towers =
        tower::train_three_tower(records, catalog, tower_config(cfg, sc.item_dim, sc.user_dim), stream_seed(seed, 2, 0x70), &trep);
    const tower::Embeddings emb = tower::extract_embeddings(towers, catalog);
    {
        const std::size_t k = cfg.count("tower.k", 10);
        const double hit = tower::hit_at_k(towers, catalog, trep.holdout, k);
        const double per_cat = static_cast<double>(sc.items) / static_cast<double>(std::max<std::size_t>(1, sc.categories));
        Table t({"k", "hit_rate", "random_baseline", "initial_holdout_loss", "final_holdout_loss", "best_epoch", "epochs_run"});
        t.row({cell(k), cell(hit), cell(std::min(1.0, static_cast<double>(k) / per_cat)), cell(trep.initial_holdout_loss),
               cell(tower::full_category_loss(towers, catalog, trep.holdout)), cell(trep.best_epoch), cell(trep.train_loss.size())});
        emit("tower.csv", t);
    }
    io::save_embeddings(out / "data" / "items.emb", {{}, emb.items});

    demand::ChoicePanel panel = sim.panel;
    if (cfg.str("demand.inputs", "tower") == "tower") {
        panel.consumers = emb.users;
        panel.items = emb.items;
    } else if (cfg.str("demand.inputs", "tower") != "raw") {
        throw ContractError("demand.inputs must be tower or raw");
    }
    panel.cf_residual =
        demand::control_function_residual(panel.items, demand::mean_log_prices(panel), stream_seed(seed, 3, 0xcf), gbt_config(cfg));

    // Demand.
    demand::FitConfig fc = fit_config(cfg, panel.consumers.cols(), panel.items.cols());
    demand::FitResult fit = demand::em_fit(panel, fc, stream_seed(seed, 4, 0xe3));
    if (fit.report.class_collapse) flags.convergence.push_back("demand: class weight stayed at the floor (class collapse)");
    const double tau = cfg.num("tau", 0.04);
    fit.model.outside_utility = demand::calibrate_v0(fit.model, panel, tau);
    {
        Table t({"quantity", "estimate", "planted"});
        for (std::size_t c = 0; c < fit.report.alpha_bar.size(); ++c)
            t.row({"alpha_bar_" + std::to_string(c + 1), cell(fit.report.alpha_bar[c]),
                   c < sim.truth.alpha_bar.size() ? cell(sim.truth.alpha_bar[c]) : ""});
        t.row({"pi1", cell(fit.report.pi1), cell(sim.truth.pi1)});
        t.row({"train_nll", cell(fit.report.train_nll), ""});
        t.row({"validation_nll", cell(fit.report.validation_nll), ""});
        t.row({"mcfadden_r2", cell(fit.report.mcfadden_r2), ""});
        t.row({"outside_utility", cell(fit.model.outside_utility), ""});
        t.row({"epochs_run", cell(fit.report.trace.size()), ""});
        t.row({"early_stopped", cell(fit.report.converged), ""});
        emit("fit.csv", t);
    }
    io::save_model(out / "model.bin", {fit.model, panel.cf_residual});

    // Supply at purchase-weighted reference prices.
    const std::size_t week = std::min(cfg.count("supply.week", 0), panel.week_count() - 1);
    const std::string omega_name = cfg.str("supply.omega", "monopolist");
    const VectorXd p_ref = market::reference_prices(panel);
    const std::vector<std::size_t> all_items = [&] {
        std::vector<std::size_t> v(panel.item_count());
        std::iota(v.begin(), v.end(), std::size_t{0});
        return v;
    }();
    const std::vector<std::size_t> consumers =
        market::sample_consumers(panel.consumer_count(), cfg.count("cf.consumers", 400), stream_seed(seed, 5, 0x5a));
    const market::MarketContext ctx = market::make_context(fit.model, panel, week, all_items, consumers);
    const MatrixXd omega = ownership(omega_name, panel.item_count());
    const SupplyOutput sup = supply_table(ctx, p_ref, omega);
    emit("supply.csv", sup.table);
    if (sup.result.positive_cost < panel.item_count())
        flags.warnings.push_back("supply: " + std::to_string(panel.item_count() - sup.result.positive_cost) +
                                 " items have non-positive implied marginal cost");
    const VectorXd mc = sup.result.marginal_cost;

    // Counterfactuals.
    market::SolverOptions so;
    so.max_iterations = cfg.count("cf.max_iterations", 2000);
    emit("cf_prune.csv", prune_table(counterfactual::prune_assortment(ctx, p_ref, mc, omega,
                                                                      cfg.list("cf.depths", {0.0, 0.1, 0.2, 0.3}), so),
                                     flags));
    {
        std::vector<counterfactual::CollapseResult> rs;
        for (double s : cfg.list("cf.sigmas", {0.0, 0.5, 1.0}))
            rs.push_back(counterfactual::collapse_taste(fit.model, panel, week, consumers, p_ref, mc, omega, s,
                                                        static_cast<double>(panel.consumer_count()), so));
        emit("cf_collapse.csv", collapse_table(rs, flags));
    }
    {
        const numcore::Tensor user_emb = demand::detail::gather(panel.consumers, consumers);
        emit("cf_ladder.csv", ladder_table(counterfactual::segment_pricing_ladder(ctx, user_emb, mc, omega, p_ref,
                                                                                  counts_of(cfg.list("cf.ns", {1, 2, 4, 8})),
                                                                                  7, cfg.count("cf.min_segment", 10), so),
                                           flags));
    }
    {
        const std::size_t T = panel.week_count();
        const std::size_t train_weeks = T - std::max<std::size_t>(1, T / 5);
        std::vector<demand::ChoiceEvent> train, held;
        for (const auto& e : panel.events) (e.week < train_weeks ? train : held).push_back(e);
        const std::size_t k = cfg.count("recall.k", 10);
        emit("cf_recall.csv", recall_table(counterfactual::recall_at_k(fit.model, panel.consumers, panel.items, panel.cf_residual,
                                                                       counterfactual::median_prices(panel, train_weeks), train,
                                                                       held, k),
                                           k));
    }
    if (fit.model.spec.taste) {
        const std::size_t n = std::min<std::size_t>(cfg.count("cf.designs", 20), panel.item_count());
        const numcore::Tensor designs = demand::detail::gather(
            panel.items, std::vector<std::size_t>(all_items.end() - static_cast<std::ptrdiff_t>(n), all_items.end()));
        emit("cf_designs.csv", design_table(counterfactual::score_new_design(fit.model, panel.consumers, designs)));
    }

    // Hedonic indices.
    const hedonic::GbtConfig gbt = gbt_config(cfg);
    const HedonicSim& hs = data.hedonic;
    {
        hedonic::PooledIndexConfig pc;
        pc.gbt = gbt;
        pc.alpha = cfg.num("hedonic.alpha", 0.10);
        pc.stress_draws = cfg.count("hedonic.stress_draws", 100);
        const hedonic::IndexSeries pooled = hedonic::pooled_index(hs.panel, pc, stream_seed(seed, 7, 0x1d));
        emit("index_pooled.csv", index_table(pooled));
        const hedonic::IndexSeries pp = hedonic::per_period_index(hs.panel, gbt, stream_seed(seed, 8, 0x1d));
        for (const auto& w : pp.warnings) flags.warnings.push_back("per-period index: " + w);
        emit("index_per_period.csv", index_table(pp));
        emit("index_time_dummy.csv", time_dummy_table(hedonic::time_dummy_index(hs.panel)));
        Table hw({"alpha", "half_width"});
        hw.row({cell(pc.alpha, 3), cell(pooled.half_width)});
        emit("index_conformal.csv", hw);
    }
    {
        const auto months = hs.panel.months();
        const int split = months[months.size() / 2];
        std::vector<std::size_t> a, b;
        for (std::size_t r = 0; r < hs.panel.rows(); ++r) (hs.panel.month[r] < split ? a : b).push_back(r);
        const auto pa = hs.panel.select(a), pb = hs.panel.select(b);
        Table t({"series", "total", "composition", "valuation", "residual"});
        for (bool des : {false, true}) {
            const auto r = hedonic::ob_from_panels(pa, pb, gbt, stream_seed(seed, 9, 0x0b), des);
            t.row({des ? "deseasonalized" : "raw", cell(r.total, 8), cell(r.composition, 8), cell(r.valuation, 8), cell(r.residual, 8)});
        }
        emit("ob.csv", t);
    }

    // Event study and clustering.
    {
        const ClusteredEventSim& ev = data.events;
        const std::size_t lag = cfg.count("event.lag", 7);
        emit("effects.csv", effects_table(eventstudy::period_effects(ev.events.panel, lag, cfg.num("event.fdr", 0.05)), flags));
        const std::size_t pre_end = first_event_day(ev.events.panel);
        if (pre_end == 0) throw ContractError("event panel starts inside an event period; no pre-window");
        const auto sel = eventstudy::k_selection(ev.embeddings, counts_of(cfg.list("cluster.ks", {2, 3, 4, 5, 6})),
                                                 eventstudy::count_matrix(ev.events.panel), cfg.num("cluster.min_daily", 1.0), 0,
                                                 pre_end, stream_seed(seed, 11, 0xc1));
        emit("cluster_k.csv", k_table(sel));
        const auto& chosen = *std::find_if(sel.candidates.begin(), sel.candidates.end(), [&](const auto& c) { return c.k == sel.chosen; });
        emit("partition.csv", partition_table(ev.events.panel.units, chosen.partition));
        const std::vector<double> eff = eventstudy::cluster_effects(ev.events.panel, chosen.partition, "Lockdown", lag);
        Table t({"cluster", "lockdown_effect_pct", "size"});
        for (std::size_t c = 0; c < eff.size(); ++c)
            t.row({cell(c), cell(eff[c], 4),
                   cell(static_cast<std::size_t>(std::count(chosen.partition.labels.begin(), chosen.partition.labels.end(), c)))});
        emit("cluster_effects.csv", t);
    }

    for (const auto& k : cfg.unused()) flags.warnings.push_back("config key '" + k + "' was not used");
    write_manifest(out / "manifest.txt", cfg, seed, rep.files, flags);
    return rep;
}

}  // namespace deepdemand::harness
