#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "deepdemand/harness/pipeline.hpp"

using namespace deepdemand;
namespace fs = std::filesystem;
using harness::RunFlags;
using io::Table;

namespace {

constexpr int kOk = 0;
constexpr int kContract = 2;
constexpr int kConvergence = 3;

struct Common {
    std::string config;
    std::uint64_t seed = 42;
};

io::Config load_config(const Common& c) { return c.config.empty() ? io::Config{} : io::Config::load(c.config); }

/// Records command-line inputs so that the manifest hash covers them.
io::Config with_args(io::Config cfg, std::initializer_list<std::pair<std::string, std::string>> args) {
    for (const auto& [k, v] : args) cfg.set("arg." + k, v);
    return cfg;
}

std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    for (const auto& f : io::detail::split(s)) out.push_back(io::detail::to_double(f, "<argument>", 0));
    return out;
}

fs::path manifest_for(const fs::path& out) { return fs::path(out.string() + ".manifest.txt"); }

int finish(const RunFlags& flags) {
    for (const auto& w : flags.warnings) std::cerr << "warning: " << w << "\n";
    for (const auto& w : flags.convergence) std::cerr << "convergence: " << w << "\n";
    return flags.convergence.empty() ? kOk : kConvergence;
}

int emit(const Table& t, const fs::path& out, const io::Config& cfg, std::uint64_t seed, const RunFlags& flags) {
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    t.save(out);
    harness::write_manifest(manifest_for(out), cfg, seed, {out}, flags);
    std::cout << out.string() << " (" << t.size() << " rows)\n";
    return finish(flags);
}

/// Model plus panel with the stored residual attached, V0 optionally recalibrated.
struct Loaded {
    demand::DemandModel model;
    demand::ChoicePanel panel;
};

Loaded load_model_panel(const std::string& model_file, const std::string& panel_dir, std::optional<double> tau) {
    io::StoredModel sm = io::load_model(model_file);
    Loaded l{std::move(sm.model), io::load_panel(panel_dir)};
    if (l.panel.consumers.cols() != l.model.spec.user_dim || l.panel.items.cols() != l.model.spec.item_dim)
        throw ShapeError("panel embedding widths do not match the model");
    if (!sm.cf_residual.empty() && sm.cf_residual.size() != l.panel.item_count())
        throw ShapeError("model residuals do not match the panel item count");
    l.panel.cf_residual = sm.cf_residual;
    if (tau) l.model.outside_utility = demand::calibrate_v0(l.model, l.panel, *tau);
    return l;
}

struct SupplySetup {
    std::vector<std::size_t> consumers;
    market::MarketContext ctx;
    market::MatrixXd omega;
    market::VectorXd p_ref;
    harness::SupplyOutput supply;
};

SupplySetup supply_setup(const Loaded& l, const std::string& omega, std::size_t week, std::size_t n_consumers, std::uint64_t seed) {
    if (week >= l.panel.week_count()) throw ContractError("week outside the panel");
    std::vector<std::size_t> items(l.panel.item_count());
    std::iota(items.begin(), items.end(), std::size_t{0});
    std::vector<std::size_t> cons = market::sample_consumers(l.panel.consumer_count(), n_consumers, stream_seed(seed, 5, 0x5a));
    market::MarketContext ctx = market::make_context(l.model, l.panel, week, items, cons);
    market::MatrixXd om = harness::ownership(omega, l.panel.item_count());
    market::VectorXd p_ref = market::reference_prices(l.panel);
    harness::SupplyOutput sup = harness::supply_table(ctx, p_ref, om);
    return {std::move(cons), std::move(ctx), std::move(om), std::move(p_ref), std::move(sup)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Structural demand estimation, supply inversion, counterfactuals, price indices and event studies"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* sc) {
        sc->add_option("--config", common.config, "key=value configuration file")->check(CLI::ExistingFile);
        sc->add_option("--seed", common.seed, "master seed");
    };
    std::function<int()> action;

    // simulate
    std::string sim_out = "data";
    auto* sim = app.add_subcommand("simulate", "write synthetic panels with known primitives");
    add_common(sim);
    sim->add_option("--out", sim_out, "output directory");
    sim->callback([&] {
        action = [&] {
            const io::Config cfg = load_config(common);
            const auto data = harness::simulate_data(cfg, common.seed);
            const auto files = harness::save_data(sim_out, data);
            RunFlags flags;
            harness::write_manifest(fs::path(sim_out) / "manifest.txt", cfg, common.seed, {}, flags);
            for (const auto& f : files) std::cout << f.string() << "\n";
            return kOk;
        };
    });

    // embed-train
    std::string et_data, et_out = "embeddings";
    auto* et = app.add_subcommand("embed-train", "train the three-tower contrastive model on a choice panel");
    add_common(et);
    et->add_option("--data", et_data, "choice panel directory")->required()->check(CLI::ExistingDirectory);
    et->add_option("--out", et_out, "output directory (a panel with learned embeddings)");
    et->callback([&] {
        action = [&] {
            const io::Config cfg = load_config(common);
            demand::ChoicePanel panel = io::load_panel(et_data);
            const auto cats = harness::load_categories(fs::path(et_data) / "categories.csv", panel.item_count());
            const tower::Catalog cat = harness::panel_catalog(panel, cats);
            tower::TrainReport rep;
            const auto model = tower::train_three_tower(harness::panel_records(panel, cat), cat,
                                                        harness::tower_config(cfg, panel.items.cols(), panel.consumers.cols()),
                                                        stream_seed(common.seed, 2, 0x70), &rep);
            const tower::Embeddings emb = tower::extract_embeddings(model, cat);
            panel.items = emb.items;
            panel.consumers = emb.users;
            io::save_panel(et_out, panel);
            harness::save_categories(fs::path(et_out) / "categories.csv", cats);
            const std::size_t k = cfg.count("tower.k", 10);
            Table t({"k", "hit_rate", "initial_holdout_loss", "final_holdout_loss", "best_epoch", "epochs_run"});
            t.row({io::cell(k), io::cell(tower::hit_at_k(model, cat, rep.holdout, k)), io::cell(rep.initial_holdout_loss),
                   io::cell(tower::full_category_loss(model, cat, rep.holdout)), io::cell(rep.best_epoch),
                   io::cell(rep.train_loss.size())});
            return emit(t, fs::path(et_out) / "tower.csv", with_args(cfg, {{"data", et_data}}), common.seed, {});
        };
    });

    // fit
    std::string fit_panel, fit_out = "model.bin";
    std::size_t fit_k = 2;
    double fit_tau = 0.04;
    auto* fit = app.add_subcommand("fit", "estimate the latent-class demand model");
    add_common(fit);
    fit->add_option("--panel", fit_panel, "choice panel directory")->required()->check(CLI::ExistingDirectory);
    fit->add_option("--k", fit_k, "latent classes")->check(CLI::PositiveNumber);
    fit->add_option("--tau", fit_tau, "target inside share for the outside-option calibration")->check(CLI::Range(0.0, 1.0));
    fit->add_option("--out", fit_out, "model file");
    fit->callback([&] {
        action = [&] {
            io::Config cfg = load_config(common);
            demand::ChoicePanel panel = io::load_panel(fit_panel);
            panel.cf_residual = demand::control_function_residual(panel.items, demand::mean_log_prices(panel),
                                                                  stream_seed(common.seed, 3, 0xcf), harness::gbt_config(cfg));
            demand::FitConfig fc = harness::fit_config(cfg, panel.consumers.cols(), panel.items.cols());
            fc.spec.classes = fit_k;
            demand::FitResult r = demand::em_fit(panel, fc, stream_seed(common.seed, 4, 0xe3));
            r.model.outside_utility = demand::calibrate_v0(r.model, panel, fit_tau);
            nlohmann::ordered_json extra;
            extra["seed"] = common.seed;
            extra["tau"] = fit_tau;
            extra["train_nll"] = r.report.train_nll;
            extra["validation_nll"] = r.report.validation_nll;
            extra["mcfadden_r2"] = r.report.mcfadden_r2;
            extra["alpha_bar"] = r.report.alpha_bar;
            extra["pi1"] = r.report.pi1;
            extra["early_stopped"] = r.report.converged;
            extra["class_collapse"] = r.report.class_collapse;
            io::save_model(fit_out, {r.model, panel.cf_residual}, extra);
            std::cout << fit_out << "\n";
            RunFlags flags;
            if (!r.report.converged) flags.warnings.push_back("EM ran to the epoch cap without early stopping");
            if (r.report.class_collapse) flags.convergence.push_back("class weight stayed at the floor (class collapse)");
            return finish(flags);
        };
    });

    // supply
    std::string sup_model, sup_panel, sup_omega = "monopolist", sup_out = "supply.csv";
    std::optional<double> sup_tau;
    std::size_t sup_week = 0, sup_consumers = 2000;
    auto* sup = app.add_subcommand("supply", "invert Bertrand-Nash first-order conditions for marginal costs");
    add_common(sup);
    sup->add_option("--model", sup_model)->required()->check(CLI::ExistingFile);
    sup->add_option("--panel", sup_panel)->required()->check(CLI::ExistingDirectory);
    sup->add_option("--tau", sup_tau, "recalibrate the outside option to this inside share")->check(CLI::Range(0.0, 1.0));
    sup->add_option("--omega", sup_omega, "ownership structure")->check(CLI::IsMember({"monopolist", "single"}));
    sup->add_option("--week", sup_week);
    sup->add_option("--consumers", sup_consumers, "consumer sample size for aggregate shares");
    sup->add_option("--out", sup_out);
    sup->callback([&] {
        action = [&] {
            const Loaded l = load_model_panel(sup_model, sup_panel, sup_tau);
            const SupplySetup s = supply_setup(l, sup_omega, sup_week, sup_consumers, common.seed);
            RunFlags flags;
            if (s.supply.result.positive_cost < l.panel.item_count())
                flags.warnings.push_back(std::to_string(l.panel.item_count() - s.supply.result.positive_cost) +
                                         " items have non-positive implied marginal cost");
            const io::Config cfg = with_args(load_config(common), {{"model", sup_model}, {"panel", sup_panel},
                                                                   {"omega", sup_omega}, {"tau", sup_tau ? io::cell(*sup_tau) : ""}});
            return emit(s.supply.table, sup_out, cfg, common.seed, flags);
        };
    });

    // cf
    std::string cf_model, cf_panel, cf_omega = "monopolist", cf_out, cf_depths = "0,0.1,0.2,0.3", cf_ns = "1,2,4,8",
                                     cf_sigmas = "0,0.5,1", cf_designs;
    std::optional<double> cf_tau;
    std::size_t cf_week = 0, cf_consumers = 2000, cf_k = 10;
    auto* cf = app.add_subcommand("cf", "counterfactual policy analysis");
    cf->require_subcommand(1);
    auto add_cf = [&](CLI::App* sc) {
        add_common(sc);
        sc->add_option("--model", cf_model)->required()->check(CLI::ExistingFile);
        sc->add_option("--panel", cf_panel)->required()->check(CLI::ExistingDirectory);
        sc->add_option("--tau", cf_tau)->check(CLI::Range(0.0, 1.0));
        sc->add_option("--omega", cf_omega)->check(CLI::IsMember({"monopolist", "single"}));
        sc->add_option("--week", cf_week);
        sc->add_option("--consumers", cf_consumers);
        sc->add_option("--out", cf_out)->required();
    };
    auto cf_config = [&](const std::string& kind, std::initializer_list<std::pair<std::string, std::string>> more) {
        io::Config cfg = with_args(load_config(common), {{"cf", kind}, {"model", cf_model}, {"panel", cf_panel}, {"omega", cf_omega}});
        return with_args(cfg, more);
    };
    market::SolverOptions so;
    so.max_iterations = 2000;

    auto* prune = cf->add_subcommand("prune", "assortment pruning with fixed and re-optimized prices");
    add_cf(prune);
    prune->add_option("--depths", cf_depths, "comma-separated fractions of the assortment to drop");
    prune->callback([&] {
        action = [&] {
            const Loaded l = load_model_panel(cf_model, cf_panel, cf_tau);
            const SupplySetup s = supply_setup(l, cf_omega, cf_week, cf_consumers, common.seed);
            RunFlags flags;
            const Table t = harness::prune_table(
                counterfactual::prune_assortment(s.ctx, s.p_ref, s.supply.result.marginal_cost, s.omega, parse_list(cf_depths), so), flags);
            return emit(t, cf_out, cf_config("prune", {{"depths", cf_depths}}), common.seed, flags);
        };
    });

    auto* collapse = cf->add_subcommand("collapse", "taste homogenization");
    add_cf(collapse);
    collapse->add_option("--sigmas", cf_sigmas, "comma-separated collapse strengths in [0,1]");
    collapse->callback([&] {
        action = [&] {
            const Loaded l = load_model_panel(cf_model, cf_panel, cf_tau);
            const SupplySetup s = supply_setup(l, cf_omega, cf_week, cf_consumers, common.seed);
            RunFlags flags;
            std::vector<counterfactual::CollapseResult> rs;
            for (double sigma : parse_list(cf_sigmas))
                rs.push_back(counterfactual::collapse_taste(l.model, l.panel, cf_week, s.consumers, s.p_ref, s.supply.result.marginal_cost,
                                                            s.omega, sigma, static_cast<double>(l.panel.consumer_count()), so));
            return emit(harness::collapse_table(rs, flags), cf_out, cf_config("collapse", {{"sigmas", cf_sigmas}}), common.seed, flags);
        };
    });

    auto* ladder = cf->add_subcommand("ladder", "segment pricing ladder");
    add_cf(ladder);
    ladder->add_option("--ns", cf_ns, "comma-separated segment counts");
    ladder->callback([&] {
        action = [&] {
            const Loaded l = load_model_panel(cf_model, cf_panel, cf_tau);
            const SupplySetup s = supply_setup(l, cf_omega, cf_week, cf_consumers, common.seed);
            RunFlags flags;
            const numcore::Tensor users = demand::detail::gather(l.panel.consumers, s.consumers);
            const Table t = harness::ladder_table(
                counterfactual::segment_pricing_ladder(s.ctx, users, s.supply.result.marginal_cost, s.omega, s.p_ref,
                                                       harness::counts_of(parse_list(cf_ns)), 7, 10, so),
                flags);
            return emit(t, cf_out, cf_config("ladder", {{"ns", cf_ns}}), common.seed, flags);
        };
    });

    auto* recval = cf->add_subcommand("recval", "recommendation recall on held-out weeks");
    add_cf(recval);
    recval->add_option("--k", cf_k, "recall cutoff");
    recval->callback([&] {
        action = [&] {
            const Loaded l = load_model_panel(cf_model, cf_panel, cf_tau);
            const std::size_t T = l.panel.week_count();
            if (T < 2) throw ContractError("recall needs at least two weeks");
            const std::size_t train_weeks = T - std::max<std::size_t>(1, T / 5);
            std::vector<demand::ChoiceEvent> train, held;
            for (const auto& e : l.panel.events) (e.week < train_weeks ? train : held).push_back(e);
            const auto r = counterfactual::recall_at_k(l.model, l.panel.consumers, l.panel.items, l.panel.cf_residual,
                                                       counterfactual::median_prices(l.panel, train_weeks), train, held, cf_k);
            return emit(harness::recall_table(r, cf_k), cf_out, cf_config("recval", {{"k", io::cell(cf_k)}}), common.seed, {});
        };
    });

    auto* design = cf->add_subcommand("design-score", "score candidate designs by latent class");
    add_cf(design);
    design->add_option("--designs", cf_designs, "embedding file of candidate designs")->required()->check(CLI::ExistingFile);
    design->callback([&] {
        action = [&] {
            const Loaded l = load_model_panel(cf_model, cf_panel, cf_tau);
            const io::EmbeddingTable d = io::load_embeddings(cf_designs);
            if (d.values.cols() != l.model.spec.item_dim) throw ShapeError("design embedding width does not match the model");
            const auto scores = counterfactual::score_new_design(l.model, l.panel.consumers, d.values);
            const Table t = harness::design_table(scores, d.ids);
            return emit(t, cf_out, cf_config("design-score", {{"designs", cf_designs}}), common.seed, {});
        };
    });

    // hedonic
    std::string hed_panel, hed_method = "pooled", hed_out = "index.csv";
    double hed_alpha = 0.10;
    auto* hed = app.add_subcommand("hedonic", "quality-adjusted price index");
    add_common(hed);
    hed->add_option("--panel", hed_panel, "hedonic panel csv")->required()->check(CLI::ExistingFile);
    hed->add_option("--method", hed_method)->check(CLI::IsMember({"pooled", "per-period", "time-dummy"}));
    hed->add_option("--alpha", hed_alpha, "conformal miscoverage level")->check(CLI::Range(0.0, 1.0));
    hed->add_option("--out", hed_out);
    hed->callback([&] {
        action = [&] {
            const io::Config base = load_config(common);
            const hedonic::HedonicPanel p = io::load_hedonic(hed_panel);
            const io::Config cfg = with_args(base, {{"panel", hed_panel}, {"method", hed_method}, {"alpha", io::cell(hed_alpha)}});
            RunFlags flags;
            if (hed_method == "time-dummy") return emit(harness::time_dummy_table(hedonic::time_dummy_index(p)), hed_out, cfg, common.seed, flags);
            hedonic::IndexSeries s;
            if (hed_method == "pooled") {
                hedonic::PooledIndexConfig pc;
                pc.gbt = harness::gbt_config(base);
                pc.alpha = hed_alpha;
                pc.stress_draws = base.count("hedonic.stress_draws", pc.stress_draws);
                s = hedonic::pooled_index(p, pc, stream_seed(common.seed, 7, 0x1d));
            } else {
                s = hedonic::per_period_index(p, harness::gbt_config(base), stream_seed(common.seed, 8, 0x1d));
            }
            for (const auto& w : s.warnings) flags.warnings.push_back(w);
            return emit(harness::index_table(s), hed_out, cfg, common.seed, flags);
        };
    });

    // ob
    std::string ob_a, ob_b, ob_out = "ob.csv";
    bool ob_des = false;
    auto* ob = app.add_subcommand("ob", "composition/valuation decomposition between two panels");
    add_common(ob);
    ob->add_option("--panel-a", ob_a)->required()->check(CLI::ExistingFile);
    ob->add_option("--panel-b", ob_b)->required()->check(CLI::ExistingFile);
    ob->add_flag("--deseasonalize", ob_des, "remove calendar-month means first");
    ob->add_option("--out", ob_out);
    ob->callback([&] {
        action = [&] {
            const io::Config base = load_config(common);
            const auto r = hedonic::ob_from_panels(io::load_hedonic(ob_a), io::load_hedonic(ob_b), harness::gbt_config(base),
                                                   stream_seed(common.seed, 9, 0x0b), ob_des);
            const io::Config cfg = with_args(base, {{"panel_a", ob_a}, {"panel_b", ob_b}, {"deseasonalize", ob_des ? "true" : "false"}});
            return emit(harness::ob_table(r, ob_des ? "deseasonalized" : "raw"), ob_out, cfg, common.seed, {});
        };
    });

    // event
    std::string ev_panel, ev_out = "effects.csv";
    std::size_t ev_lag = 7;
    double ev_fdr = 0.05;
    auto* ev = app.add_subcommand("event", "Poisson event-study period effects");
    add_common(ev);
    ev->add_option("--panel", ev_panel, "daily events csv")->required()->check(CLI::ExistingFile);
    ev->add_option("--lag", ev_lag, "HAC bandwidth in days");
    ev->add_option("--fdr", ev_fdr, "Benjamini-Hochberg level")->check(CLI::Range(0.0, 1.0));
    ev->add_option("--out", ev_out);
    ev->callback([&] {
        action = [&] {
            RunFlags flags;
            const Table t = harness::effects_table(eventstudy::period_effects(io::load_events(ev_panel), ev_lag, ev_fdr), flags);
            const io::Config cfg = with_args(load_config(common), {{"panel", ev_panel}, {"lag", io::cell(ev_lag)}, {"fdr", io::cell(ev_fdr)}});
            return emit(t, ev_out, cfg, common.seed, flags);
        };
    });

    // cluster
    std::string cl_emb, cl_k = "auto", cl_ks = "4,6,8,10,12", cl_events, cl_period = "Lockdown", cl_out = "partition.csv";
    double cl_min_daily = 1.0;
    std::size_t cl_lag = 7;
    auto* cl = app.add_subcommand("cluster", "k-means partition of embeddings with silhouette-based k");
    add_common(cl);
    cl->add_option("--emb", cl_emb, "embedding file")->required()->check(CLI::ExistingFile);
    cl->add_option("--k", cl_k, "number of clusters or auto");
    cl->add_option("--ks", cl_ks, "candidate k values for auto");
    cl->add_option("--events", cl_events, "daily events csv whose units match the embedding ids")->check(CLI::ExistingFile);
    cl->add_option("--min-daily", cl_min_daily, "minimum pre-period daily volume per cluster");
    cl->add_option("--period", cl_period, "period whose cluster-level effect is reported");
    cl->add_option("--lag", cl_lag);
    cl->add_option("--out", cl_out);
    cl->callback([&] {
        action = [&] {
            const io::EmbeddingTable emb = io::load_embeddings(cl_emb);
            std::optional<eventstudy::EventPanel> events;
            numcore::Tensor counts(numcore::Shape{emb.values.rows(), 1});
            std::size_t pre_end = 1;
            double min_daily = 0.0;
            if (!cl_events.empty()) {
                events = io::load_events(cl_events);
                if (events->units != emb.ids) throw DataError("event units must match the embedding ids in order");
                counts = eventstudy::count_matrix(*events);
                pre_end = harness::first_event_day(*events);
                if (pre_end == 0) throw DataError("event panel has no pre-period");
                min_daily = cl_min_daily;
            }
            const std::vector<std::size_t> ks = cl_k == "auto" ? harness::counts_of(parse_list(cl_ks))
                                                               : harness::counts_of(parse_list(cl_k));
            const auto sel = eventstudy::k_selection(emb.values, ks, counts, min_daily, 0, pre_end, stream_seed(common.seed, 11, 0xc1));
            const auto& chosen =
                *std::find_if(sel.candidates.begin(), sel.candidates.end(), [&](const auto& c) { return c.k == sel.chosen; });
            const io::Config cfg = with_args(load_config(common), {{"emb", cl_emb}, {"k", cl_k}, {"ks", cl_ks}, {"events", cl_events}});
            const fs::path out(cl_out);
            const fs::path stem = out.parent_path() / out.stem();
            harness::k_table(sel).save(stem.string() + "_k.csv");
            std::vector<fs::path> files{stem.string() + "_k.csv"};
            if (events) {
                const auto eff = eventstudy::cluster_effects(*events, chosen.partition, cl_period, cl_lag);
                Table t({"cluster", "effect_pct", "size"});
                for (std::size_t c = 0; c < eff.size(); ++c)
                    t.row({io::cell(c), io::cell(eff[c], 4),
                           io::cell(static_cast<std::size_t>(std::count(chosen.partition.labels.begin(), chosen.partition.labels.end(), c)))});
                t.save(stem.string() + "_effects.csv");
                files.push_back(stem.string() + "_effects.csv");
            }
            for (const auto& f : files) std::cout << f.string() << "\n";
            return emit(harness::partition_table(emb.ids, chosen.partition), out, cfg, common.seed, {});
        };
    });

    // pipeline
    std::string pl_out = "run";
    auto* pl = app.add_subcommand("pipeline", "simulate, estimate and report end to end");
    add_common(pl);
    pl->add_option("--out", pl_out, "output directory");
    pl->callback([&] {
        action = [&] {
            const auto rep = harness::run_pipeline(load_config(common), common.seed, pl_out);
            for (const auto& f : rep.files) std::cout << f.string() << "\n";
            std::cout << (fs::path(pl_out) / "manifest.txt").string() << "\n";
            return finish(rep.flags);
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kContract;
    }
    try {
        return action ? action() : kOk;
    } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kContract;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kContract;
    } catch (const TrainingError& e) {
        std::cerr << "training failed: " << e.what() << "\n";
        return kConvergence;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
