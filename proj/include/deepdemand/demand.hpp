#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "deepdemand/hedonic/gbt.hpp"
#include "deepdemand/numcore/adamw.hpp"
#include "deepdemand/numcore/mlp.hpp"

namespace deepdemand::demand {

using numcore::Activation;
using numcore::Graph;
using numcore::Mlp;
using numcore::Parameter;
using numcore::Shape;
using numcore::Tensor;
using numcore::Var;

inline constexpr std::size_t kMonths = 12;
inline constexpr double kAlphaFloor = 0.1;
inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct DemandSpec {
    std::size_t classes = 2;
    std::size_t user_dim = 64;
    std::size_t item_dim = 64;
    std::size_t hidden = 64;
    std::size_t taste_rank = 16;
    std::size_t season_rank = 8;
    bool alpha_network = true;
    bool taste = true;
    bool seasonal = true;
    bool control_function = true;

    void validate() const {
        if (classes < 1 || classes > 2) throw ContractError("DemandSpec: classes must be 1 or 2");
        if (user_dim < 1 || item_dim < 1) throw ContractError("DemandSpec: feature widths must be >= 1");
        if (taste_rank < 1 || season_rank < 1 || hidden < 1) throw ContractError("DemandSpec: ranks must be >= 1");
    }
};

struct ClassParams {
    Mlp alpha_net;                                  // user -> 1, empty when alpha is a constant
    Parameter alpha_raw{"alpha_raw", Tensor::scalar(0.0)};
    Mlp r_net;                                      // user -> taste_rank
    Mlp t_net;                                      // item -> taste_rank, normalized on use
    Parameter bias{"bias", Tensor::scalar(0.0)};
    Parameter cf_loading{"cf_loading", Tensor::scalar(0.0)};
};

struct DemandModel {
    DemandSpec spec;
    std::vector<ClassParams> classes;
    Parameter seasonal_basis{"seasonal_basis", Tensor(Shape{8, 16})};  // stored transposed: delta_m = z_m * basis
    Parameter month_codes{"month_codes", Tensor(Shape{kMonths, 8})};   // columns sum to zero
    std::vector<double> weights;
    double outside_utility = kNegInf;

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        for (std::size_t c = 0; c < classes.size(); ++c) {
            ClassParams& k = classes[c];
            if (spec.alpha_network)
                for (Parameter* p : k.alpha_net.parameters()) out.push_back(p);
            else
                out.push_back(&k.alpha_raw);
            if (spec.taste) {
                for (Parameter* p : k.r_net.parameters()) out.push_back(p);
                for (Parameter* p : k.t_net.parameters()) out.push_back(p);
            }
            out.push_back(&k.bias);
            if (spec.control_function) out.push_back(&k.cf_loading);
        }
        if (spec.taste && spec.seasonal) {
            out.push_back(&seasonal_basis);
            out.push_back(&month_codes);
        }
        return out;
    }

    void recenter_month_codes() {
        Tensor& z = month_codes.value;
        for (std::size_t k = 0; k < z.cols(); ++k) {
            double m = 0.0;
            for (std::size_t r = 0; r < z.rows(); ++r) m += z.at(r, k);
            m /= static_cast<double>(z.rows());
            for (std::size_t r = 0; r < z.rows(); ++r) z.at(r, k) -= m;
        }
    }
};

/// Softplus inverse, used to start alpha at a chosen value.
inline double alpha_raw_for(double alpha) {
    const double a = -alpha - kAlphaFloor;
    if (!(a > 0.0)) throw ContractError("alpha must be below -0.1");
    return a > 30.0 ? a : std::log(std::expm1(a));
}

inline DemandModel make_demand_model(const DemandSpec& spec, Rng& rng, std::span<const double> alpha_init = {}) {
    spec.validate();
    DemandModel m;
    m.spec = spec;
    m.classes.resize(spec.classes);
    for (std::size_t c = 0; c < spec.classes; ++c) {
        ClassParams& k = m.classes[c];
        const std::string tag = "class" + std::to_string(c + 1);
        const double a0 = c < alpha_init.size() ? alpha_init[c] : -0.5;
        if (spec.alpha_network) {
            k.alpha_net = Mlp::make({spec.user_dim, spec.hidden, 1}, {Activation::relu, Activation::identity}, rng,
                                    tag + ".alpha_net");
            for (double& w : k.alpha_net.layers().back().weight.value.values()) w *= 0.1;
            k.alpha_net.layers().back().bias.value[0] = alpha_raw_for(a0);
        }
        k.alpha_raw = Parameter(tag + ".alpha_raw", Tensor::scalar(alpha_raw_for(a0)));
        if (spec.taste) {
            k.r_net = Mlp::make({spec.user_dim, spec.hidden, spec.taste_rank}, {Activation::relu, Activation::identity},
                                rng, tag + ".r_net");
            k.t_net = Mlp::make({spec.item_dim, spec.hidden, spec.taste_rank}, {Activation::relu, Activation::identity},
                                rng, tag + ".t_net");
        }
        k.bias = Parameter(tag + ".bias", Tensor::scalar(0.0));
        k.cf_loading = Parameter(tag + ".cf_loading", Tensor::scalar(0.0));
    }
    m.seasonal_basis = Parameter("seasonal_basis", Tensor(Shape{spec.season_rank, spec.taste_rank}));
    m.month_codes = Parameter("month_codes", Tensor(Shape{kMonths, spec.season_rank}));
    if (spec.seasonal) {
        for (double& v : m.seasonal_basis.value.values()) v = 0.01 * standard_normal(rng);
        for (double& v : m.month_codes.value.values()) v = 0.01 * standard_normal(rng);
        m.recenter_month_codes();
    }
    m.weights.assign(spec.classes, 1.0 / static_cast<double>(spec.classes));
    return m;
}

struct ChoiceEvent {
    std::size_t consumer = 0;
    std::size_t item = 0;
    std::size_t week = 0;
};

/// Consumers x items x weeks. A NaN price means the item was not on sale that week.
struct ChoicePanel {
    Tensor consumers;                 // [I x user_dim]
    Tensor items;                     // [J x item_dim]
    Tensor prices;                    // [J x T]
    std::vector<ChoiceEvent> events;  // at most one per consumer-week
    std::vector<int> month_of_week;   // 1..12 per week
    std::vector<double> cf_residual;  // per item; empty means zero

    std::size_t consumer_count() const { return consumers.rows(); }
    std::size_t item_count() const { return items.rows(); }
    std::size_t week_count() const { return prices.cols(); }
    bool on_sale(std::size_t j, std::size_t t) const { return std::isfinite(prices.at(j, t)); }
    double residual(std::size_t j) const { return cf_residual.empty() ? 0.0 : cf_residual[j]; }

    std::vector<std::size_t> choice_set(std::size_t t) const {
        std::vector<std::size_t> out;
        for (std::size_t j = 0; j < item_count(); ++j)
            if (on_sale(j, t)) out.push_back(j);
        return out;
    }

    void validate() const {
        const std::size_t J = item_count(), T = week_count();
        if (prices.rank() != 2 || prices.rows() != J) throw DataError("panel: price matrix must be items x weeks");
        for (std::size_t j = 0; j < J; ++j)
            for (std::size_t t = 0; t < T; ++t) {
                const double p = prices.at(j, t);
                if (!std::isnan(p) && !(p > 0.0 && std::isfinite(p)))
                    throw DataError("panel: price for item " + std::to_string(j) + " week " + std::to_string(t) +
                                    " is not positive");
            }
        if (month_of_week.size() != T) throw DataError("panel: month map must cover every week");
        for (int m : month_of_week)
            if (m < 1 || m > 12) throw DataError("panel: month outside 1..12");
        if (!cf_residual.empty() && cf_residual.size() != J)
            throw DataError("panel: control-function residual length does not match items");
        for (std::size_t e = 0; e < events.size(); ++e) {
            const ChoiceEvent& ev = events[e];
            if (ev.consumer >= consumer_count() || ev.item >= J || ev.week >= T)
                throw DataError("panel: event " + std::to_string(e) + " is out of range");
            if (!on_sale(ev.item, ev.week))
                throw DataError("panel: event " + std::to_string(e) + " buys item " + std::to_string(ev.item) +
                                " with no price in week " + std::to_string(ev.week));
        }
    }
};

// ---------------------------------------------------------------------------------------------
// Plain evaluation.

inline double alpha_from_raw(double raw) { return -numcore::softplus(raw) - kAlphaFloor; }

/// Price coefficient of class c (0-based) for one consumer.
inline double alpha(const DemandModel& model, std::size_t c, std::span<const double> d) {
    const ClassParams& k = model.classes.at(c);
    if (!model.spec.alpha_network) return alpha_from_raw(k.alpha_raw.value[0]);
    if (d.size() != k.alpha_net.in_dim())
        throw ShapeError("alpha: consumer embedding has length " + std::to_string(d.size()) + ", expected " +
                         std::to_string(k.alpha_net.in_dim()));
    return alpha_from_raw(numcore::mlp_forward(k.alpha_net, d)[0]);
}

/// delta_m for calendar month m in 1..12.
inline std::vector<double> seasonal_shift(const DemandModel& model, int month) {
    if (month < 1 || month > 12) throw ContractError("seasonal_shift: month must be in 1..12");
    const Tensor& z = model.month_codes.value;
    const Tensor& B = model.seasonal_basis.value;
    std::vector<double> out(B.cols(), 0.0);
    for (std::size_t k = 0; k < B.rows(); ++k)
        for (std::size_t q = 0; q < B.cols(); ++q) out[q] += z.at(static_cast<std::size_t>(month - 1), k) * B.at(k, q);
    return out;
}

inline std::vector<double> normalized_item_taste(const DemandModel& model, std::size_t c, std::span<const double> x,
                                                 std::size_t item_id = 0) {
    const ClassParams& k = model.classes.at(c);
    if (x.size() != k.t_net.in_dim()) throw ShapeError("taste: item features have the wrong width");
    std::vector<double> t = numcore::mlp_forward(k.t_net, x);
    const double n = numcore::norm2(t);
    if (!(n > 0.0)) throw NumericalError("taste: item " + std::to_string(item_id) + " has a zero taste vector");
    for (double& v : t) v /= n;
    return t;
}

struct TasteMatch {
    double score = 0.0;       // (r + delta_m) . t
    double base_score = 0.0;  // r . t
};

inline TasteMatch taste_match(const DemandModel& model, std::size_t c, std::span<const double> d,
                              std::span<const double> x, int month, std::size_t item_id = 0) {
    if (!model.spec.taste) return {};
    const ClassParams& k = model.classes.at(c);
    if (d.size() != k.r_net.in_dim()) throw ShapeError("taste: consumer embedding has the wrong width");
    const std::vector<double> r = numcore::mlp_forward(k.r_net, d);
    const std::vector<double> t = normalized_item_taste(model, c, x, item_id);
    TasteMatch out;
    out.base_score = numcore::dot(r, t);
    out.score = out.base_score;
    if (model.spec.seasonal) out.score += numcore::dot(seasonal_shift(model, month), t);
    return out;
}

/// Per-model precomputation over a consumer block and an item block.
struct ModelCache {
    std::size_t classes = 0;
    std::vector<std::vector<double>> alpha;  // [C][I]
    std::vector<Tensor> taste;               // [C] I x K
    std::vector<Tensor> item_taste;          // [C] J x K, unit rows
    Tensor delta;                            // 12 x K
    std::vector<double> gamma, bias, weights;
    double outside_utility = kNegInf;
    bool has_taste = false;

    double taste_score(std::size_t c, std::size_t i, std::size_t j, int month) const {
        if (!has_taste) return 0.0;
        double s = 0.0;
        const std::size_t m = static_cast<std::size_t>(month - 1);
        for (std::size_t q = 0; q < taste[c].cols(); ++q)
            s += (taste[c].at(i, q) + delta.at(m, q)) * item_taste[c].at(j, q);
        return s;
    }
};

inline ModelCache build_cache(const DemandModel& model, const Tensor& consumers, const Tensor& items) {
    const DemandSpec& s = model.spec;
    ModelCache mc;
    mc.classes = model.classes.size();
    mc.has_taste = s.taste;
    mc.weights = model.weights;
    mc.outside_utility = model.outside_utility;
    const std::size_t I = consumers.rows();
    for (std::size_t c = 0; c < mc.classes; ++c) {
        const ClassParams& k = model.classes[c];
        std::vector<double> a(I);
        if (s.alpha_network) {
            const Tensor raw = k.alpha_net.forward(consumers);
            for (std::size_t i = 0; i < I; ++i) a[i] = alpha_from_raw(raw[i]);
        } else {
            std::fill(a.begin(), a.end(), alpha_from_raw(k.alpha_raw.value[0]));
        }
        mc.alpha.push_back(std::move(a));
        mc.gamma.push_back(s.control_function ? k.cf_loading.value[0] : 0.0);
        mc.bias.push_back(k.bias.value[0]);
        if (s.taste) {
            mc.taste.push_back(k.r_net.forward(consumers));
            Tensor t = k.t_net.forward(items);
            for (std::size_t j = 0; j < t.rows(); ++j) {
                const double n = numcore::norm2(t.row(j));
                if (!(n > 0.0)) throw NumericalError("taste: item " + std::to_string(j) + " has a zero taste vector");
                for (double& v : t.row(j)) v /= n;
            }
            mc.item_taste.push_back(std::move(t));
        }
    }
    mc.delta = Tensor(Shape{kMonths, s.taste_rank});
    if (s.taste && s.seasonal)
        for (int m = 1; m <= 12; ++m) {
            const auto d = seasonal_shift(model, m);
            std::copy(d.begin(), d.end(), mc.delta.row(static_cast<std::size_t>(m - 1)).begin());
        }
    return mc;
}

inline ModelCache build_cache(const DemandModel& model, const ChoicePanel& panel) {
    return build_cache(model, panel.consumers, panel.items);
}

inline double cached_utility(const ModelCache& mc, const ChoicePanel& panel, std::size_t c, std::size_t i,
                             std::size_t j, std::size_t t) {
    const double p = panel.prices.at(j, t);
    if (!std::isfinite(p))
        throw DataError("utility: item " + std::to_string(j) + " has no price in week " + std::to_string(t));
    return mc.alpha[c][i] * p + mc.taste_score(c, i, j, panel.month_of_week[t]) + mc.gamma[c] * panel.residual(j) +
           mc.bias[c];
}

inline double utility(const DemandModel& model, const ChoicePanel& panel, std::size_t c, std::size_t i, std::size_t j,
                      std::size_t t) {
    const double p = panel.prices.at(j, t);
    if (!std::isfinite(p))
        throw DataError("utility: item " + std::to_string(j) + " has no price in week " + std::to_string(t));
    const ClassParams& k = model.classes.at(c);
    const double a = alpha(model, c, panel.consumers.row(i));
    const double taste = taste_match(model, c, panel.consumers.row(i), panel.items.row(j), panel.month_of_week[t], j).score;
    const double g = model.spec.control_function ? k.cf_loading.value[0] : 0.0;
    return a * p + taste + g * panel.residual(j) + k.bias.value[0];
}

/// Logit shares over `utilities` plus an outside option at v0; the outside share is the last entry.
inline std::vector<double> logit_shares(std::span<const double> utilities, double v0) {
    double mx = v0;
    for (double u : utilities) mx = std::max(mx, u);
    std::vector<double> out(utilities.size() + 1);
    double z = 0.0;
    for (std::size_t k = 0; k < utilities.size(); ++k) z += out[k] = std::exp(utilities[k] - mx);
    z += out.back() = std::isfinite(v0) ? std::exp(v0 - mx) : 0.0;
    for (double& v : out) v /= z;
    return out;
}

/// Class-conditional shares over the week's choice set (ascending item id), outside last.
inline std::vector<double> class_share(const ModelCache& mc, const ChoicePanel& panel, std::size_t c, std::size_t i,
                                       std::size_t t) {
    const auto set = panel.choice_set(t);
    if (set.empty()) throw ContractError("class_share: week " + std::to_string(t) + " has an empty choice set");
    std::vector<double> u(set.size());
    for (std::size_t k = 0; k < set.size(); ++k) u[k] = cached_utility(mc, panel, c, i, set[k], t);
    return logit_shares(u, mc.outside_utility);
}

inline std::vector<double> class_share(const DemandModel& model, const ChoicePanel& panel, std::size_t c, std::size_t i,
                                       std::size_t t) {
    return class_share(build_cache(model, panel), panel, c, i, t);
}

inline double mixture_share(const ModelCache& mc, const ChoicePanel& panel, std::size_t i, std::size_t j,
                            std::size_t t) {
    const auto set = panel.choice_set(t);
    const auto pos = std::find(set.begin(), set.end(), j);
    if (pos == set.end()) return 0.0;
    double s = 0.0;
    for (std::size_t c = 0; c < mc.classes; ++c)
        s += mc.weights[c] * class_share(mc, panel, c, i, t)[static_cast<std::size_t>(pos - set.begin())];
    return s;
}

inline double mixture_share(const DemandModel& model, const ChoicePanel& panel, std::size_t i, std::size_t j,
                            std::size_t t) {
    return mixture_share(build_cache(model, panel), panel, i, j, t);
}

// ---------------------------------------------------------------------------------------------
// Batched class log-likelihood kernel.

namespace detail {

/// Per-week dense price rows and choice sets, shared by every batch.
struct PanelIndex {
    std::vector<std::vector<std::size_t>> choice_sets;  // per week
    std::vector<std::vector<std::size_t>> train;        // per consumer: event ids
    std::vector<std::vector<std::size_t>> valid;
    std::size_t train_weeks = 0;
    std::size_t train_events = 0;
    std::size_t valid_events = 0;

    PanelIndex(const ChoicePanel& panel, std::size_t train_weeks_) : train_weeks(train_weeks_) {
        const std::size_t T = panel.week_count();
        choice_sets.resize(T);
        for (std::size_t t = 0; t < T; ++t) choice_sets[t] = panel.choice_set(t);
        train.resize(panel.consumer_count());
        valid.resize(panel.consumer_count());
        for (std::size_t e = 0; e < panel.events.size(); ++e) {
            const ChoiceEvent& ev = panel.events[e];
            if (ev.week < train_weeks) {
                train[ev.consumer].push_back(e);
                ++train_events;
            } else {
                valid[ev.consumer].push_back(e);
                ++valid_events;
            }
        }
    }
};

/// Events of a consumer batch grouped by (consumer, month) so the taste term is one GEMM.
struct Batch {
    std::vector<std::size_t> consumers;  // panel ids
    std::vector<std::size_t> pair_local, pair_month;  // per (consumer, month) pair
    struct Event {
        std::size_t local, pair, week, item;
    };
    std::vector<Event> events;
};

inline Batch make_batch(const ChoicePanel& panel, std::span<const std::size_t> consumers,
                        const std::vector<std::vector<std::size_t>>& event_lists) {
    Batch b;
    b.consumers.assign(consumers.begin(), consumers.end());
    for (std::size_t l = 0; l < consumers.size(); ++l) {
        int pair_month[13];
        std::fill(std::begin(pair_month), std::end(pair_month), -1);
        for (std::size_t e : event_lists[consumers[l]]) {
            const ChoiceEvent& ev = panel.events[e];
            const int m = panel.month_of_week[ev.week];
            if (pair_month[m] < 0) {
                pair_month[m] = static_cast<int>(b.pair_local.size());
                b.pair_local.push_back(l);
                b.pair_month.push_back(static_cast<std::size_t>(m - 1));
            }
            b.events.push_back({l, static_cast<std::size_t>(pair_month[m]), ev.week, ev.item});
        }
    }
    return b;
}

using RowMat = numcore::detail::RowMat;

/// Shared forward state for one class over one batch.
struct KernelState {
    RowMat rm;                 // pairs x K: r_i + delta_m
    RowMat taste;              // pairs x J
    std::vector<double> logp;  // per event
    std::vector<std::vector<double>> prob;  // per event, over the week's choice set
};

inline KernelState kernel_forward(const ChoicePanel& panel, const PanelIndex& index, const Batch& b,
                                  const Tensor& alpha, const Tensor& R, const Tensor& T, const Tensor& delta,
                                  double gamma, double bias, double v0, bool keep_prob) {
    KernelState st;
    const std::size_t K = T.cols();
    st.rm.resize(static_cast<Eigen::Index>(b.pair_local.size()), static_cast<Eigen::Index>(K));
    for (std::size_t p = 0; p < b.pair_local.size(); ++p)
        for (std::size_t q = 0; q < K; ++q)
            st.rm(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(q)) =
                R.at(b.pair_local[p], q) + delta.at(b.pair_month[p], q);
    st.taste = st.rm * numcore::detail::as_matrix(T).transpose();
    st.logp.resize(b.events.size());
    if (keep_prob) st.prob.resize(b.events.size());
    std::vector<double> u;
    for (std::size_t e = 0; e < b.events.size(); ++e) {
        const auto& ev = b.events[e];
        const auto& set = index.choice_sets[ev.week];
        const double a = alpha[ev.local];
        u.resize(set.size());
        double mx = v0, uy = 0.0;
        for (std::size_t k = 0; k < set.size(); ++k) {
            const std::size_t j = set[k];
            u[k] = a * panel.prices.at(j, ev.week) +
                   st.taste(static_cast<Eigen::Index>(ev.pair), static_cast<Eigen::Index>(j)) +
                   gamma * panel.residual(j) + bias;
            mx = std::max(mx, u[k]);
            if (j == ev.item) uy = u[k];
        }
        double z = std::isfinite(v0) ? std::exp(v0 - mx) : 0.0;
        for (std::size_t k = 0; k < set.size(); ++k) z += (u[k] = std::exp(u[k] - mx));
        const double lse = mx + std::log(z);
        st.logp[e] = uy - lse;
        if (keep_prob) {
            for (double& v : u) v /= z;
            st.prob[e] = u;
        }
    }
    return st;
}

/// Per-consumer class log-likelihood [n] for the batch events. Inputs: alpha [n], R [n x K], T [J x K],
/// delta [12 x K], gamma and bias scalars.
inline Var class_loglik(const ChoicePanel& panel, const PanelIndex& index, const Batch& b, Var alpha, Var R, Var T,
                        Var delta, Var gamma, Var bias, double v0) {
    const std::size_t n = b.consumers.size();
    auto st = std::make_shared<KernelState>(kernel_forward(panel, index, b, alpha.value(), R.value(), T.value(),
                                                           delta.value(), gamma.value()[0], bias.value()[0], v0, true));
    Tensor out(Shape{n});
    for (std::size_t e = 0; e < b.events.size(); ++e) out[b.events[e].local] += st->logp[e];
    return alpha.graph->record(
        std::move(out), {alpha, R, T, delta, gamma, bias},
        [&panel, &index, &b, st, alpha, R, T, delta, gamma, bias](Graph& g, std::size_t self) {
            const Tensor& w = g.out_grad(self);
            const std::size_t J = panel.item_count();
            RowMat ga = RowMat::Zero(st->taste.rows(), static_cast<Eigen::Index>(J));
            Tensor* d_alpha = g.accumulate(alpha);
            Tensor* d_gamma = g.accumulate(gamma);
            Tensor* d_bias = g.accumulate(bias);
            for (std::size_t e = 0; e < b.events.size(); ++e) {
                const auto& ev = b.events[e];
                const double we = w[ev.local];
                if (we == 0.0) continue;
                const auto& set = index.choice_sets[ev.week];
                const auto& pr = st->prob[e];
                double sa = 0.0, sg = 0.0, sb = 0.0;
                for (std::size_t k = 0; k < set.size(); ++k) {
                    const std::size_t j = set[k];
                    const double gu = we * ((j == ev.item ? 1.0 : 0.0) - pr[k]);
                    sa += gu * panel.prices.at(j, ev.week);
                    sg += gu * panel.residual(j);
                    sb += gu;
                    ga(static_cast<Eigen::Index>(ev.pair), static_cast<Eigen::Index>(j)) += gu;
                }
                if (d_alpha) (*d_alpha)[ev.local] += sa;
                if (d_gamma) (*d_gamma)[0] += sg;
                if (d_bias) (*d_bias)[0] += sb;
            }
            Tensor* d_R = g.accumulate(R);
            Tensor* d_delta = g.accumulate(delta);
            if (d_R || d_delta) {
                const RowMat drm = ga * numcore::detail::as_matrix(g.value(T));
                for (std::size_t p = 0; p < b.pair_local.size(); ++p)
                    for (Eigen::Index q = 0; q < drm.cols(); ++q) {
                        const double v = drm(static_cast<Eigen::Index>(p), q);
                        if (d_R) d_R->at(b.pair_local[p], static_cast<std::size_t>(q)) += v;
                        if (d_delta) d_delta->at(b.pair_month[p], static_cast<std::size_t>(q)) += v;
                    }
            }
            if (Tensor* d_T = g.accumulate(T)) numcore::detail::as_matrix(*d_T) += ga.transpose() * st->rm;
        });
}

/// Recorded class inputs for one batch.
struct ClassVars {
    Var alpha, R, T, delta, gamma, bias;
};

inline Tensor gather(const Tensor& t, std::span<const std::size_t> rows) {
    Tensor out(Shape{rows.size(), t.cols()});
    for (std::size_t k = 0; k < rows.size(); ++k) std::copy(t.row(rows[k]).begin(), t.row(rows[k]).end(), out.row(k).begin());
    return out;
}

inline ClassVars record_class(Graph& g, DemandModel& model, std::size_t c, const Tensor& users, const ChoicePanel& panel,
                              Var delta) {
    ClassParams& k = model.classes[c];
    const DemandSpec& s = model.spec;
    const std::size_t n = users.rows();
    ClassVars v;
    if (s.alpha_network) {
        Var raw = numcore::reshape(k.alpha_net.forward(g, g.constant(users)), Shape{n});
        v.alpha = numcore::add_scalar(numcore::neg(numcore::softplus(raw)), -kAlphaFloor);
    } else {
        Var raw = g.parameter(k.alpha_raw);
        const double a = alpha_from_raw(k.alpha_raw.value[0]);
        const double da = -numcore::sigmoid(k.alpha_raw.value[0]);
        v.alpha = g.record(Tensor(Shape{n}, a), {raw}, [raw, da](Graph& gg, std::size_t self) {
            double s_ = 0.0;
            for (double x : gg.out_grad(self).values()) s_ += x;
            if (Tensor* d = gg.accumulate(raw)) (*d)[0] += da * s_;
        });
    }
    if (s.taste) {
        v.R = k.r_net.forward(g, g.constant(users));
        v.T = numcore::row_normalize(k.t_net.forward(g, g.constant(panel.items)));
    } else {
        v.R = g.constant(Tensor(Shape{n, 1}));
        v.T = g.constant(Tensor(Shape{panel.item_count(), 1}));
    }
    v.delta = s.taste ? delta : g.constant(Tensor(Shape{kMonths, 1}));
    v.gamma = s.control_function ? g.parameter(k.cf_loading) : g.constant(Tensor::scalar(0.0));
    v.bias = g.parameter(k.bias);
    return v;
}

inline Var record_delta(Graph& g, DemandModel& model) {
    if (model.spec.taste && model.spec.seasonal)
        return numcore::matmul(g.parameter(model.month_codes), g.parameter(model.seasonal_basis));
    return g.constant(Tensor(Shape{kMonths, model.spec.taste_rank}));
}

/// Plain per-event class log-probabilities [C][events] for a batch.
inline std::vector<std::vector<double>> event_logprobs(const ModelCache& mc, const ChoicePanel& panel,
                                                       const PanelIndex& index, const Batch& b, double v0) {
    std::vector<std::vector<double>> out(mc.classes);
    const std::size_t n = b.consumers.size();
    for (std::size_t c = 0; c < mc.classes; ++c) {
        Tensor a(Shape{n});
        for (std::size_t l = 0; l < n; ++l) a[l] = mc.alpha[c][b.consumers[l]];
        Tensor R = mc.has_taste ? gather(mc.taste[c], b.consumers) : Tensor(Shape{n, 1});
        const Tensor& T = mc.has_taste ? mc.item_taste[c] : Tensor(Shape{panel.item_count(), 1});
        const Tensor& D = mc.has_taste ? mc.delta : Tensor(Shape{kMonths, 1});
        out[c] = kernel_forward(panel, index, b, a, R, T, D, mc.gamma[c], mc.bias[c], v0, false).logp;
    }
    return out;
}

inline double log_mix(std::span<const double> weights, std::span<const double> logp) {
    double mx = kNegInf;
    for (std::size_t c = 0; c < weights.size(); ++c) mx = std::max(mx, std::log(weights[c]) + logp[c]);
    if (!std::isfinite(mx)) return mx;
    double s = 0.0;
    for (std::size_t c = 0; c < weights.size(); ++c) s += std::exp(std::log(weights[c]) + logp[c] - mx);
    return mx + std::log(s);
}

}  // namespace detail

/// Sum over events of log mixture_share, using the model's outside utility.
/// `events` selects a subset (all events when empty).
inline double log_likelihood(const DemandModel& model, const ChoicePanel& panel,
                             std::span<const std::size_t> events = {}) {
    const ModelCache mc = build_cache(model, panel);
    const detail::PanelIndex index(panel, panel.week_count());
    std::vector<std::vector<std::size_t>> lists(panel.consumer_count());
    if (events.empty())
        lists = index.train;
    else
        for (std::size_t e : events) lists.at(panel.events.at(e).consumer).push_back(e);
    std::vector<std::size_t> all(panel.consumer_count());
    std::iota(all.begin(), all.end(), std::size_t{0});
    double total = 0.0;
    constexpr std::size_t chunk = 512;
    for (std::size_t s = 0; s < all.size(); s += chunk) {
        const std::span<const std::size_t> ids(all.data() + s, std::min(chunk, all.size() - s));
        const detail::Batch b = detail::make_batch(panel, ids, lists);
        const auto lp = detail::event_logprobs(mc, panel, index, b, model.outside_utility);
        std::vector<double> per(mc.classes);
        for (std::size_t e = 0; e < b.events.size(); ++e) {
            for (std::size_t c = 0; c < mc.classes; ++c) per[c] = lp[c][e];
            const double ll = detail::log_mix(mc.weights, per);
            if (!std::isfinite(ll)) {
                const auto& ev = b.events[e];
                throw NumericalError("log_likelihood: event (consumer " + std::to_string(b.consumers[ev.local]) +
                                     ", item " + std::to_string(ev.item) + ", week " + std::to_string(ev.week) +
                                     ") has zero probability");
            }
            total += ll;
        }
    }
    return total;
}

/// Hedonic residual of mean log price on item embeddings, cross-fitted over 5 item folds.
inline std::vector<double> control_function_residual(const Tensor& item_embeddings,
                                                     std::span<const double> mean_log_prices, std::uint64_t seed,
                                                     const hedonic::GbtConfig& cfg = {}) {
    const std::size_t J = item_embeddings.rows();
    if (mean_log_prices.size() != J) throw ShapeError("control_function_residual: one mean log price per item");
    if (J < 10) throw ContractError("control_function_residual: need at least 10 items, got " + std::to_string(J));
    std::vector<long long> groups(J);
    std::iota(groups.begin(), groups.end(), 0LL);
    const std::vector<double> oof = hedonic::cross_fit_predictions(item_embeddings, mean_log_prices, groups, cfg, seed, 5);
    std::vector<double> out(J);
    for (std::size_t j = 0; j < J; ++j) out[j] = mean_log_prices[j] - oof[j];
    return out;
}

/// Mean log price per item over the weeks it was on sale.
inline std::vector<double> mean_log_prices(const ChoicePanel& panel) {
    std::vector<double> out(panel.item_count(), 0.0);
    for (std::size_t j = 0; j < panel.item_count(); ++j) {
        double s = 0.0;
        std::size_t n = 0;
        for (std::size_t t = 0; t < panel.week_count(); ++t)
            if (panel.on_sale(j, t)) {
                s += std::log(panel.prices.at(j, t));
                ++n;
            }
        if (n == 0) throw DataError("item " + std::to_string(j) + " is never on sale");
        out[j] = s / static_cast<double>(n);
    }
    return out;
}

struct FitConfig {
    DemandSpec spec;
    std::size_t epochs = 200;
    std::size_t batch_consumers = 128;
    double learning_rate = 1e-2;
    double weight_decay = 1e-4;
    std::size_t patience = 10;
    double validation_fraction = 0.2;
    double weight_floor = 0.01;
    std::size_t collapse_epochs = 20;
    std::vector<double> alpha_init{-0.6, -0.2};
};

struct EmEpoch {
    double objective = 0.0;  // complete-data objective per training event
    double validation_nll = 0.0;
    double pi1 = 0.0;
};

struct FitReport {
    double train_nll = 0.0;
    double validation_nll = 0.0;
    double mcfadden_r2 = 0.0;
    std::vector<double> alpha_bar;
    double pi1 = 1.0;
    std::vector<EmEpoch> trace;
    std::size_t best_epoch = 0;
    bool converged = false;
    bool class_collapse = false;
    std::size_t train_events = 0;
    std::size_t validation_events = 0;
};

struct FitResult {
    DemandModel model;
    FitReport report;
};

inline std::vector<double> class_mean_alpha(const DemandModel& model, const Tensor& consumers) {
    std::vector<double> out;
    for (std::size_t c = 0; c < model.classes.size(); ++c) {
        double s = 0.0;
        if (!model.spec.alpha_network) {
            out.push_back(alpha_from_raw(model.classes[c].alpha_raw.value[0]));
            continue;
        }
        const Tensor raw = model.classes[c].alpha_net.forward(consumers);
        for (std::size_t i = 0; i < consumers.rows(); ++i) s += alpha_from_raw(raw[i]);
        out.push_back(consumers.rows() ? s / static_cast<double>(consumers.rows()) : 0.0);
    }
    return out;
}

/// Relabels classes so the first has the most negative mean alpha.
inline void canonicalize_classes(DemandModel& model, const Tensor& consumers) {
    if (model.classes.size() != 2) return;
    const auto ab = class_mean_alpha(model, consumers);
    if (ab[1] < ab[0]) {
        std::swap(model.classes[0], model.classes[1]);
        std::swap(model.weights[0], model.weights[1]);
    }
}

namespace detail {

inline double per_event_nll(const DemandModel& model, const ChoicePanel& panel, const PanelIndex& index, bool valid) {
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < panel.consumer_count(); ++i)
        for (std::size_t e : valid ? index.valid[i] : index.train[i]) ids.push_back(e);
    if (ids.empty()) return 0.0;
    return -log_likelihood(model, panel, ids) / static_cast<double>(ids.size());
}

inline double null_loglik(const ChoicePanel& panel, const PanelIndex& index) {
    double s = 0.0;
    for (const auto& list : index.train)
        for (std::size_t e : list) s -= std::log(static_cast<double>(index.choice_sets[panel.events[e].week].size() + 1));
    return s;
}

}  // namespace detail

/// Latent-class EM with one optimizer step per consumer batch. The outside option is left at -inf during
/// estimation, so the likelihood conditions on a purchase; calibrate_v0 sets it afterwards.
inline FitResult em_fit(const ChoicePanel& panel, const FitConfig& cfg, std::uint64_t seed) {
    panel.validate();
    cfg.spec.validate();
    if (panel.consumers.cols() != cfg.spec.user_dim || panel.items.cols() != cfg.spec.item_dim)
        throw ShapeError("em_fit: panel feature widths do not match the model spec");
    if (cfg.batch_consumers < 1) throw ContractError("em_fit: batch size must be >= 1");
    const std::size_t T = panel.week_count();
    const std::size_t n_valid =
        std::min(T - 1, static_cast<std::size_t>(std::lround(cfg.validation_fraction * static_cast<double>(T))));
    const detail::PanelIndex index(panel, T - n_valid);
    if (index.train_events == 0) throw DataError("em_fit: no purchase events in the training weeks");

    Rng rng = make_rng(seed, 0, 0xe3);
    DemandModel model = make_demand_model(cfg.spec, rng, cfg.alpha_init);
    model.outside_utility = kNegInf;
    const std::size_t C = cfg.spec.classes;
    numcore::OptState opt(numcore::AdamWConfig{.learning_rate = cfg.learning_rate, .weight_decay = cfg.weight_decay});
    auto params = model.parameters();

    std::vector<std::size_t> order(panel.consumer_count());
    std::iota(order.begin(), order.end(), std::size_t{0});

    FitReport rep;
    rep.train_events = index.train_events;
    rep.validation_events = index.valid_events;
    const bool track = index.valid_events > 0;
    double best = INFINITY;
    DemandModel best_model = model;
    std::size_t since_best = 0, clipped_run = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_in_place(order, rng);
        std::vector<double> post_sum(C, 0.0);
        double objective = 0.0;
        for (std::size_t s = 0; s < order.size(); s += cfg.batch_consumers) {
            const std::span<const std::size_t> ids(order.data() + s, std::min(cfg.batch_consumers, order.size() - s));
            const detail::Batch b = detail::make_batch(panel, ids, index.train);
            const std::size_t n = ids.size();
            if (b.events.empty()) {
                for (std::size_t c = 0; c < C; ++c) post_sum[c] += static_cast<double>(n) * model.weights[c];
                continue;
            }
            numcore::zero_grads(params);
            Graph g;
            const Tensor users = detail::gather(panel.consumers, ids);
            Var delta = detail::record_delta(g, model);
            std::vector<Var> ll;
            for (std::size_t c = 0; c < C; ++c) {
                const detail::ClassVars v = detail::record_class(g, model, c, users, panel, delta);
                ll.push_back(detail::class_loglik(panel, index, b, v.alpha, v.R, v.T, v.delta, v.gamma, v.bias, kNegInf));
            }
            // E step on the current parameters.
            std::vector<std::vector<double>> q(C, std::vector<double>(n));
            for (std::size_t l = 0; l < n; ++l) {
                double mx = kNegInf;
                for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, std::log(model.weights[c]) + ll[c].value()[l]);
                double z = 0.0;
                for (std::size_t c = 0; c < C; ++c) z += q[c][l] = std::exp(std::log(model.weights[c]) + ll[c].value()[l] - mx);
                for (std::size_t c = 0; c < C; ++c) {
                    q[c][l] /= z;
                    post_sum[c] += q[c][l];
                    objective += q[c][l] * (std::log(model.weights[c]) + ll[c].value()[l]);
                }
            }
            const double scale = -1.0 / static_cast<double>(b.events.size());
            Var loss = numcore::weighted_sum(ll[0], [&] {
                std::vector<double> w(q[0]);
                for (double& x : w) x *= scale;
                return w;
            }());
            for (std::size_t c = 1; c < C; ++c) {
                std::vector<double> w(q[c]);
                for (double& x : w) x *= scale;
                loss = numcore::add(loss, numcore::weighted_sum(ll[c], std::move(w)));
            }
            g.backward(loss);
            numcore::adamw_step(opt, params);
            model.recenter_month_codes();
        }
        bool clipped = false;
        if (C > 1) {
            const double tot = std::accumulate(post_sum.begin(), post_sum.end(), 0.0);
            for (std::size_t c = 0; c < C; ++c) {
                double w = post_sum[c] / tot;
                if (w < cfg.weight_floor || w > 1.0 - cfg.weight_floor) clipped = true;
                model.weights[c] = std::clamp(w, cfg.weight_floor, 1.0 - cfg.weight_floor);
            }
            const double z = std::accumulate(model.weights.begin(), model.weights.end(), 0.0);
            for (double& w : model.weights) w /= z;
        }
        clipped_run = clipped ? clipped_run + 1 : 0;
        if (clipped_run >= cfg.collapse_epochs) rep.class_collapse = true;

        EmEpoch ep;
        ep.objective = objective / static_cast<double>(index.train_events);
        ep.pi1 = model.weights[0];
        if (track) {
            ep.validation_nll = detail::per_event_nll(model, panel, index, true);
            if (!std::isfinite(ep.validation_nll)) throw TrainingError("em_fit: validation NLL is not finite");
        }
        rep.trace.push_back(ep);
        if (!track) continue;
        if (ep.validation_nll < best) {
            best = ep.validation_nll;
            best_model = model;
            rep.best_epoch = epoch + 1;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            rep.converged = true;
            break;
        }
    }
    if (track) model = std::move(best_model);
    canonicalize_classes(model, panel.consumers);

    rep.alpha_bar = class_mean_alpha(model, panel.consumers);
    rep.pi1 = model.weights[0];
    rep.train_nll = detail::per_event_nll(model, panel, index, false);
    rep.validation_nll = track ? detail::per_event_nll(model, panel, index, true) : 0.0;
    const double ll0 = detail::null_loglik(panel, index);
    rep.mcfadden_r2 = 1.0 - (-rep.train_nll * static_cast<double>(index.train_events)) / ll0;
    return {std::move(model), std::move(rep)};
}

/// Mean inside share over all consumer-weeks as a function of the outside utility.
class InsideShareCurve {
public:
    InsideShareCurve(const DemandModel& model, const ChoicePanel& panel) : weights_(model.weights) {
        const ModelCache mc = build_cache(model, panel);
        const std::size_t I = panel.consumer_count(), T = panel.week_count();
        std::vector<std::vector<std::size_t>> sets(T);
        for (std::size_t t = 0; t < T; ++t) sets[t] = panel.choice_set(t);
        std::vector<double> u;
        for (std::size_t i = 0; i < I; ++i)
            for (std::size_t t = 0; t < T; ++t) {
                if (sets[t].empty()) continue;
                for (std::size_t c = 0; c < mc.classes; ++c) {
                    u.clear();
                    for (std::size_t j : sets[t]) u.push_back(cached_utility(mc, panel, c, i, j, t));
                    lse_.push_back(numcore::log_sum_exp(u));
                }
                ++cells_;
            }
        total_cells_ = I * T;
    }

    double operator()(double v0) const {
        double s = 0.0;
        const std::size_t C = weights_.size();
        for (std::size_t k = 0; k < cells_; ++k)
            for (std::size_t c = 0; c < C; ++c) s += weights_[c] * numcore::sigmoid(lse_[k * C + c] - v0);
        return total_cells_ ? s / static_cast<double>(total_cells_) : 0.0;
    }

private:
    std::vector<double> weights_;
    std::vector<double> lse_;
    std::size_t cells_ = 0;
    std::size_t total_cells_ = 0;
};

/// Bisection for the outside utility that hits a target mean inside share.
inline double calibrate_v0(const DemandModel& model, const ChoicePanel& panel, double target, double tol = 1e-9) {
    if (!(target > 0.0 && target < 1.0)) throw ContractError("calibrate_v0: target share must lie in (0,1)");
    const InsideShareCurve share(model, panel);
    double lo = -30.0, hi = 30.0;
    for (int k = 0; k < 20 && share(lo) < target; ++k) lo -= 30.0 * (1 << std::min(k, 10));
    for (int k = 0; k < 20 && share(hi) > target; ++k) hi += 30.0 * (1 << std::min(k, 10));
    if (share(lo) < target || share(hi) > target)
        throw NumericalError("calibrate_v0: target inside share " + std::to_string(target) +
                             " is not reachable in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        const double s = share(mid);
        if (std::abs(s - target) < tol || hi - lo < 1e-13) return mid;
        (s > target ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

inline double mean_inside_share(const DemandModel& model, const ChoicePanel& panel) {
    return InsideShareCurve(model, panel)(model.outside_utility);
}

/// Panel restricted to a multiset of consumers (duplicates allowed); events follow their consumer.
inline ChoicePanel resample_consumers(const ChoicePanel& panel, std::span<const std::size_t> ids) {
    ChoicePanel out;
    out.items = panel.items;
    out.prices = panel.prices;
    out.month_of_week = panel.month_of_week;
    out.cf_residual = panel.cf_residual;
    out.consumers = detail::gather(panel.consumers, ids);
    std::vector<std::vector<std::size_t>> by(panel.consumer_count());
    for (std::size_t e = 0; e < panel.events.size(); ++e) by[panel.events[e].consumer].push_back(e);
    for (std::size_t k = 0; k < ids.size(); ++k)
        for (std::size_t e : by[ids[k]]) out.events.push_back({k, panel.events[e].item, panel.events[e].week});
    return out;
}

struct BootstrapDraw {
    double alpha1 = 0.0, alpha2 = 0.0, gap = 0.0, pi1 = 0.0, validation_nll = 0.0;
    bool converged = false;
};

struct BootstrapResult {
    std::vector<BootstrapDraw> draws;
    double se_alpha1 = 0.0, se_alpha2 = 0.0, se_gap = 0.0, se_pi1 = 0.0, se_validation_nll = 0.0;
    std::size_t non_converged = 0;
};

inline double sample_sd(std::span<const double> x) {
    if (x.size() < 2) return 0.0;
    const double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
    double s = 0.0;
    for (double v : x) s += (v - m) * (v - m);
    return std::sqrt(s / static_cast<double>(x.size() - 1));
}

/// Consumer bootstrap. Every replicate is fitted with the same fit seed, so only the resample varies.
inline BootstrapResult bootstrap_fit(const ChoicePanel& panel, std::size_t B, const FitConfig& cfg, std::uint64_t seed) {
    if (B < 2) throw ContractError("bootstrap_fit: need at least 2 draws");
    BootstrapResult out;
    const std::size_t I = panel.consumer_count();
    for (std::size_t b = 0; b < B; ++b) {
        Rng rng = make_rng(seed, b, 0xb007);
        std::vector<std::size_t> ids(I);
        for (std::size_t& v : ids) v = static_cast<std::size_t>(rng() % I);
        const FitResult fit = em_fit(resample_consumers(panel, ids), cfg, seed);
        BootstrapDraw d;
        d.alpha1 = fit.report.alpha_bar[0];
        d.alpha2 = fit.report.alpha_bar.size() > 1 ? fit.report.alpha_bar[1] : fit.report.alpha_bar[0];
        d.gap = std::abs(d.alpha1 - d.alpha2);
        d.pi1 = fit.report.pi1;
        d.validation_nll = fit.report.validation_nll;
        d.converged = fit.report.converged && !fit.report.class_collapse;
        if (!d.converged) ++out.non_converged;
        out.draws.push_back(d);
    }
    auto column = [&](auto field) {
        std::vector<double> v;
        for (const BootstrapDraw& d : out.draws) v.push_back(d.*field);
        return sample_sd(v);
    };
    out.se_alpha1 = column(&BootstrapDraw::alpha1);
    out.se_alpha2 = column(&BootstrapDraw::alpha2);
    out.se_gap = column(&BootstrapDraw::gap);
    out.se_pi1 = column(&BootstrapDraw::pi1);
    out.se_validation_nll = column(&BootstrapDraw::validation_nll);
    return out;
}

}  // namespace deepdemand::demand
