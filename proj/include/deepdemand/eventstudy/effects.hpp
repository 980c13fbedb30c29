#pragma once

#include <string>
#include <vector>

#include "deepdemand/eventstudy/cluster.hpp"
#include "deepdemand/eventstudy/poisson.hpp"

namespace deepdemand::eventstudy {

struct PeriodEffect {
    std::string unit;
    std::string period;
    double kappa = 0.0, se = 0.0, z = 0.0, p = 1.0;
    double effect = 0.0;  // %
    double p_adjusted = 1.0;
    bool rejected = false;
    bool separated = false;
    bool converged = true;
};

/// Per-unit fits on a shared design; BH correction across every unit-period pair.
inline std::vector<PeriodEffect> period_effects(const EventPanel& panel, std::size_t lag, double fdr_q) {
    panel.validate();
    const Design d = build_design(panel);
    QmleOptions opt;
    opt.hac_lag = lag;
    std::vector<PeriodEffect> out;
    for (std::size_t u = 0; u < panel.units.size(); ++u) {
        VectorXd y(static_cast<Eigen::Index>(panel.days()));
        for (std::size_t t = 0; t < panel.days(); ++t) y(static_cast<Eigen::Index>(t)) = panel.counts[u][t];
        const QmleFit f = poisson_qmle(d.X, y, opt);
        for (const std::string& p : panel.periods) {
            const Eigen::Index c = d.column("period_" + p);
            PeriodEffect e;
            e.unit = panel.units[u];
            e.period = p;
            e.kappa = f.beta(c);
            e.se = f.se(c);
            e.z = f.z(c);
            e.p = f.p(c);
            e.effect = effect_pct(e.kappa);
            e.separated = f.separated[static_cast<std::size_t>(c)];
            e.converged = f.converged;
            out.push_back(e);
        }
    }
    std::vector<double> ps;
    for (const auto& e : out) ps.push_back(e.p);
    const FdrResult fdr = bh_fdr(ps, fdr_q);
    for (std::size_t k = 0; k < out.size(); ++k) {
        out[k].p_adjusted = fdr.adjusted[k];
        out[k].rejected = fdr.rejected[k];
    }
    return out;
}

/// Sums unit series within each cluster; cluster units are named "cluster_<label>".
inline EventPanel aggregate(const EventPanel& panel, const std::vector<std::size_t>& labels, std::size_t k) {
    if (labels.size() != panel.units.size()) throw ContractError("aggregate: one label per unit required");
    EventPanel out = panel;
    out.units.clear();
    out.counts.assign(k, std::vector<double>(panel.days(), 0.0));
    for (std::size_t c = 0; c < k; ++c) out.units.push_back("cluster_" + std::to_string(c));
    for (std::size_t u = 0; u < labels.size(); ++u) {
        if (labels[u] >= k) throw ContractError("aggregate: label out of range");
        for (std::size_t t = 0; t < panel.days(); ++t) out.counts[labels[u]][t] += panel.counts[u][t];
    }
    return out;
}

/// Lockdown-style effect (%) per cluster for one period.
inline std::vector<double> cluster_effects(const EventPanel& panel, const Partition& part, const std::string& period,
                                           std::size_t lag = 7) {
    const EventPanel agg = aggregate(panel, part.labels, part.k);
    const Design d = build_design(agg);
    const Eigen::Index c = d.column("period_" + period);
    QmleOptions opt;
    opt.hac_lag = lag;
    std::vector<double> out;
    for (std::size_t u = 0; u < agg.units.size(); ++u) {
        VectorXd y(static_cast<Eigen::Index>(agg.days()));
        for (std::size_t t = 0; t < agg.days(); ++t) y(static_cast<Eigen::Index>(t)) = agg.counts[u][t];
        out.push_back(effect_pct(poisson_qmle(d.X, y, opt).beta(c)));
    }
    return out;
}

/// Unit count series as a tensor (rows = units), for the k-selection viability filter.
inline Tensor count_matrix(const EventPanel& panel) {
    Tensor out(Shape{panel.units.size(), panel.days()});
    for (std::size_t u = 0; u < panel.units.size(); ++u)
        for (std::size_t t = 0; t < panel.days(); ++t) out.at(u, t) = panel.counts[u][t];
    return out;
}

}  // namespace deepdemand::eventstudy
