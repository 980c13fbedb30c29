#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "deepdemand/eventstudy/poisson.hpp"
#include "deepdemand/hedonic/index.hpp"
#include "deepdemand/numcore/rng.hpp"

namespace deepdemand::harness {

using numcore::Shape;
using numcore::Tensor;

// ---------------------------------------------------------------------------------------------
// Hedonic turnover panel.

struct HedonicSimConfig {
    std::size_t cohort_size = 40;   // articles entering each month
    std::size_t months = 24;
    std::size_t lifespan = 6;       // months an article stays on sale
    std::size_t features = 8;
    double base_log_price = 3.0;
    double feature_scale = 0.3;     // sd of the quality index across articles
    double age_markdown = 0.05;     // log-price drop per month of age, not visible to the surface
    double time_trend = 0.0;        // planted quality-adjusted log change per month
    double coefficient_drift = 0.0; // per-month change of the feature loadings
    double noise_sd = 0.05;
    double mean_quantity = 20.0;
};

struct HedonicSim {
    hedonic::HedonicPanel panel;
    std::vector<double> true_log_price;  // planted surface value per row, without noise and markdown
};

/// Staggered cohorts with a stationary age mix from the first month on.
inline HedonicSim simulate_hedonic_panel(const HedonicSimConfig& cfg, std::uint64_t seed) {
    if (cfg.cohort_size == 0 || cfg.months == 0 || cfg.lifespan == 0 || cfg.features == 0)
        throw ContractError("hedonic sim: counts must be >= 1");
    Rng rng = make_rng(seed, 0, 0x4ed0);
    std::vector<double> beta(cfg.features), drift(cfg.features);
    for (std::size_t f = 0; f < cfg.features; ++f) {
        beta[f] = cfg.feature_scale * standard_normal(rng) / std::sqrt(static_cast<double>(cfg.features));
        drift[f] = standard_normal(rng) / std::sqrt(static_cast<double>(cfg.features));
    }
    HedonicSim out;
    std::vector<std::vector<double>> rows;
    const long long first_cohort = -static_cast<long long>(cfg.lifespan) + 1;
    for (long long cohort = first_cohort; cohort < static_cast<long long>(cfg.months); ++cohort) {
        for (std::size_t a = 0; a < cfg.cohort_size; ++a) {
            const long long id = (cohort - first_cohort) * static_cast<long long>(cfg.cohort_size) + static_cast<long long>(a);
            Rng ar = make_rng(seed, static_cast<std::uint64_t>(id), 0xa271);
            std::vector<double> x(cfg.features);
            for (double& v : x) v = standard_normal(ar);
            for (std::size_t age = 0; age < cfg.lifespan; ++age) {
                const long long m = cohort + static_cast<long long>(age);
                if (m < 0 || m >= static_cast<long long>(cfg.months)) continue;
                double q = 0.0;
                for (std::size_t f = 0; f < cfg.features; ++f)
                    q += (beta[f] + cfg.coefficient_drift * static_cast<double>(m) * drift[f]) * x[f];
                const double truth = cfg.base_log_price + q + cfg.time_trend * static_cast<double>(m);
                out.panel.article.push_back(id);
                out.panel.month.push_back(static_cast<int>(m) + 1);
                out.panel.log_price.push_back(truth - cfg.age_markdown * static_cast<double>(age) + cfg.noise_sd * standard_normal(ar));
                out.panel.quantity.push_back(1.0 + static_cast<double>(std::poisson_distribution<int>(
                                                       cfg.mean_quantity * std::exp(-0.2 * static_cast<double>(age)))(ar)));
                out.panel.category.push_back(static_cast<std::size_t>(id % 3));
                out.true_log_price.push_back(truth);
                rows.push_back(x);
            }
        }
    }
    out.panel.features = Tensor(Shape{rows.size(), cfg.features});
    for (std::size_t r = 0; r < rows.size(); ++r) std::copy(rows[r].begin(), rows[r].end(), out.panel.features.row(r).begin());
    return out;
}

// ---------------------------------------------------------------------------------------------
// Daily event panel.

struct EventSimConfig {
    std::size_t units = 1;
    std::size_t days = 730;
    int start_year = 2018, start_month = 9, start_day = 23;
    double base_log_rate = 3.0;
    double trend = 0.1;
    double seasonal_amplitude = 0.2;
    double ar_rho = 0.5;
    double ar_sd = 0.2;
    double discount_prob = 0.1;
    double discount_effect = 0.3;
    std::map<std::string, double> kappa{{"WHO", -0.1}, {"Lockdown", -0.5}, {"Reopening", -0.2}, {"Post-Recovery", -0.1}};
    std::vector<double> unit_lockdown;  // per-unit override of the Lockdown effect, empty = shared
    double unit_log_rate_sd = 0.0;
};

struct EventSim {
    eventstudy::EventPanel panel;
    std::vector<double> lockdown;  // planted per unit
};

namespace detail {

inline std::string period_of(std::chrono::year_month_day d) {
    using namespace std::chrono;
    const sys_days s{d};
    if (s < sys_days{year{2020} / March / 11}) return "";
    if (s < sys_days{year{2020} / March / 23}) return "WHO";
    if (s < sys_days{year{2020} / June / 1}) return "Lockdown";
    if (s < sys_days{year{2020} / August / 1}) return "Reopening";
    return "Post-Recovery";
}

inline std::string iso(std::chrono::year_month_day d) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(d.year()), static_cast<unsigned>(d.month()),
                  static_cast<unsigned>(d.day()));
    return buf;
}

}  // namespace detail

/// Calendar, period labels and discount flags shared by every unit.
inline eventstudy::EventPanel event_calendar(const EventSimConfig& cfg, std::uint64_t seed) {
    using namespace std::chrono;
    eventstudy::EventPanel p;
    const sys_days start{year{cfg.start_year} / month{static_cast<unsigned>(cfg.start_month)} / day{static_cast<unsigned>(cfg.start_day)}};
    Rng rng = make_rng(seed, 0, 0xca1);
    for (std::size_t t = 0; t < cfg.days; ++t) {
        const sys_days s = start + days{static_cast<int>(t)};
        const year_month_day d{s};
        p.month.push_back(static_cast<int>(static_cast<unsigned>(d.month())));
        p.dow.push_back(static_cast<int>(weekday{s}.iso_encoding()) - 1);  // Monday 0
        p.discount.push_back(uniform01(rng) < cfg.discount_prob ? 1 : 0);
        p.period.push_back(detail::period_of(d));
        p.date.push_back(detail::iso(d));
    }
    return p;
}

/// Poisson counts around a log-linear mean with stationary AR(1) log-scale noise (mean one after exponentiation).
inline EventSim simulate_event_panel(const EventSimConfig& cfg, std::uint64_t seed) {
    if (cfg.units == 0 || cfg.days < 2) throw ContractError("event sim: need at least one unit and two days");
    if (!cfg.unit_lockdown.empty() && cfg.unit_lockdown.size() != cfg.units)
        throw ContractError("event sim: one lockdown effect per unit required");
    EventSim out;
    out.panel = event_calendar(cfg, seed);
    const double dow_effect[7] = {0.0, -0.05, -0.05, 0.0, 0.1, 0.25, 0.15};
    const double stationary_var = cfg.ar_sd * cfg.ar_sd / (1.0 - cfg.ar_rho * cfg.ar_rho);
    for (std::size_t u = 0; u < cfg.units; ++u) {
        Rng rng = make_rng(seed, u + 1, 0xe7e);
        const double level = cfg.base_log_rate + cfg.unit_log_rate_sd * standard_normal(rng);
        const double lock = cfg.unit_lockdown.empty() ? cfg.kappa.at("Lockdown") : cfg.unit_lockdown[u];
        out.lockdown.push_back(lock);
        char name[32];
        std::snprintf(name, sizeof name, "unit_%04zu", u);
        out.panel.units.emplace_back(name);
        std::vector<double> y(cfg.days);
        double e = std::sqrt(stationary_var) * standard_normal(rng);
        for (std::size_t t = 0; t < cfg.days; ++t) {
            if (t > 0) e = cfg.ar_rho * e + cfg.ar_sd * standard_normal(rng);
            const std::string& per = out.panel.period[t];
            double eta = level + cfg.trend * static_cast<double>(t) / static_cast<double>(cfg.days - 1) +
                         cfg.seasonal_amplitude * std::sin(2.0 * M_PI * (out.panel.month[t] - 1) / 12.0) +
                         dow_effect[out.panel.dow[t]] + cfg.discount_effect * out.panel.discount[t];
            if (per == "Lockdown") eta += lock;
            else if (!per.empty()) eta += cfg.kappa.at(per);
            const double mu = std::exp(eta + e - 0.5 * stationary_var);
            y[t] = static_cast<double>(std::poisson_distribution<long long>(mu)(rng));
        }
        out.panel.counts.push_back(std::move(y));
    }
    return out;
}

/// Items drawn around planted unit-norm blob centres; the blob fixes the lockdown regime.
struct ClusteredEventSim {
    EventSim events;
    Tensor embeddings;                  // units x dim, unit rows
    std::vector<std::size_t> blob;      // planted label
    std::vector<double> blob_lockdown;  // per blob
    double planted_range = 0.0;         // % effect range across blobs
};

inline ClusteredEventSim simulate_clustered_events(std::size_t items, std::size_t blobs, std::size_t dim,
                                                   const std::vector<double>& regimes, double blob_sd,
                                                   EventSimConfig cfg, std::uint64_t seed) {
    if (blobs == 0 || regimes.empty()) throw ContractError("clustered events: need blobs and regimes");
    ClusteredEventSim out;
    Rng rng = make_rng(seed, 0, 0xb10b);
    Tensor centres(Shape{blobs, dim});
    for (std::size_t b = 0; b < blobs; ++b) {
        for (double& v : centres.row(b)) v = standard_normal(rng);
        const double n = numcore::norm2(centres.row(b));
        for (double& v : centres.row(b)) v /= n;
        out.blob_lockdown.push_back(regimes[b % regimes.size()]);
    }
    out.embeddings = Tensor(Shape{items, dim});
    cfg.units = items;
    cfg.unit_lockdown.clear();
    for (std::size_t i = 0; i < items; ++i) {
        const std::size_t b = i % blobs;
        out.blob.push_back(b);
        for (std::size_t q = 0; q < dim; ++q) out.embeddings.at(i, q) = centres.at(b, q) + blob_sd * standard_normal(rng);
        const double n = numcore::norm2(out.embeddings.row(i));
        for (double& v : out.embeddings.row(i)) v /= n;
        cfg.unit_lockdown.push_back(out.blob_lockdown[b]);
    }
    out.events = simulate_event_panel(cfg, seed);
    const auto [lo, hi] = std::minmax_element(out.blob_lockdown.begin(), out.blob_lockdown.end());
    out.planted_range = eventstudy::effect_pct(*hi) - eventstudy::effect_pct(*lo);
    return out;
}

}  // namespace deepdemand::harness
