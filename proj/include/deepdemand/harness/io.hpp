#pragma once

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "deepdemand/demand.hpp"
#include "deepdemand/eventstudy/poisson.hpp"
#include "deepdemand/hedonic/index.hpp"

namespace deepdemand::io {

namespace fs = std::filesystem;
using numcore::Shape;
using numcore::Tensor;

// ---------------------------------------------------------------------------------------------
// Text helpers.

namespace detail {

inline std::string where(const fs::path& file, std::size_t line) { return file.string() + ":" + std::to_string(line) + ": "; }

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view line, char sep = ',') {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(sep, start);
        out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline double to_double(const std::string& s, const fs::path& file, std::size_t line) {
    if (s == "nan" || s == "NaN" || s == "NA" || s.empty()) return NAN;
    double v = 0.0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw DataError(where(file, line) + "'" + s + "' is not a number");
    return v;
}

inline long long to_int(const std::string& s, const fs::path& file, std::size_t line) {
    long long v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw DataError(where(file, line) + "'" + s + "' is not an integer");
    return v;
}

inline std::size_t to_index(const std::string& s, const fs::path& file, std::size_t line) {
    const long long v = to_int(s, file, line);
    if (v < 0) throw DataError(where(file, line) + "negative index " + s);
    return static_cast<std::size_t>(v);
}

/// Shortest text that parses back to the same double.
inline std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    char buf[32];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

inline std::ifstream open_in(const fs::path& file, bool binary = false) {
    std::ifstream in(file, binary ? std::ios::binary : std::ios::in);
    if (!in) throw DataError("cannot open " + file.string());
    return in;
}

inline std::ofstream open_out(const fs::path& file, bool binary = false) {
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    std::ofstream out(file, binary ? std::ios::binary : std::ios::out);
    if (!out) throw DataError("cannot write " + file.string());
    return out;
}

/// Rows of a CSV file with a required header; calls fn(fields, line_number) for each non-empty data row.
template <typename Fn>
void read_csv(const fs::path& file, const std::vector<std::string>& expected_prefix, Fn&& fn,
              std::vector<std::string>* header_out = nullptr) {
    std::ifstream in = open_in(file);
    std::string line;
    if (!std::getline(in, line)) throw DataError(where(file, 1) + "missing header");
    const auto header = split(line);
    for (std::size_t k = 0; k < expected_prefix.size(); ++k)
        if (k >= header.size() || header[k] != expected_prefix[k])
            throw DataError(where(file, 1) + "expected column '" + expected_prefix[k] + "' at position " + std::to_string(k + 1));
    if (header_out) *header_out = header;
    std::size_t n = 1;
    while (std::getline(in, line)) {
        ++n;
        if (trim(line).empty()) continue;
        const auto fields = split(line);
        if (fields.size() != header.size())
            throw DataError(where(file, n) + "expected " + std::to_string(header.size()) + " fields, found " +
                            std::to_string(fields.size()));
        fn(fields, n);
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------------------------
// Embedding files: "n d" header line, then n*d row-major float32 little-endian values. Ids sit in <path>.ids.

struct EmbeddingTable {
    std::vector<std::string> ids;
    Tensor values;  // n x d
};

inline fs::path ids_path(const fs::path& p) { return fs::path(p.string() + ".ids"); }

inline void save_embeddings(const fs::path& file, const EmbeddingTable& t) {
    const std::size_t n = t.values.rows(), d = t.values.cols();
    if (!t.ids.empty() && t.ids.size() != n) throw ShapeError("save_embeddings: one id per row required");
    {
        std::ofstream ids = detail::open_out(ids_path(file));
        for (std::size_t i = 0; i < n; ++i) ids << (t.ids.empty() ? std::to_string(i) : t.ids[i]) << '\n';
    }
    std::ofstream out = detail::open_out(file, true);
    out << n << ' ' << d << '\n';
    for (double v : t.values.values()) {
        std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
        out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
    if (!out) throw DataError("save_embeddings: write failed for " + file.string());
}

namespace detail {

inline EmbeddingTable load_text_embeddings(const fs::path& file) {
    std::ifstream in = open_in(file);
    EmbeddingTable t;
    std::vector<double> vals;
    std::string line;
    std::size_t n = 0, d = 0;
    while (std::getline(in, line)) {
        ++n;
        if (trim(line).empty()) continue;
        const auto f = split(line);
        if (f.size() < 2) throw DataError(where(file, n) + "expected an id and at least one value");
        if (d == 0) d = f.size() - 1;
        if (f.size() - 1 != d)
            throw DataError(where(file, n) + "expected " + std::to_string(d) + " values, found " + std::to_string(f.size() - 1));
        t.ids.push_back(f[0]);
        for (std::size_t k = 1; k < f.size(); ++k) {
            const double v = to_double(f[k], file, n);
            if (!std::isfinite(v)) throw DataError(where(file, n) + "non-finite embedding value");
            vals.push_back(v);
        }
    }
    t.values = Tensor(Shape{t.ids.size(), d}, std::move(vals));
    return t;
}

}  // namespace detail

/// Reads the binary format, or the text alternative (id followed by d comma-separated reals per line).
inline EmbeddingTable load_embeddings(const fs::path& file) {
    std::ifstream in = detail::open_in(file, true);
    std::string header;
    if (!std::getline(in, header)) throw DataError(detail::where(file, 1) + "empty embedding file");
    if (header.find(',') != std::string::npos) return detail::load_text_embeddings(file);
    std::istringstream hs(header);
    long long n = -1, d = -1;
    std::string extra;
    if (!(hs >> n >> d) || (hs >> extra) || n < 0 || d < 1)
        throw DataError(detail::where(file, 1) + "expected header 'n d'");
    EmbeddingTable t;
    std::vector<double> vals(static_cast<std::size_t>(n * d));
    for (std::size_t k = 0; k < vals.size(); ++k) {
        std::uint32_t bits = 0;
        if (!in.read(reinterpret_cast<char*>(&bits), sizeof bits))
            throw DataError(file.string() + ": truncated after " + std::to_string(k) + " of " + std::to_string(vals.size()) +
                            " values");
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
        vals[k] = static_cast<double>(std::bit_cast<float>(bits));
        if (!std::isfinite(vals[k])) throw DataError(file.string() + ": non-finite value in row " + std::to_string(k / d));
    }
    if (in.peek() != std::char_traits<char>::eof()) throw DataError(file.string() + ": trailing bytes after the last row");
    t.values = Tensor(Shape{static_cast<std::size_t>(n), static_cast<std::size_t>(d)}, std::move(vals));
    if (fs::exists(ids_path(file))) {
        std::ifstream ids = detail::open_in(ids_path(file));
        std::string line;
        while (std::getline(ids, line))
            if (!detail::trim(line).empty()) t.ids.push_back(detail::trim(line));
        if (t.ids.size() != static_cast<std::size_t>(n))
            throw DataError(ids_path(file).string() + ": " + std::to_string(t.ids.size()) + " ids for " + std::to_string(n) +
                            " rows");
    } else {
        for (long long i = 0; i < n; ++i) t.ids.push_back(std::to_string(i));
    }
    return t;
}

// ---------------------------------------------------------------------------------------------
// Choice panel directory.

inline void save_panel(const fs::path& dir, const demand::ChoicePanel& p) {
    fs::create_directories(dir);
    save_embeddings(dir / "consumers.emb", {{}, p.consumers});
    save_embeddings(dir / "items.emb", {{}, p.items});
    {
        std::ofstream out = detail::open_out(dir / "prices.csv");
        out << "item_id,week,price\n";
        for (std::size_t j = 0; j < p.item_count(); ++j)
            for (std::size_t t = 0; t < p.week_count(); ++t)
                if (p.on_sale(j, t)) out << j << ',' << t << ',' << detail::fmt(p.prices.at(j, t)) << '\n';
    }
    {
        std::ofstream out = detail::open_out(dir / "events.csv");
        out << "consumer_id,item_id,week\n";
        for (const auto& e : p.events) out << e.consumer << ',' << e.item << ',' << e.week << '\n';
    }
    std::ofstream out = detail::open_out(dir / "months.csv");
    out << "week,month\n";
    for (std::size_t t = 0; t < p.week_count(); ++t) out << t << ',' << p.month_of_week[t] << '\n';
}

/// Loads a panel directory. Item and consumer ids are row positions in the embedding files.
inline demand::ChoicePanel load_panel(const fs::path& dir) {
    demand::ChoicePanel p;
    p.consumers = load_embeddings(dir / "consumers.emb").values;
    p.items = load_embeddings(dir / "items.emb").values;
    std::map<std::size_t, int> months;
    detail::read_csv(dir / "months.csv", {"week", "month"}, [&](const auto& f, std::size_t n) {
        const std::size_t w = detail::to_index(f[0], dir / "months.csv", n);
        const long long m = detail::to_int(f[1], dir / "months.csv", n);
        if (m < 1 || m > 12) throw DataError(detail::where(dir / "months.csv", n) + "month outside 1..12");
        if (!months.emplace(w, static_cast<int>(m)).second)
            throw DataError(detail::where(dir / "months.csv", n) + "week " + f[0] + " listed twice");
    });
    const std::size_t T = months.size();
    for (std::size_t t = 0; t < T; ++t) {
        const auto it = months.find(t);
        if (it == months.end()) throw DataError((dir / "months.csv").string() + ": week " + std::to_string(t) + " missing");
        p.month_of_week.push_back(it->second);
    }
    const std::size_t J = p.item_count(), I = p.consumer_count();
    p.prices = Tensor(Shape{J, T}, NAN);
    detail::read_csv(dir / "prices.csv", {"item_id", "week", "price"}, [&](const auto& f, std::size_t n) {
        const fs::path file = dir / "prices.csv";
        const std::size_t j = detail::to_index(f[0], file, n), t = detail::to_index(f[1], file, n);
        if (j >= J || t >= T) throw DataError(detail::where(file, n) + "item or week out of range");
        const double v = detail::to_double(f[2], file, n);
        if (!(v > 0.0 && std::isfinite(v))) throw DataError(detail::where(file, n) + "price must be positive");
        p.prices.at(j, t) = v;
    });
    detail::read_csv(dir / "events.csv", {"consumer_id", "item_id", "week"}, [&](const auto& f, std::size_t n) {
        const fs::path file = dir / "events.csv";
        const demand::ChoiceEvent e{detail::to_index(f[0], file, n), detail::to_index(f[1], file, n),
                                    detail::to_index(f[2], file, n)};
        if (e.consumer >= I || e.item >= J || e.week >= T) throw DataError(detail::where(file, n) + "id out of range");
        if (!p.on_sale(e.item, e.week)) throw DataError(detail::where(file, n) + "purchase of an item with no price that week");
        p.events.push_back(e);
    });
    p.validate();
    return p;
}

// ---------------------------------------------------------------------------------------------
// Hedonic panel: article_id, month, log_price, quantity, [category,] feature columns.

inline void save_hedonic(const fs::path& file, const hedonic::HedonicPanel& p) {
    std::ofstream out = detail::open_out(file);
    out << "article_id,month,log_price,quantity";
    if (!p.category.empty()) out << ",category";
    for (std::size_t f = 0; f < p.features.cols(); ++f) out << ",f" << f;
    out << '\n';
    for (std::size_t r = 0; r < p.rows(); ++r) {
        out << p.article[r] << ',' << p.month[r] << ',' << detail::fmt(p.log_price[r]) << ',' << detail::fmt(p.quantity[r]);
        if (!p.category.empty()) out << ',' << p.category[r];
        for (double v : p.features.row(r)) out << ',' << detail::fmt(v);
        out << '\n';
    }
}

inline hedonic::HedonicPanel load_hedonic(const fs::path& file) {
    hedonic::HedonicPanel p;
    std::vector<std::string> header;
    std::vector<double> feats;
    bool has_category = false;
    std::size_t first_feature = 4;
    detail::read_csv(
        file, {"article_id", "month", "log_price", "quantity"},
        [&](const auto& f, std::size_t n) {
            if (p.rows() == 0 && feats.empty()) {
                has_category = header.size() > 4 && header[4] == "category";
                first_feature = has_category ? 5 : 4;
            }
            p.article.push_back(detail::to_int(f[0], file, n));
            p.month.push_back(static_cast<int>(detail::to_int(f[1], file, n)));
            p.log_price.push_back(detail::to_double(f[2], file, n));
            p.quantity.push_back(detail::to_double(f[3], file, n));
            if (!std::isfinite(p.log_price.back())) throw DataError(detail::where(file, n) + "log_price is missing");
            if (!(p.quantity.back() >= 0.0)) throw DataError(detail::where(file, n) + "quantity must be >= 0");
            if (has_category) p.category.push_back(detail::to_index(f[4], file, n));
            for (std::size_t k = first_feature; k < f.size(); ++k) {
                const double v = detail::to_double(f[k], file, n);
                if (!std::isfinite(v)) throw DataError(detail::where(file, n) + "feature '" + header[k] + "' is missing");
                feats.push_back(v);
            }
        },
        &header);
    const std::size_t F = header.size() - (header.size() > 4 && header[4] == "category" ? 5 : 4);
    p.features = Tensor(Shape{p.rows(), F}, std::move(feats));
    p.validate();
    return p;
}

// ---------------------------------------------------------------------------------------------
// Daily event panel: unit_id, date, count, dow, discount_flag, period_label, month.

inline void save_events(const fs::path& file, const eventstudy::EventPanel& p) {
    std::ofstream out = detail::open_out(file);
    out << "unit_id,date,count,dow,discount_flag,period_label,month\n";
    for (std::size_t u = 0; u < p.units.size(); ++u)
        for (std::size_t t = 0; t < p.days(); ++t)
            out << p.units[u] << ',' << (p.date.empty() ? std::to_string(t) : p.date[t]) << ',' << detail::fmt(p.counts[u][t])
                << ',' << p.dow[t] << ',' << p.discount[t] << ',' << p.period[t] << ',' << p.month[t] << '\n';
}

/// Units keep their order of first appearance; every unit must report the same calendar.
inline eventstudy::EventPanel load_events(const fs::path& file) {
    eventstudy::EventPanel p;
    std::map<std::string, std::size_t> unit_index;
    std::map<std::string, std::size_t> day_index;
    struct Day {
        int dow, discount, month;
        std::string period;
    };
    std::vector<Day> days;
    std::vector<std::vector<std::pair<std::size_t, double>>> obs;
    detail::read_csv(file, {"unit_id", "date", "count", "dow", "discount_flag", "period_label", "month"},
                     [&](const auto& f, std::size_t n) {
                         auto [uit, new_unit] = unit_index.try_emplace(f[0], p.units.size());
                         if (new_unit) {
                             p.units.push_back(f[0]);
                             obs.emplace_back();
                         }
                         const double c = detail::to_double(f[2], file, n);
                         if (!(c >= 0.0) || c != std::floor(c))
                             throw DataError(detail::where(file, n) + "count must be a non-negative integer");
                         const Day d{static_cast<int>(detail::to_int(f[3], file, n)),
                                     static_cast<int>(detail::to_int(f[4], file, n)),
                                     static_cast<int>(detail::to_int(f[6], file, n)), f[5]};
                         if (d.dow < 0 || d.dow > 6) throw DataError(detail::where(file, n) + "dow outside 0..6");
                         if (d.discount != 0 && d.discount != 1) throw DataError(detail::where(file, n) + "discount_flag must be 0 or 1");
                         if (d.month < 1 || d.month > 12) throw DataError(detail::where(file, n) + "month outside 1..12");
                         if (!d.period.empty() && std::find(p.periods.begin(), p.periods.end(), d.period) == p.periods.end())
                             throw DataError(detail::where(file, n) + "unknown period label '" + d.period + "'");
                         auto [dit, new_day] = day_index.try_emplace(f[1], days.size());
                         if (new_day) {
                             days.push_back(d);
                             p.date.push_back(f[1]);
                         } else {
                             const Day& o = days[dit->second];
                             if (o.dow != d.dow || o.discount != d.discount || o.month != d.month || o.period != d.period)
                                 throw DataError(detail::where(file, n) + "calendar fields for " + f[1] +
                                                 " disagree with an earlier row");
                         }
                         obs[uit->second].emplace_back(dit->second, c);
                     });
    for (const Day& d : days) {
        p.dow.push_back(d.dow);
        p.discount.push_back(d.discount);
        p.month.push_back(d.month);
        p.period.push_back(d.period);
    }
    for (std::size_t u = 0; u < p.units.size(); ++u) {
        std::vector<double> series(days.size(), NAN);
        for (const auto& [t, c] : obs[u]) {
            if (!std::isnan(series[t])) throw DataError(file.string() + ": unit " + p.units[u] + " repeats date " + p.date[t]);
            series[t] = c;
        }
        for (std::size_t t = 0; t < series.size(); ++t)
            if (std::isnan(series[t])) throw DataError(file.string() + ": unit " + p.units[u] + " has no row for " + p.date[t]);
        p.counts.push_back(std::move(series));
    }
    p.validate();
    return p;
}

// ---------------------------------------------------------------------------------------------
// Demand model: tagged binary with a version byte, and a JSON summary sidecar at <path>.json.

inline constexpr char kModelMagic[4] = {'D', 'D', 'M', 'D'};
inline constexpr std::uint8_t kModelVersion = 1;

struct StoredModel {
    demand::DemandModel model;
    std::vector<double> cf_residual;  // per item, as used during the fit
};

namespace detail {

/// Every parameter slot, including the ones inactive under the spec, in a fixed order.
inline std::vector<numcore::Parameter*> all_parameters(demand::DemandModel& m) {
    std::vector<numcore::Parameter*> out;
    for (auto& k : m.classes) {
        if (m.spec.alpha_network)
            for (auto* p : k.alpha_net.parameters()) out.push_back(p);
        out.push_back(&k.alpha_raw);
        if (m.spec.taste) {
            for (auto* p : k.r_net.parameters()) out.push_back(p);
            for (auto* p : k.t_net.parameters()) out.push_back(p);
        }
        out.push_back(&k.bias);
        out.push_back(&k.cf_loading);
    }
    out.push_back(&m.seasonal_basis);
    out.push_back(&m.month_codes);
    return out;
}

template <typename T>
void put(std::ostream& o, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    o.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& i, const fs::path& file) {
    T v{};
    if (!i.read(reinterpret_cast<char*>(&v), sizeof v)) throw DataError(file.string() + ": truncated model file");
    return v;
}

inline void put_vec(std::ostream& o, const std::vector<double>& v) {
    put<std::uint64_t>(o, v.size());
    for (double x : v) put(o, x);
}

inline std::vector<double> get_vec(std::istream& i, const fs::path& file) {
    const auto n = get<std::uint64_t>(i, file);
    if (n > (1ull << 32)) throw DataError(file.string() + ": implausible vector length");
    std::vector<double> v(n);
    for (double& x : v) x = get<double>(i, file);
    return v;
}

}  // namespace detail

inline nlohmann::ordered_json model_summary(const demand::DemandModel& m) {
    nlohmann::ordered_json j;
    j["format_version"] = kModelVersion;
    j["classes"] = m.spec.classes;
    j["user_dim"] = m.spec.user_dim;
    j["item_dim"] = m.spec.item_dim;
    j["hidden"] = m.spec.hidden;
    j["taste_rank"] = m.spec.taste_rank;
    j["season_rank"] = m.spec.season_rank;
    j["alpha_network"] = m.spec.alpha_network;
    j["taste"] = m.spec.taste;
    j["seasonal"] = m.spec.seasonal;
    j["control_function"] = m.spec.control_function;
    j["weights"] = m.weights;
    j["outside_utility"] = std::isfinite(m.outside_utility) ? nlohmann::ordered_json(m.outside_utility) : nlohmann::ordered_json("-inf");
    return j;
}

inline void save_model(const fs::path& file, const StoredModel& s, const nlohmann::ordered_json& extra = {}) {
    demand::DemandModel m = s.model;
    {
        std::ofstream out = detail::open_out(file, true);
        out.write(kModelMagic, 4);
        detail::put(out, kModelVersion);
        const auto& sp = m.spec;
        for (std::uint64_t v : {sp.classes, sp.user_dim, sp.item_dim, sp.hidden, sp.taste_rank, sp.season_rank})
            detail::put(out, v);
        for (bool b : {sp.alpha_network, sp.taste, sp.seasonal, sp.control_function}) detail::put<std::uint8_t>(out, b);
        detail::put_vec(out, m.weights);
        detail::put(out, m.outside_utility);
        detail::put_vec(out, s.cf_residual);
        const auto params = detail::all_parameters(m);
        detail::put<std::uint64_t>(out, params.size());
        for (const auto* p : params) {
            detail::put<std::uint64_t>(out, p->name.size());
            out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
            detail::put_vec(out, std::vector<double>(p->value.values().begin(), p->value.values().end()));
        }
        if (!out) throw DataError("save_model: write failed for " + file.string());
    }
    nlohmann::ordered_json j = model_summary(m);
    for (const auto& [k, v] : extra.items()) j[k] = v;
    std::ofstream side = detail::open_out(fs::path(file.string() + ".json"));
    side << j.dump(2) << '\n';
}

inline StoredModel load_model(const fs::path& file) {
    std::ifstream in = detail::open_in(file, true);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kModelMagic, 4) != 0) throw DataError(file.string() + ": not a model file");
    const auto version = detail::get<std::uint8_t>(in, file);
    if (version != kModelVersion)
        throw DataError(file.string() + ": unsupported model version " + std::to_string(version));
    demand::DemandSpec sp;
    std::size_t* dims[] = {&sp.classes, &sp.user_dim, &sp.item_dim, &sp.hidden, &sp.taste_rank, &sp.season_rank};
    for (std::size_t* d : dims) *d = static_cast<std::size_t>(detail::get<std::uint64_t>(in, file));
    bool* flags[] = {&sp.alpha_network, &sp.taste, &sp.seasonal, &sp.control_function};
    for (bool* b : flags) *b = detail::get<std::uint8_t>(in, file) != 0;
    Rng rng = make_rng(0, 0, 0);
    StoredModel s;
    s.model = demand::make_demand_model(sp, rng);
    s.model.weights = detail::get_vec(in, file);
    s.model.outside_utility = detail::get<double>(in, file);
    s.cf_residual = detail::get_vec(in, file);
    if (s.model.weights.size() != sp.classes) throw DataError(file.string() + ": class weight count does not match");
    auto params = detail::all_parameters(s.model);
    if (detail::get<std::uint64_t>(in, file) != params.size()) throw DataError(file.string() + ": parameter count does not match");
    for (auto* p : params) {
        const auto len = detail::get<std::uint64_t>(in, file);
        if (len > 4096) throw DataError(file.string() + ": implausible parameter name");
        std::string name(len, '\0');
        if (!in.read(name.data(), static_cast<std::streamsize>(len))) throw DataError(file.string() + ": truncated model file");
        if (name != p->name) throw DataError(file.string() + ": expected parameter " + p->name + ", found " + name);
        const auto v = detail::get_vec(in, file);
        if (v.size() != p->value.size()) throw DataError(file.string() + ": parameter " + name + " has the wrong size");
        std::copy(v.begin(), v.end(), p->value.values().begin());
    }
    if (in.peek() != std::char_traits<char>::eof()) throw DataError(file.string() + ": trailing bytes");
    return s;
}

// ---------------------------------------------------------------------------------------------
// Plain key=value configuration.

class Config {
public:
    Config() = default;

    static Config parse(std::istream& in, const std::string& source = "<config>") {
        Config c;
        std::string line;
        std::size_t n = 0;
        while (std::getline(in, line)) {
            ++n;
            const auto hash = line.find('#');
            const std::string body = detail::trim(hash == std::string::npos ? line : line.substr(0, hash));
            if (body.empty()) continue;
            const auto eq = body.find('=');
            if (eq == std::string::npos) throw DataError(source + ":" + std::to_string(n) + ": expected key=value");
            const std::string key = detail::trim(body.substr(0, eq));
            if (key.empty()) throw DataError(source + ":" + std::to_string(n) + ": empty key");
            if (!c.values_.emplace(key, detail::trim(body.substr(eq + 1))).second)
                throw DataError(source + ":" + std::to_string(n) + ": duplicate key " + key);
            c.lines_[key] = n;
        }
        c.source_ = source;
        return c;
    }

    static Config load(const fs::path& file) {
        std::ifstream in = detail::open_in(file);
        return parse(in, file.string());
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }
    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    std::string str(const std::string& key, const std::string& fallback) const {
        used_.insert(key);
        const auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double num(const std::string& key, double fallback) const {
        used_.insert(key);
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        return detail::to_double(it->second, source_, line_of(key));
    }

    std::size_t count(const std::string& key, std::size_t fallback) const {
        used_.insert(key);
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        return detail::to_index(it->second, source_, line_of(key));
    }

    bool flag(const std::string& key, bool fallback) const {
        const std::string v = str(key, fallback ? "true" : "false");
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw DataError(detail::where(source_, line_of(key)) + key + " must be true or false");
    }

    std::vector<double> list(const std::string& key, const std::vector<double>& fallback) const {
        used_.insert(key);
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::vector<double> out;
        for (const auto& f : detail::split(it->second)) out.push_back(detail::to_double(f, source_, line_of(key)));
        return out;
    }

    /// Keys present in the file that no accessor asked for.
    std::vector<std::string> unused() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : values_)
            if (!used_.count(k)) out.push_back(k);
        return out;
    }

    /// Canonical text (sorted key=value lines), the input to the manifest hash.
    std::string canonical() const {
        std::string s;
        for (const auto& [k, v] : values_) s += k + "=" + v + "\n";
        return s;
    }

private:
    std::size_t line_of(const std::string& key) const {
        const auto it = lines_.find(key);
        return it == lines_.end() ? 0 : it->second;
    }

    std::map<std::string, std::string> values_;
    std::map<std::string, std::size_t> lines_;
    mutable std::set<std::string> used_;
    std::string source_ = "<config>";
};

/// 64-bit FNV-1a, used to fingerprint configurations in run manifests.
inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// ---------------------------------------------------------------------------------------------
// Delimited report tables.

class Table {
public:
    explicit Table(std::vector<std::string> columns) : columns_(std::move(columns)) {}

    Table& row(std::vector<std::string> cells) {
        if (cells.size() != columns_.size())
            throw ContractError("table row has " + std::to_string(cells.size()) + " cells, expected " +
                                std::to_string(columns_.size()));
        rows_.push_back(std::move(cells));
        return *this;
    }

    std::size_t size() const { return rows_.size(); }

    std::string str() const {
        std::string s;
        for (std::size_t k = 0; k < columns_.size(); ++k) s += (k ? "," : "") + columns_[k];
        s += '\n';
        for (const auto& r : rows_) {
            for (std::size_t k = 0; k < r.size(); ++k) s += (k ? "," : "") + r[k];
            s += '\n';
        }
        return s;
    }

    void save(const fs::path& file) const {
        std::ofstream out = detail::open_out(file);
        out << str();
    }

private:
    std::vector<std::string> columns_;
    std::vector<std::vector<std::string>> rows_;
};

/// Fixed-precision cell text so report tables are stable across runs.
inline std::string cell(double v, int digits = 6) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    std::string s = buf;
    if (s[0] == '-' && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
    return s;
}

inline std::string cell(std::size_t v) { return std::to_string(v); }
inline std::string cell(int v) { return std::to_string(v); }
inline std::string cell(bool v) { return v ? "true" : "false"; }

}  // namespace deepdemand::io
