#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "lcrec/errors.hpp"
#include "lcrec/simcohort.hpp"

namespace lcrec {

/**
 * Scenario grid read from a key=value file:
 *
 *   [grid]
 *   population = 1, 2, 3
 *   n = 1000
 *   follow_up_years = 2, 5        # or follow_up_days
 *   max_prior_years = 10          # or max_prior_days
 *   prop_prior = 0.1, 0.3, 0.5, 1
 *
 *   [run]
 *   replicates = 200
 *   m_imputations = 5
 *   k_cap = 5
 *   seed = 1
 *   models = SHFMI.CP, SHFMI.GT, CHFM.strata
 *
 *   [population]                  # optional custom population, replaces `population`
 *   law1 = weibull 8.109 1
 *   law2 = lognormal 7.2 1.5
 *   law3 = loglogistic 6.6 0.9
 *   beta = 0.25, 0.5, 0.75
 *   covariate_prob = 0.5
 *   frailty_variance = 0
 *
 * Every grid key takes a comma-separated list; the grid is their Cartesian product.
 */
struct RunConfig {
    std::vector<PopulationSpec> populations{population(1)};
    std::vector<int> n{1000};
    std::vector<int> follow_up_days{5 * kDaysPerYear};
    std::vector<int> max_prior_days{10 * kDaysPerYear};
    std::vector<double> prop_prior{0.5};
    ScenarioConfig base;  // replicate/run settings shared by every cell

    /// All grid cells in the order population, follow-up, max prior, n, prop_prior.
    [[nodiscard]] std::vector<ScenarioConfig> cells() const
    {
        std::vector<ScenarioConfig> out;
        for (const auto& pop : populations)
            for (int fu : follow_up_days)
                for (int mp : max_prior_days)
                    for (int nn : n)
                        for (double pp : prop_prior) {
                            ScenarioConfig c = base;
                            c.population = pop;
                            c.follow_up_days = fu;
                            c.max_prior_days = mp;
                            c.n = nn;
                            c.prop_prior = pp;
                            out.push_back(c);
                        }
        return out;
    }
};

namespace detail {

inline std::string trim(std::string_view s)
{
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return std::string(s.substr(a, b - a));
}

inline std::string lower(std::string s)
{
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

class ConfigParser {
public:
    explicit ConfigParser(std::string source) : source_(std::move(source)) {}

    [[noreturn]] void fail(int line, const std::string& msg) const
    {
        throw ConfigError(source_ + ":" + std::to_string(line) + ": " + msg);
    }

    std::vector<std::string> items(const std::string& value, int line) const
    {
        std::vector<std::string> out;
        std::string cur;
        std::istringstream is(value);
        while (std::getline(is, cur, ',')) {
            cur = trim(cur);
            if (cur.empty()) fail(line, "empty list element");
            out.push_back(cur);
        }
        if (out.empty()) fail(line, "missing value");
        return out;
    }

    double real(const std::string& s, int line) const
    {
        double v = 0.0;
        const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) fail(line, "expected a number, got '" + s + "'");
        return v;
    }

    long long integer(const std::string& s, int line) const
    {
        long long v = 0;
        const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || p != s.data() + s.size()) fail(line, "expected an integer, got '" + s + "'");
        return v;
    }

    std::vector<double> reals(const std::string& v, int line) const
    {
        std::vector<double> out;
        for (const auto& s : items(v, line)) out.push_back(real(s, line));
        return out;
    }

    std::vector<int> ints(const std::string& v, int line) const
    {
        std::vector<int> out;
        for (const auto& s : items(v, line)) {
            const auto x = integer(s, line);
            if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) fail(line, "integer out of range");
            out.push_back(static_cast<int>(x));
        }
        return out;
    }

    int single_int(const std::string& v, int line) const
    {
        const auto xs = ints(v, line);
        if (xs.size() != 1) fail(line, "expected a single value");
        return xs.front();
    }

    // years may be fractional; converted with 365-day years
    std::vector<int> durations(const std::string& v, int line, bool years) const
    {
        std::vector<int> out;
        for (double x : reals(v, line)) {
            const double days = years ? x * kDaysPerYear : x;
            if (days != std::round(days)) fail(line, "duration must be a whole number of days");
            out.push_back(static_cast<int>(days));
        }
        return out;
    }

    EpisodeLaw law(const std::string& v, int line) const
    {
        std::istringstream is(v);
        std::string family;
        double b0 = 0.0, a = 0.0;
        std::string b0s, as, extra;
        if (!(is >> family >> b0s >> as) || (is >> extra)) fail(line, "episode law must be '<family> <beta0> <ancillary>'");
        b0 = real(b0s, line);
        a = real(as, line);
        const auto f = lower(family);
        EpisodeLaw l;
        if (f == "weibull") l.family = Family::Weibull;
        else if (f == "lognormal" || f == "log-normal") l.family = Family::LogNormal;
        else if (f == "loglogistic" || f == "log-logistic") l.family = Family::LogLogistic;
        else fail(line, "unknown family '" + family + "'");
        l.beta0 = b0;
        l.ancillary = a;
        try {
            validate(l);
        } catch (const Error& e) {
            fail(line, e.what());
        }
        return l;
    }

private:
    std::string source_;
};

}  // namespace detail

inline RunConfig parse_config(std::istream& in, const std::string& source = "config")
{
    const detail::ConfigParser p(source);
    RunConfig cfg;
    std::string section;
    std::set<std::string> seen;
    std::optional<PopulationSpec> custom;
    bool population_listed = false;
    std::map<std::string, int> key_line;
    std::string raw;
    int line = 0;

    while (std::getline(in, raw)) {
        ++line;
        if (const auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
        const std::string text = detail::trim(raw);
        if (text.empty()) continue;
        if (text.front() == '[') {
            if (text.back() != ']') p.fail(line, "malformed section header");
            section = detail::lower(detail::trim(text.substr(1, text.size() - 2)));
            if (section != "grid" && section != "run" && section != "population")
                p.fail(line, "unknown section [" + section + "]");
            if (section == "population" && !custom) custom = PopulationSpec{};
            continue;
        }
        const auto eq = text.find('=');
        if (eq == std::string::npos) p.fail(line, "expected key = value");
        const std::string key = detail::lower(detail::trim(text.substr(0, eq)));
        const std::string value = detail::trim(text.substr(eq + 1));
        if (section.empty()) p.fail(line, "key '" + key + "' outside of a section");
        if (value.empty()) p.fail(line, "missing value for '" + key + "'");
        if (!seen.insert(section + "." + key).second) p.fail(line, "duplicate key '" + key + "'");
        key_line[section + "." + key] = line;

        if (section == "grid") {
            if (key == "population") {
                cfg.populations.clear();
                for (int id : p.ints(value, line)) {
                    try {
                        cfg.populations.push_back(population(id));
                    } catch (const ConfigError& e) {
                        p.fail(line, e.what());
                    }
                }
                population_listed = true;
            } else if (key == "n") {
                cfg.n = p.ints(value, line);
            } else if (key == "follow_up_days" || key == "follow_up_years") {
                if (seen.count("grid.follow_up_days") && seen.count("grid.follow_up_years"))
                    p.fail(line, "give follow-up in days or years, not both");
                cfg.follow_up_days = p.durations(value, line, key == "follow_up_years");
            } else if (key == "max_prior_days" || key == "max_prior_years") {
                if (seen.count("grid.max_prior_days") && seen.count("grid.max_prior_years"))
                    p.fail(line, "give max prior time in days or years, not both");
                cfg.max_prior_days = p.durations(value, line, key == "max_prior_years");
            } else if (key == "prop_prior") {
                cfg.prop_prior = p.reals(value, line);
            } else {
                p.fail(line, "unknown key '" + key + "' in [grid]");
            }
        } else if (section == "run") {
            if (key == "replicates") cfg.base.replicates = p.single_int(value, line);
            else if (key == "m_imputations") cfg.base.m_imputations = p.single_int(value, line);
            else if (key == "k_cap") cfg.base.k_cap = p.single_int(value, line);
            else if (key == "seed") {
                const auto items = p.items(value, line);
                if (items.size() != 1) p.fail(line, "expected a single value");
                std::uint64_t s = 0;
                const auto& t = items.front();
                const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), s);
                if (ec != std::errc() || ptr != t.data() + t.size()) p.fail(line, "seed must be a non-negative 64-bit integer");
                cfg.base.seed = s;
            } else if (key == "models") {
                cfg.base.models.clear();
                if (detail::lower(value) != "none") {
                    for (const auto& m : p.items(value, line)) {
                        try {
                            const Model model = parse_model(m);
                            if (std::find(cfg.base.models.begin(), cfg.base.models.end(), model) != cfg.base.models.end())
                                p.fail(line, "model '" + m + "' listed twice");
                            cfg.base.models.push_back(model);
                        } catch (const ConfigError& e) {
                            p.fail(line, e.what());
                        }
                    }
                }
            } else {
                p.fail(line, "unknown key '" + key + "' in [run]");
            }
        } else {  // population
            if (key == "law1" || key == "law2" || key == "law3")
                custom->episode_laws[static_cast<std::size_t>(key[3] - '1')] = p.law(value, line);
            else if (key == "beta") {
                const auto b = p.reals(value, line);
                if (b.size() != kNumCovariates) p.fail(line, "beta needs exactly 3 values");
                std::copy(b.begin(), b.end(), custom->beta.begin());
            } else if (key == "covariate_prob") {
                custom->covariate_prob = p.real(value, line);
            } else if (key == "frailty_variance") {
                custom->frailty_variance = p.real(value, line);
            } else {
                p.fail(line, "unknown key '" + key + "' in [population]");
            }
        }
    }

    if (custom) {
        if (population_listed) p.fail(key_line["grid.population"], "[population] section conflicts with grid.population");
        for (const char* k : {"population.law1", "population.law2", "population.law3"})
            if (!seen.count(k)) p.fail(line, std::string("[population] is missing ") + (k + 11));
        custom->id = 0;
        cfg.populations = {*custom};
    }

    // validate every cell, reporting the line of the offending key where possible
    const auto check = [&](const std::string& key, auto&& fn) {
        try {
            fn();
        } catch (const ConfigError& e) {
            const auto it = key_line.find(key);
            if (it != key_line.end()) p.fail(it->second, e.what());
            throw ConfigError(source + ": " + e.what());
        }
    };
    check("run.models", [&] {
        if (cfg.base.models.empty()) throw ConfigError("model list is empty");
    });
    for (const auto& c : cfg.cells()) {
        check("grid.n", [&] { if (c.n < 1) throw ConfigError("n must be >= 1"); });
        check(seen.count("grid.follow_up_years") ? "grid.follow_up_years" : "grid.follow_up_days",
              [&] { if (c.follow_up_days < 1) throw ConfigError("follow_up_days must be >= 1"); });
        check(seen.count("grid.max_prior_years") ? "grid.max_prior_years" : "grid.max_prior_days",
              [&] { if (c.max_prior_days < 0) throw ConfigError("max_prior_days must be >= 0"); });
        check("grid.prop_prior", [&] {
            if (!(c.prop_prior >= 0.0 && c.prop_prior <= 1.0)) throw ConfigError("prop_prior must lie in [0, 1]");
        });
        check("population.frailty_variance", [&] { validate(c.population); });
        check("run.replicates", [&] { if (c.replicates < 1) throw ConfigError("replicates must be >= 1"); });
        check("run.m_imputations", [&] { if (c.m_imputations < 2) throw ConfigError("m_imputations must be >= 2"); });
        check("run.k_cap", [&] { if (c.k_cap < 2) throw ConfigError("k_cap must be >= 2"); });
        validate(c);
    }
    return cfg;
}

inline RunConfig parse_config_string(const std::string& text, const std::string& source = "config")
{
    std::istringstream in(text);
    return parse_config(in, source);
}

inline RunConfig load_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    return parse_config(in, path.string());
}

}  // namespace lcrec
