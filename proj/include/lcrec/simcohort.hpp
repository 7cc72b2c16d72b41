#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "lcrec/csv.hpp"
#include "lcrec/distributions.hpp"
#include "lcrec/errors.hpp"
#include "lcrec/rng.hpp"

namespace lcrec {

inline constexpr int kNumCovariates = 3;
using Covariates = std::array<double, kNumCovariates>;

inline constexpr int kDaysPerYear = 365;

// ---------------------------------------------------------------------------
// Populations
// ---------------------------------------------------------------------------

/// Episode laws for k = 1, k = 2 and k >= 3, true effects and covariate law.
struct PopulationSpec {
    int id = 0;  // 1..6 for the built-in populations, 0 for custom
    std::array<EpisodeLaw, 3> episode_laws{};
    Covariates beta{0.25, 0.5, 0.75};
    double covariate_prob = 0.5;
    double frailty_variance = 0.0;  // log-normal, mean 1

    [[nodiscard]] const EpisodeLaw& law_for_episode(int k) const
    {
        return episode_laws[static_cast<std::size_t>(std::clamp(k, 1, 3) - 1)];
    }
};

inline void validate(const PopulationSpec& spec)
{
    for (const auto& law : spec.episode_laws) validate(law);
    for (double b : spec.beta)
        if (!std::isfinite(b)) throw ConfigError("population: beta must be finite");
    if (!(spec.covariate_prob >= 0.0 && spec.covariate_prob <= 1.0))
        throw ConfigError("population: covariate_prob must lie in [0, 1]");
    if (!(spec.frailty_variance >= 0.0) || !std::isfinite(spec.frailty_variance))
        throw ConfigError("population: frailty_variance must be >= 0");
}

/// The six simulated sick-leave populations (Weibull / log-normal / log-logistic episode laws).
inline PopulationSpec population(int id)
{
    using F = Family;
    PopulationSpec p;
    p.id = id;
    switch (id) {
        case 1: p.episode_laws = {{{F::Weibull, 8.109, 1}, {F::Weibull, 7.927, 1}, {F::Weibull, 7.745, 1}}}; break;
        case 2: p.episode_laws = {{{F::Weibull, 8.109, 1}, {F::Weibull, 7.703, 1}, {F::Weibull, 7.298, 1}}}; break;
        case 3: p.episode_laws = {{{F::Weibull, 8.109, 1}, {F::Weibull, 7.193, 1}, {F::Weibull, 6.276, 1}}}; break;
        case 4:
            p.episode_laws = {{{F::LogNormal, 7.195, 1.498}, {F::LogLogistic, 6.583, 0.924}, {F::Weibull, 6.678, 0.923}}};
            break;
        case 5:
            p.episode_laws = {{{F::LogLogistic, 7.974, 0.836}, {F::Weibull, 7.109, 0.758}, {F::LogNormal, 5.853, 1.989}}};
            break;
        case 6:
            p.episode_laws = {{{F::LogNormal, 8.924, 1.545}, {F::LogNormal, 6.650, 2.399}, {F::LogNormal, 6.696, 2.246}}};
            break;
        default: {
            std::ostringstream os;
            os << "unknown population id " << id << " (expected 1-6)";
            throw ConfigError(os.str());
        }
    }
    return p;
}

/**
 * Baseline hazard ratio of episode k relative to episode 1. Exact for constant-hazard
 * (a = 1 Weibull) laws; otherwise the ratio of hazards at the median of the episode-1
 * law, which is descriptive only.
 */
inline double episode_hazard_ratio(const PopulationSpec& spec, int k)
{
    if (k < 1 || k > 3) throw DomainError("episode_hazard_ratio: k must lie in [1, 3]");
    if (k == 1) return 1.0;
    const auto& l1 = spec.episode_laws[0];
    const auto& lk = spec.episode_laws[static_cast<std::size_t>(k - 1)];
    const auto constant = [](const EpisodeLaw& l) { return l.family == Family::Weibull && l.ancillary == 1.0; };
    if (constant(l1) && constant(lk)) return std::exp(l1.beta0 - lk.beta0);
    const double t_med = inv_surv_baseline(l1, 0.5);
    return hazard_baseline(lk, t_med) / hazard_baseline(l1, t_med);
}

// ---------------------------------------------------------------------------
// Scenario configuration
// ---------------------------------------------------------------------------

enum class Model { ShfmiCp, ShfmiGt, ChfmStrata };

inline std::string_view to_string(Model m) noexcept
{
    switch (m) {
        case Model::ShfmiCp: return "SHFMI.CP";
        case Model::ShfmiGt: return "SHFMI.GT";
        case Model::ChfmStrata: return "CHFM.strata";
    }
    return "?";
}

inline Model parse_model(std::string_view s)
{
    if (s == "SHFMI.CP") return Model::ShfmiCp;
    if (s == "SHFMI.GT") return Model::ShfmiGt;
    if (s == "CHFM.strata") return Model::ChfmStrata;
    throw ConfigError("unknown model '" + std::string(s) + "' (expected SHFMI.CP, SHFMI.GT or CHFM.strata)");
}

struct ScenarioConfig {
    PopulationSpec population = lcrec::population(1);
    int n = 1000;
    int follow_up_days = 5 * kDaysPerYear;
    int max_prior_days = 10 * kDaysPerYear;
    double prop_prior = 0.5;
    int replicates = 200;
    int m_imputations = 5;
    int k_cap = 5;
    std::uint64_t seed = 1;
    std::vector<Model> models{Model::ShfmiCp, Model::ShfmiGt, Model::ChfmStrata};
};

inline void validate(const ScenarioConfig& c)
{
    validate(c.population);
    if (c.n < 1) throw ConfigError("n must be >= 1");
    if (c.follow_up_days < 1) throw ConfigError("follow_up_days must be >= 1");
    if (c.max_prior_days < 0) throw ConfigError("max_prior_days must be >= 0");
    if (!(c.prop_prior >= 0.0 && c.prop_prior <= 1.0)) throw ConfigError("prop_prior must lie in [0, 1]");
    if (c.replicates < 1) throw ConfigError("replicates must be >= 1");
    if (c.m_imputations < 2) throw ConfigError("m_imputations must be >= 2");
    if (c.k_cap < 2) throw ConfigError("k_cap must be >= 2");
    if (c.models.empty()) throw ConfigError("model list is empty");
}

/// Number of previously-at-risk subjects in a cohort of size n.
inline int prior_risk_count(int n, double prop_prior)
{
    return static_cast<int>(std::lround(static_cast<double>(n) * prop_prior));
}

// ---------------------------------------------------------------------------
// Cohorts
// ---------------------------------------------------------------------------

struct Subject {
    int id = 0;
    Covariates x{};
    double entry_time_days = 0.0;  // risk onset relative to cohort start, <= 0
    double prior_risk_days = 0.0;  // = -entry_time_days
    int true_prior_count = 0;      // hidden from the estimators
    std::vector<double> observed_events;
    double censor_time_days = 0.0;
    double frailty = 1.0;

    [[nodiscard]] bool previously_at_risk() const noexcept { return prior_risk_days > 0.0; }
};

struct Cohort {
    std::vector<Subject> subjects;
    ScenarioConfig config;
    int replicate_index = 0;

    [[nodiscard]] std::size_t total_events() const noexcept
    {
        std::size_t n = 0;
        for (const auto& s : subjects) n += s.observed_events.size();
        return n;
    }
};

// Stream tags for keyed RNG paths.
namespace rng_tag {
inline constexpr std::uint64_t membership = 0x4D454D42;
inline constexpr std::uint64_t subject = 0x5355424A;
inline constexpr std::uint64_t imputation = 0x494D5054;
}  // namespace rng_tag

/**
 * Simulates the full history of every subject from risk onset and hides everything
 * before t = 0. Prior-risk subjects start at Uniform(-max_prior_days, 0); episodes
 * are drawn sequentially as gap times with law min(k, 3); events at t <= 0 only
 * increment the hidden prior count; follow-up is censored at follow_up_days.
 */
inline Cohort generate_cohort(const ScenarioConfig& config, int replicate)
{
    validate(config);
    if (replicate < 0) throw ConfigError("replicate must be >= 0");
    const auto& pop = config.population;
    const auto rep = static_cast<std::uint64_t>(replicate);

    Cohort cohort;
    cohort.config = config;
    cohort.replicate_index = replicate;
    cohort.subjects.resize(static_cast<std::size_t>(config.n));

    // exactly round(n * prop) previously-at-risk slots, shuffled
    std::vector<char> prior(static_cast<std::size_t>(config.n), 0);
    std::fill_n(prior.begin(), prior_risk_count(config.n, config.prop_prior), 1);
    {
        Rng rng{config.seed, rep, rng_tag::membership};
        for (std::size_t i = prior.size(); i > 1; --i) std::swap(prior[i - 1], prior[rng.below(i)]);
    }

    const double follow = config.follow_up_days;
    double frailty_sigma = 0.0;
    if (pop.frailty_variance > 0.0) frailty_sigma = std::sqrt(std::log1p(pop.frailty_variance));

    for (std::size_t i = 0; i < cohort.subjects.size(); ++i) {
        Rng rng{config.seed, rep, rng_tag::subject, static_cast<std::uint64_t>(i)};
        Subject& s = cohort.subjects[i];
        s.id = static_cast<int>(i) + 1;
        for (auto& xj : s.x) xj = rng.bernoulli(pop.covariate_prob) ? 1.0 : 0.0;
        if (frailty_sigma > 0.0) s.frailty = std::exp(frailty_sigma * rng.normal() - 0.5 * frailty_sigma * frailty_sigma);
        if (prior[i] && config.max_prior_days > 0) s.entry_time_days = -rng.uniform(0.0, config.max_prior_days);
        s.prior_risk_days = -s.entry_time_days;
        if (s.entry_time_days == 0.0) s.entry_time_days = 0.0;  // normalise -0
        s.censor_time_days = follow;

        double linpred = std::log(s.frailty);
        for (int j = 0; j < kNumCovariates; ++j) linpred += s.x[static_cast<std::size_t>(j)] * pop.beta[static_cast<std::size_t>(j)];

        double t = s.entry_time_days;
        for (int k = 1;; ++k) {
            t += draw_event_time(pop.law_for_episode(k), linpred, rng);
            if (t > follow) break;
            if (t <= 0.0)
                ++s.true_prior_count;
            else
                s.observed_events.push_back(t);
        }
    }
    return cohort;
}

/// Response and predictors of the imputation model for one subject.
struct ObservedCount {
    int count = 0;
    double exposure_days = 0.0;
    double prior_risk_days = 0.0;
    Covariates x{};
};

inline std::vector<ObservedCount> observed_counts(const Cohort& cohort)
{
    std::vector<ObservedCount> out;
    out.reserve(cohort.subjects.size());
    for (const auto& s : cohort.subjects)
        out.push_back({static_cast<int>(s.observed_events.size()), s.censor_time_days, s.prior_risk_days, s.x});
    return out;
}

inline constexpr std::string_view kCohortCsvHeader =
    "subject_id,episode_obs,start,stop,status,x1,x2,x3,prior_risk_days,true_prior_count";

/// One row per observed event plus a trailing censoring record when follow-up continues past the last event.
inline void write_cohort_csv(std::ostream& out, const Cohort& cohort)
{
    out << kCohortCsvHeader << '\n';
    for (const auto& s : cohort.subjects) {
        const auto row = [&](int episode, double start, double stop, int status) {
            out << s.id << ',' << episode << ',' << csv::num(start) << ',' << csv::num(stop) << ',' << status;
            for (double xj : s.x) out << ',' << csv::num(xj);
            out << ',' << csv::num(s.prior_risk_days) << ',' << s.true_prior_count << '\n';
        };
        double start = 0.0;
        int episode = 1;
        for (double t : s.observed_events) {
            row(episode++, start, t, 1);
            start = t;
        }
        if (start < s.censor_time_days) row(episode, start, s.censor_time_days, 0);
    }
}

}  // namespace lcrec
