#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "lcrec/csv.hpp"
#include "lcrec/errors.hpp"
#include "lcrec/simcohort.hpp"

namespace lcrec {

/// r = 1 for previously at risk; k = episode number pooled at k_cap.
struct StratumLabel {
    int r = 0;
    int k = 1;

    friend bool operator==(const StratumLabel&, const StratumLabel&) = default;
    friend auto operator<=>(const StratumLabel&, const StratumLabel&) = default;
};

inline std::string to_string(const StratumLabel& s)
{
    return "r" + std::to_string(s.r) + ".k" + std::to_string(s.k);
}

/// Accepts "r<R>.k<K>" or a plain positive integer K (read as r = 0).
inline StratumLabel parse_stratum(const std::string& s)
{
    int r = 0, k = 0;
    char tail = 0;
    if (std::sscanf(s.c_str(), "r%d.k%d%c", &r, &k, &tail) == 2 && (r == 0 || r == 1) && k >= 1) return {r, k};
    if (std::sscanf(s.c_str(), "%d%c", &k, &tail) == 1 && k >= 1) return {0, k};
    throw DataError("invalid stratum label '" + s + "'");
}

enum class StrataMode {
    Interaction,  // (r, k): specific baseline per episode and subpopulation
    SubpopOnly,   // r only: common baseline within each subpopulation
};

enum class Layout { CountingProcess, GapTime };

struct RiskRow {
    int subject_id = 0;
    double start = 0.0;
    double stop = 0.0;
    int status = 0;
    StratumLabel stratum;
    Covariates x{};
};

/**
 * Stratum of each observed interval j = 1, 2, ... of a subject: k = min(imputed_prior + j, k_cap),
 * r = 1 iff the subject was at risk before t = 0. SubpopOnly mode sets k = 1 throughout.
 * Returns one label per event plus one for the trailing censored interval.
 */
inline std::vector<StratumLabel> assign_strata(const Subject& subject, int imputed_prior, int k_cap, StrataMode mode)
{
    if (imputed_prior < 0) throw DomainError("assign_strata: imputed prior count must be >= 0");
    if (k_cap < 1) throw DomainError("assign_strata: k_cap must be >= 1");
    if (!subject.previously_at_risk() && imputed_prior != 0)
        throw DomainError("assign_strata: subject " + std::to_string(subject.id) +
                          " was not previously at risk but has a non-zero imputed prior count");
    const int r = subject.previously_at_risk() ? 1 : 0;
    const std::size_t intervals = subject.observed_events.size() + 1;
    std::vector<StratumLabel> labels(intervals);
    for (std::size_t j = 0; j < intervals; ++j) {
        const int k = mode == StrataMode::Interaction
                          ? std::min(imputed_prior + static_cast<int>(j) + 1, k_cap)
                          : 1;
        labels[j] = {r, k};
    }
    return labels;
}

/// Labels for every subject of a cohort; `imputed_prior` may be empty (all zeros).
inline std::vector<std::vector<StratumLabel>> assign_strata(const Cohort& cohort, const std::vector<int>& imputed_prior,
                                                            int k_cap, StrataMode mode)
{
    if (!imputed_prior.empty() && imputed_prior.size() != cohort.subjects.size())
        throw DomainError("assign_strata: imputed count vector does not match the cohort size");
    std::vector<std::vector<StratumLabel>> out;
    out.reserve(cohort.subjects.size());
    for (std::size_t i = 0; i < cohort.subjects.size(); ++i)
        out.push_back(assign_strata(cohort.subjects[i], imputed_prior.empty() ? 0 : imputed_prior[i], k_cap, mode));
    return out;
}

namespace detail {

template <bool GapTime>
std::vector<RiskRow> layout(const Cohort& cohort, const std::vector<std::vector<StratumLabel>>& strata)
{
    if (strata.size() != cohort.subjects.size()) throw DomainError("layout: strata do not match the cohort size");
    std::vector<RiskRow> rows;
    rows.reserve(cohort.subjects.size() + cohort.total_events());
    for (std::size_t i = 0; i < cohort.subjects.size(); ++i) {
        const Subject& s = cohort.subjects[i];
        const auto& labels = strata[i];
        if (labels.size() < s.observed_events.size() + 1) throw DomainError("layout: too few stratum labels for subject");
        double prev = 0.0;
        std::size_t j = 0;
        for (; j < s.observed_events.size(); ++j) {
            const double t = s.observed_events[j];
            if (!(t > prev)) throw DataError("layout: event times of subject " + std::to_string(s.id) + " are not strictly increasing");
            rows.push_back({s.id, GapTime ? 0.0 : prev, GapTime ? t - prev : t, 1, labels[j], s.x});
            prev = t;
        }
        if (prev < s.censor_time_days)
            rows.push_back({s.id, GapTime ? 0.0 : prev, GapTime ? s.censor_time_days - prev : s.censor_time_days, 0,
                            labels[j], s.x});
    }
    return rows;
}

}  // namespace detail

/// Intervals (0, t1], (t1, t2], ..., (t_last, censor] on the follow-up time scale.
inline std::vector<RiskRow> layout_counting_process(const Cohort& cohort,
                                                    const std::vector<std::vector<StratumLabel>>& strata)
{
    return detail::layout<false>(cohort, strata);
}

/// Same intervals re-zeroed at the previous event: (0, t1], (0, t2 - t1], ...
inline std::vector<RiskRow> layout_gap_time(const Cohort& cohort, const std::vector<std::vector<StratumLabel>>& strata)
{
    return detail::layout<true>(cohort, strata);
}

inline std::vector<RiskRow> build_layout(const Cohort& cohort, const std::vector<int>& imputed_prior, int k_cap,
                                         StrataMode mode, Layout layout)
{
    const auto strata = assign_strata(cohort, imputed_prior, k_cap, mode);
    return layout == Layout::CountingProcess ? layout_counting_process(cohort, strata)
                                             : layout_gap_time(cohort, strata);
}

// ---------------------------------------------------------------------------
// CSV: id,start,stop,status,stratum,x1,x2,x3
// ---------------------------------------------------------------------------

inline constexpr std::string_view kRiskCsvHeader = "id,start,stop,status,stratum,x1,x2,x3";

inline void write_riskset_csv(std::ostream& out, const std::vector<RiskRow>& rows)
{
    out << kRiskCsvHeader << '\n';
    for (const auto& r : rows) {
        out << r.subject_id << ',' << csv::num(r.start) << ',' << csv::num(r.stop) << ',' << r.status << ','
            << to_string(r.stratum);
        for (double xj : r.x) out << ',' << csv::num(xj);
        out << '\n';
    }
}

/// Rows grouped by an optional `imputation` column (absent: a single group keyed 0).
struct RiskTable {
    std::map<int, std::vector<RiskRow>> by_imputation;
};

/**
 * Parses and validates an externally supplied risk-set table. Counting-process input
 * (`gap_time == false`) must not contain two events of one subject at the same time.
 */
inline RiskTable read_riskset_csv(const csv::Table& t, bool gap_time = false)
{
    const int c_id = t.require("id");
    const int c_start = t.require("start");
    const int c_stop = t.require("stop");
    const int c_status = t.require("status");
    const int c_stratum = t.require("stratum");
    const int c_x[3] = {t.require("x1"), t.require("x2"), t.require("x3")};
    const int c_imp = t.column("imputation");

    RiskTable out;
    std::map<std::pair<int, std::pair<int, int>>, std::vector<double>> event_times;  // (imp, (id, r)) -> stops
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const auto& cells = t.rows[i];
        const int line = t.line_numbers[i];
        const auto at = [&](int c) -> const std::string& { return cells[static_cast<std::size_t>(c)]; };
        RiskRow r;
        r.subject_id = static_cast<int>(csv::parse_int(at(c_id), line, "id"));
        r.start = csv::parse_double(at(c_start), line, "start");
        r.stop = csv::parse_double(at(c_stop), line, "stop");
        const auto status = csv::parse_int(at(c_status), line, "status");
        try {
            r.stratum = parse_stratum(at(c_stratum));
        } catch (const DataError& e) {
            throw DataError("schema error: line " + std::to_string(line) + ": " + e.what());
        }
        for (int j = 0; j < 3; ++j) r.x[static_cast<std::size_t>(j)] = csv::parse_double(at(c_x[j]), line, "x" + std::to_string(j + 1));
        const int imp = c_imp >= 0 ? static_cast<int>(csv::parse_int(at(c_imp), line, "imputation")) : 0;

        std::ostringstream err;
        if (status != 0 && status != 1) err << "status must be 0 or 1";
        else if (!(r.start >= 0.0)) err << "start must be >= 0";
        else if (!(r.stop > r.start)) err << "stop must exceed start";
        else if (gap_time && r.start != 0.0) err << "gap-time rows must start at 0";
        if (!err.str().empty()) throw DataError("schema error: line " + std::to_string(line) + ": " + err.str());
        r.status = static_cast<int>(status);
        if (r.status == 1 && !gap_time) event_times[{imp, {r.subject_id, r.stratum.r}}].push_back(r.stop);
        out.by_imputation[imp].push_back(r);
    }
    for (auto& [key, times] : event_times) {
        std::sort(times.begin(), times.end());
        if (std::adjacent_find(times.begin(), times.end()) != times.end())
            throw DataError("subject " + std::to_string(key.second.first) + " has two events at the same time");
    }
    if (out.by_imputation.empty()) throw DataError("data error: no rows");
    return out;
}

}  // namespace lcrec
