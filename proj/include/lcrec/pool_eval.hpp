#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/students_t.hpp>

#include "lcrec/coxfrailty.hpp"
#include "lcrec/csv.hpp"
#include "lcrec/impute.hpp"
#include "lcrec/riskset.hpp"
#include "lcrec/simcohort.hpp"

namespace lcrec {

// ---------------------------------------------------------------------------
// Rubin's rules
// ---------------------------------------------------------------------------

struct PooledFit {
    int m = 0;
    Eigen::VectorXd qbar;
    Eigen::VectorXd within;   // W
    Eigen::VectorXd between;  // B
    Eigen::VectorXd total;    // T = W + (1 + 1/m) B
    Eigen::VectorXd df;       // +inf when B = 0
    Eigen::VectorXd ci_low;
    Eigen::VectorXd ci_high;
};

/// Two-sided 95% critical value: Student t with `df` degrees of freedom, normal for infinite df.
inline double critical_value_95(double df)
{
    if (!std::isfinite(df)) return normal_quantile(0.975);
    return boost::math::quantile(boost::math::students_t(df), 0.975);
}

/// Pools point estimates and squared standard errors of m completed-data analyses.
inline PooledFit pool_rubin(const std::vector<Eigen::VectorXd>& estimates, const std::vector<Eigen::VectorXd>& variances)
{
    const auto m = static_cast<int>(estimates.size());
    if (m < 2) throw PoolingError("Rubin pooling needs at least 2 imputations");
    if (variances.size() != estimates.size()) throw PoolingError("estimate and variance lists differ in length");
    const auto p = estimates.front().size();
    for (int l = 0; l < m; ++l)
        if (estimates[static_cast<std::size_t>(l)].size() != p || variances[static_cast<std::size_t>(l)].size() != p)
            throw PoolingError("fits do not share the same coefficient set");

    PooledFit out;
    out.m = m;
    // mean as an offset from the first estimate, so identical estimates pool exactly
    const Eigen::VectorXd& first = estimates.front();
    Eigen::VectorXd offset = Eigen::VectorXd::Zero(p);
    out.within = Eigen::VectorXd::Zero(p);
    out.between = Eigen::VectorXd::Zero(p);
    for (int l = 0; l < m; ++l) {
        offset += estimates[static_cast<std::size_t>(l)] - first;
        out.within += variances[static_cast<std::size_t>(l)];
    }
    out.qbar = first + offset / m;
    out.within /= m;
    for (int l = 0; l < m; ++l) out.between += (estimates[static_cast<std::size_t>(l)] - out.qbar).array().square().matrix();
    out.between /= (m - 1);
    const double inflation = 1.0 + 1.0 / m;
    out.total = out.within + inflation * out.between;
    out.df.resize(p);
    out.ci_low.resize(p);
    out.ci_high.resize(p);
    for (Eigen::Index j = 0; j < p; ++j) {
        const double b = out.between[j];
        if (b > 0.0) {
            const double r = 1.0 + out.within[j] / (inflation * b);
            out.df[j] = (m - 1) * r * r;
        } else {
            out.df[j] = std::numeric_limits<double>::infinity();
        }
        const double half = critical_value_95(out.df[j]) * std::sqrt(out.total[j]);
        out.ci_low[j] = out.qbar[j] - half;
        out.ci_high[j] = out.qbar[j] + half;
    }
    return out;
}

inline PooledFit pool_rubin(const std::vector<CoxFit>& fits)
{
    std::vector<int> failed;
    for (std::size_t l = 0; l < fits.size(); ++l)
        if (!fits[l].converged) failed.push_back(static_cast<int>(l) + 1);
    if (!failed.empty()) {
        std::ostringstream os;
        os << "cannot pool: imputation(s)";
        for (int f : failed) os << ' ' << f;
        os << " did not converge";
        throw PoolingError(os.str());
    }
    std::vector<Eigen::VectorXd> est, var;
    for (const auto& f : fits) {
        est.push_back(f.beta);
        var.push_back(f.se.array().square().matrix());
    }
    return pool_rubin(est, var);
}

/// Complete-data fit in pooled form (m = 1, B = 0, normal-theory interval).
inline PooledFit single_fit_interval(const CoxFit& fit)
{
    PooledFit out;
    out.m = 1;
    const auto p = fit.beta.size();
    out.qbar = fit.beta;
    out.within = fit.se.array().square().matrix();
    out.between = Eigen::VectorXd::Zero(p);
    out.total = out.within;
    out.df = Eigen::VectorXd::Constant(p, std::numeric_limits<double>::infinity());
    const double z = normal_quantile(0.975);
    out.ci_low = out.qbar - z * fit.se;
    out.ci_high = out.qbar + z * fit.se;
    return out;
}

// ---------------------------------------------------------------------------
// One replicate of the simulation pipeline
// ---------------------------------------------------------------------------

struct ModelOutcome {
    Model model = Model::ShfmiCp;
    std::optional<PooledFit> pooled;
    std::vector<CoxFit> fits;  // one per imputation (a single fit for CHFM.strata)
    std::string error;         // non-empty when the model failed in this replicate
};

struct ReplicateResult {
    int replicate = 0;
    std::vector<ModelOutcome> models;  // in config.models order
    int imputation_cap_hits = 0;

    [[nodiscard]] const ModelOutcome* find(Model m) const
    {
        for (const auto& o : models)
            if (o.model == m) return &o;
        return nullptr;
    }
};

/**
 * Simulate, impute and fit one replicate.
 *   SHFMI.CP     (r, k) strata, counting-process rows, one fit per imputation, pooled
 *   SHFMI.GT     (r, k) strata, gap-time rows, one fit per imputation, pooled
 *   CHFM.strata  r strata, counting-process rows, a single fit on the observed data
 * Failures are recorded per model and never abort the other models.
 */
inline ReplicateResult run_replicate(const ScenarioConfig& config, int replicate, const CoxOptions& cox = {})
{
    const Cohort cohort = generate_cohort(config, replicate);
    const int n = static_cast<int>(cohort.subjects.size());
    ReplicateResult result;
    result.replicate = replicate;

    std::optional<MultipleImputation> mi;
    std::string impute_error;
    const bool need_imputation = std::any_of(config.models.begin(), config.models.end(),
                                             [](Model m) { return m != Model::ChfmStrata; });
    if (need_imputation) {
        try {
            mi = multiple_impute(cohort, config.m_imputations,
                                 Rng{config.seed, static_cast<std::uint64_t>(replicate), rng_tag::imputation});
            result.imputation_cap_hits = mi->cap_hits();
        } catch (const Error& e) {
            impute_error = std::string("imputation failed: ") + e.what();
        }
    }

    for (Model model : config.models) {
        ModelOutcome out;
        out.model = model;
        try {
            if (model == Model::ChfmStrata) {
                const auto rows = build_layout(cohort, {}, config.k_cap, StrataMode::SubpopOnly, Layout::CountingProcess);
                out.fits.push_back(fit_cox_frailty(rows, n, cox));
                out.pooled = single_fit_interval(out.fits.back());
            } else {
                if (!mi) throw Error(impute_error);
                const Layout layout = model == Model::ShfmiCp ? Layout::CountingProcess : Layout::GapTime;
                for (const auto& imp : mi->imputations) {
                    // identical completed data sets give identical fits
                    const CoxFit* same = nullptr;
                    for (std::size_t l = 0; l + 1 <= out.fits.size(); ++l)
                        if (mi->imputations[l].imputed_prior == imp.imputed_prior) same = &out.fits[l];
                    if (same) {
                        out.fits.push_back(*same);
                        continue;
                    }
                    const auto rows = build_layout(cohort, imp.imputed_prior, config.k_cap, StrataMode::Interaction, layout);
                    out.fits.push_back(fit_cox_frailty(rows, n, cox));
                }
                out.pooled = pool_rubin(out.fits);
            }
        } catch (const Error& e) {
            out.error = e.what();
            out.pooled.reset();
        }
        result.models.push_back(std::move(out));
    }
    return result;
}

/**
 * Runs replicates 0..R-1 on `threads` workers. Results are stored by replicate index,
 * so the output does not depend on scheduling.
 */
inline std::vector<ReplicateResult> run_replicates(const ScenarioConfig& config, int threads,
                                                   const CoxOptions& cox = {},
                                                   const std::function<void(int)>& on_done = {})
{
    validate(config);
    const int R = config.replicates;
    std::vector<ReplicateResult> results(static_cast<std::size_t>(R));
    std::atomic<int> next{0};
    std::atomic<int> done{0};
    std::mutex report;
    const auto worker = [&] {
        for (int r = next++; r < R; r = next++) {
            results[static_cast<std::size_t>(r)] = run_replicate(config, r, cox);
            const int d = ++done;
            if (on_done) {
                std::lock_guard lock(report);
                on_done(d);
            }
        }
    };
    threads = std::clamp(threads, 1, R);
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    }
    return results;
}

// ---------------------------------------------------------------------------
// Monte Carlo summaries
// ---------------------------------------------------------------------------

struct CoefficientSummary {
    double truth = 0.0;
    double mean_estimate = 0.0;
    double empirical_sd = 0.0;
    double mc_se = 0.0;         // empirical_sd / sqrt(R)
    double relative_bias = 0.0; // percent
    double coverage = 0.0;      // percent
    double avg_ci_length = 0.0;
};

struct ModelSummary {
    Model model = Model::ShfmiCp;
    int replicates = 0;  // successful
    int failures = 0;
    bool unreliable = false;  // more than 5% failed
    std::vector<CoefficientSummary> coefficients;
};

struct ScenarioSummary {
    std::vector<ModelSummary> models;

    [[nodiscard]] ModelSummary* find(Model m)
    {
        for (auto& s : models)
            if (s.model == m) return &s;
        return nullptr;
    }

    [[nodiscard]] const ModelSummary* find(Model m) const
    {
        for (const auto& s : models)
            if (s.model == m) return &s;
        return nullptr;
    }
};

namespace detail {

// Neumaier-compensated running sum.
struct CompensatedSum {
    double sum = 0.0, c = 0.0;
    void add(double v)
    {
        const double t = sum + v;
        if (std::abs(sum) >= std::abs(v))
            c += (sum - t) + v;
        else
            c += (v - t) + sum;
        sum = t;
    }
    [[nodiscard]] double value() const { return sum + c; }
};

}  // namespace detail

/// Relative bias (%), coverage (%) and average CI length over a set of pooled fits.
inline CoefficientSummary summarize_coefficient(const std::vector<double>& estimates, const std::vector<double>& ci_low,
                                                const std::vector<double>& ci_high, double truth)
{
    CoefficientSummary s;
    s.truth = truth;
    const auto R = estimates.size();
    if (R == 0) return s;
    detail::CompensatedSum est, len;
    std::size_t covered = 0;
    for (std::size_t r = 0; r < R; ++r) {
        est.add(estimates[r]);
        len.add(ci_high[r] - ci_low[r]);
        if (ci_low[r] <= truth && truth <= ci_high[r]) ++covered;
    }
    s.mean_estimate = est.value() / static_cast<double>(R);
    detail::CompensatedSum ss;
    for (double e : estimates) ss.add((e - s.mean_estimate) * (e - s.mean_estimate));
    s.empirical_sd = R > 1 ? std::sqrt(ss.value() / static_cast<double>(R - 1)) : 0.0;
    s.mc_se = s.empirical_sd / std::sqrt(static_cast<double>(R));
    s.relative_bias = 100.0 * (s.mean_estimate - truth) / truth;
    s.coverage = 100.0 * static_cast<double>(covered) / static_cast<double>(R);
    s.avg_ci_length = len.value() / static_cast<double>(R);
    return s;
}

inline ScenarioSummary summarize(const std::vector<ReplicateResult>& results, const Covariates& truth,
                                 const std::vector<Model>& models)
{
    ScenarioSummary summary;
    for (Model model : models) {
        ModelSummary ms;
        ms.model = model;
        std::vector<std::vector<double>> est(kNumCovariates), lo(kNumCovariates), hi(kNumCovariates);
        for (const auto& r : results) {
            const auto* o = r.find(model);
            if (!o || !o->pooled) {
                ++ms.failures;
                continue;
            }
            ++ms.replicates;
            for (int j = 0; j < kNumCovariates; ++j) {
                est[static_cast<std::size_t>(j)].push_back(o->pooled->qbar[j]);
                lo[static_cast<std::size_t>(j)].push_back(o->pooled->ci_low[j]);
                hi[static_cast<std::size_t>(j)].push_back(o->pooled->ci_high[j]);
            }
        }
        const int requested = ms.replicates + ms.failures;
        ms.unreliable = requested > 0 && ms.failures > 0.05 * requested;
        for (int j = 0; j < kNumCovariates; ++j) {
            const auto ju = static_cast<std::size_t>(j);
            ms.coefficients.push_back(summarize_coefficient(est[ju], lo[ju], hi[ju], truth[ju]));
        }
        summary.models.push_back(std::move(ms));
    }
    return summary;
}

// ---------------------------------------------------------------------------
// Compliance criteria (inclusive bounds)
// ---------------------------------------------------------------------------

inline constexpr double kBiasThreshold = 10.0;
inline constexpr double kCoverageLow = 92.5;
inline constexpr double kCoverageHigh = 97.5;

inline bool meets_bias_criterion(double relative_bias_pct) { return std::abs(relative_bias_pct) <= kBiasThreshold; }

inline bool meets_coverage_criterion(double coverage_pct)
{
    return coverage_pct >= kCoverageLow && coverage_pct <= kCoverageHigh;
}

struct CriteriaFlags {
    Model model = Model::ShfmiCp;
    std::vector<bool> bias_ok;
    std::vector<bool> coverage_ok;
    bool bias_all = false;
    bool coverage_all = false;
};

inline std::vector<CriteriaFlags> check_criteria(const ScenarioSummary& summary)
{
    std::vector<CriteriaFlags> out;
    for (const auto& ms : summary.models) {
        CriteriaFlags f;
        f.model = ms.model;
        f.bias_all = f.coverage_all = ms.replicates > 0;
        for (const auto& c : ms.coefficients) {
            f.bias_ok.push_back(ms.replicates > 0 && meets_bias_criterion(c.relative_bias));
            f.coverage_ok.push_back(ms.replicates > 0 && meets_coverage_criterion(c.coverage));
            f.bias_all = f.bias_all && f.bias_ok.back();
            f.coverage_all = f.coverage_all && f.coverage_ok.back();
        }
        out.push_back(std::move(f));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Scenario cells and CSV output
// ---------------------------------------------------------------------------

/// Identifies one cell of the scenario grid.
struct Cell {
    int population = 1;
    int follow_up_days = 0;
    int max_prior_days = 0;
    double prop_prior = 0.0;
    int n = 0;

    friend auto operator<=>(const Cell&, const Cell&) = default;
    friend bool operator==(const Cell&, const Cell&) = default;
};

inline Cell cell_of(const ScenarioConfig& c)
{
    return {c.population.id, c.follow_up_days, c.max_prior_days, c.prop_prior, c.n};
}

inline constexpr std::string_view kSummaryCsvHeader =
    "population,follow_up_days,max_prior_days,prop_prior,n,model,coefficient,truth,mean_estimate,relative_bias,"
    "coverage,ci_length,mc_se,R,failures";

inline void write_summary_rows(std::ostream& out, const Cell& cell, const ScenarioSummary& summary)
{
    for (const auto& ms : summary.models) {
        for (std::size_t j = 0; j < ms.coefficients.size(); ++j) {
            const auto& c = ms.coefficients[j];
            out << cell.population << ',' << cell.follow_up_days << ',' << cell.max_prior_days << ','
                << csv::num(cell.prop_prior) << ',' << cell.n << ',' << to_string(ms.model) << ",beta" << (j + 1)
                << ',' << csv::num(c.truth) << ',' << csv::num(c.mean_estimate) << ',' << csv::num(c.relative_bias)
                << ',' << csv::num(c.coverage) << ',' << csv::num(c.avg_ci_length) << ',' << csv::num(c.mc_se) << ','
                << ms.replicates << ',' << ms.failures << '\n';
        }
    }
}

inline constexpr std::string_view kCriteriaCsvHeader =
    "population,follow_up_days,max_prior_days,prop_prior,n,model,bias_ok_beta1,bias_ok_beta2,bias_ok_beta3,bias_ok,"
    "coverage_ok_beta1,coverage_ok_beta2,coverage_ok_beta3,coverage_ok";

inline void write_criteria_rows(std::ostream& out, const Cell& cell, const std::vector<CriteriaFlags>& flags)
{
    for (const auto& f : flags) {
        out << cell.population << ',' << cell.follow_up_days << ',' << cell.max_prior_days << ','
            << csv::num(cell.prop_prior) << ',' << cell.n << ',' << to_string(f.model);
        for (bool b : f.bias_ok) out << ',' << (b ? 1 : 0);
        out << ',' << (f.bias_all ? 1 : 0);
        for (bool b : f.coverage_ok) out << ',' << (b ? 1 : 0);
        out << ',' << (f.coverage_all ? 1 : 0) << '\n';
    }
}

/// Rebuilds per-cell summaries from a summary CSV (for re-checking criteria).
inline std::map<Cell, ScenarioSummary> read_summary_csv(const csv::Table& t)
{
    const int c_pop = t.require("population"), c_fu = t.require("follow_up_days"),
              c_mp = t.require("max_prior_days"), c_pp = t.require("prop_prior"), c_n = t.require("n"),
              c_model = t.require("model"), c_coef = t.require("coefficient"), c_truth = t.require("truth"),
              c_mean = t.require("mean_estimate"), c_rb = t.require("relative_bias"), c_cov = t.require("coverage"),
              c_len = t.require("ci_length"), c_R = t.require("R"), c_fail = t.require("failures");
    const int c_mcse = t.column("mc_se");
    std::map<Cell, ScenarioSummary> out;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const auto& row = t.rows[i];
        const int line = t.line_numbers[i];
        const auto at = [&](int c) -> const std::string& { return row[static_cast<std::size_t>(c)]; };
        Cell cell{static_cast<int>(csv::parse_int(at(c_pop), line, "population")),
                  static_cast<int>(csv::parse_int(at(c_fu), line, "follow_up_days")),
                  static_cast<int>(csv::parse_int(at(c_mp), line, "max_prior_days")),
                  csv::parse_double(at(c_pp), line, "prop_prior"),
                  static_cast<int>(csv::parse_int(at(c_n), line, "n"))};
        Model model;
        try {
            model = parse_model(at(c_model));
        } catch (const ConfigError& e) {
            throw DataError("line " + std::to_string(line) + ": " + e.what());
        }
        auto& summary = out[cell];
        auto* ms = summary.find(model);
        if (!ms) {
            summary.models.push_back({});
            ms = &summary.models.back();
            ms->model = model;
        }
        ms->replicates = static_cast<int>(csv::parse_int(at(c_R), line, "R"));
        ms->failures = static_cast<int>(csv::parse_int(at(c_fail), line, "failures"));
        CoefficientSummary c;
        c.truth = csv::parse_double(at(c_truth), line, "truth");
        c.mean_estimate = csv::parse_double(at(c_mean), line, "mean_estimate");
        c.relative_bias = csv::parse_double(at(c_rb), line, "relative_bias");
        c.coverage = csv::parse_double(at(c_cov), line, "coverage");
        c.avg_ci_length = csv::parse_double(at(c_len), line, "ci_length");
        if (c_mcse >= 0) c.mc_se = csv::parse_double(at(c_mcse), line, "mc_se");
        const std::string& coef = at(c_coef);
        if (coef != "beta" + std::to_string(ms->coefficients.size() + 1))
            throw DataError("line " + std::to_string(line) + ": coefficients must appear in order beta1..beta3");
        ms->coefficients.push_back(c);
    }
    return out;
}

}  // namespace lcrec
