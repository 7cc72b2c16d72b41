#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "lcrec/errors.hpp"
#include "lcrec/riskset.hpp"

namespace lcrec {

/**
 * Stratified counting-process data prepared for repeated partial-likelihood
 * evaluation. Within each stratum the distinct event times are indexed and every
 * row stores the half-open index range [lo, hi) of event times at which it is at
 * risk (start < t <= stop), so risk-set sums reduce to difference arrays and
 * per-row quantities to differences of cumulative sums.
 */
class CoxProblem {
public:
    CoxProblem(const std::vector<RiskRow>& rows, std::span<const int> covariates)
    {
        if (rows.empty()) throw DataError("no rows to fit");
        p_ = static_cast<int>(covariates.size());
        for (int c : covariates)
            if (c < 0 || c >= kNumCovariates) throw DomainError("covariate column out of range");

        // dense subject index in order of first appearance
        std::unordered_map<int, int> subject_index;
        std::map<StratumLabel, int> stratum_index;
        std::vector<int> row_stratum(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto& r = rows[i];
            if (!(r.stop > r.start)) throw DataError("row with stop <= start for subject " + std::to_string(r.subject_id));
            if (r.status != 0 && r.status != 1) throw DataError("status must be 0 or 1");
            if (subject_index.emplace(r.subject_id, static_cast<int>(subject_ids_.size())).second)
                subject_ids_.push_back(r.subject_id);
            auto [it, added] = stratum_index.emplace(r.stratum, static_cast<int>(strata_.size()));
            if (added) strata_.push_back({r.stratum, {}, {}, {}, 0});
            row_stratum[i] = it->second;
            strata_[static_cast<std::size_t>(it->second)].n_rows++;
        }
        const int n_subjects = static_cast<int>(subject_ids_.size());
        subject_events_.assign(static_cast<std::size_t>(n_subjects), 0);

        // event times per stratum
        for (std::size_t i = 0; i < rows.size(); ++i)
            if (rows[i].status == 1) strata_[static_cast<std::size_t>(row_stratum[i])].times.push_back(rows[i].stop);
        for (auto& s : strata_) {
            std::sort(s.times.begin(), s.times.end());
            std::vector<double> uniq;
            for (double t : s.times) {
                if (uniq.empty() || t != uniq.back()) {
                    uniq.push_back(t);
                    s.deaths.push_back(1.0);
                } else {
                    s.deaths.back() += 1.0;
                }
            }
            s.times = std::move(uniq);
        }

        // keep rows of strata with at least one event
        int kept = 0;
        for (const auto& s : strata_) {
            if (s.times.empty()) {
                warnings_.push_back("stratum " + to_string(s.label) + " has no events and was dropped (" +
                                    std::to_string(s.n_rows) + " rows)");
            }
        }
        for (std::size_t i = 0; i < rows.size(); ++i) {
            auto& s = strata_[static_cast<std::size_t>(row_stratum[i])];
            if (s.times.empty()) continue;
            const auto& r = rows[i];
            const int lo = static_cast<int>(std::upper_bound(s.times.begin(), s.times.end(), r.start) - s.times.begin());
            const int hi = static_cast<int>(std::upper_bound(s.times.begin(), s.times.end(), r.stop) - s.times.begin());
            row_subject_.push_back(subject_index.at(r.subject_id));
            row_status_.push_back(r.status);
            row_stratum_.push_back(row_stratum[i]);
            row_lo_.push_back(lo);
            row_hi_.push_back(hi);
            for (int c : covariates) x_.push_back(r.x[static_cast<std::size_t>(c)]);
            s.rows.push_back(kept);
            if (r.status == 1) subject_events_[static_cast<std::size_t>(row_subject_.back())] += 1;
            ++kept;
        }
        n_rows_ = kept;
        n_events_ = 0;
        for (const auto& s : strata_)
            for (double d : s.deaths) n_events_ += static_cast<int>(d);
        if (n_events_ == 0) throw DataError("all observations are censored; nothing to fit");

        for (const auto& s : strata_) stratum_offset_.push_back(s.times.size());
        std::size_t acc = 0;
        for (auto& off : stratum_offset_) {
            const auto len = off;
            off = acc;
            acc += len + 1;
        }
        n_time_slots_ = acc;
        for (int r = 0; r < n_rows_; ++r) {
            const auto ru = static_cast<std::size_t>(r);
            const std::size_t base = stratum_offset_[static_cast<std::size_t>(row_stratum_[ru])];
            slot_begin_.push_back(base);
            row_klo_.push_back(base + static_cast<std::size_t>(row_lo_[ru]));
            row_khi_.push_back(base + static_cast<std::size_t>(row_hi_[ru]));
        }

        // overlapping rows of one subject inside one stratum (gap-time rows pooled at k_cap)
        std::vector<std::vector<int>> by_subject(static_cast<std::size_t>(n_subjects));
        for (int r = 0; r < n_rows_; ++r) by_subject[static_cast<std::size_t>(row_subject_[static_cast<std::size_t>(r)])].push_back(r);
        for (const auto& list : by_subject) {
            for (std::size_t a = 0; a < list.size(); ++a) {
                for (std::size_t b = a + 1; b < list.size(); ++b) {
                    const auto ra = static_cast<std::size_t>(list[a]), rb = static_cast<std::size_t>(list[b]);
                    if (row_stratum_[ra] != row_stratum_[rb]) continue;
                    const int lo = std::max(row_lo_[ra], row_lo_[rb]);
                    const int hi = std::min(row_hi_[ra], row_hi_[rb]);
                    if (lo < hi) overlaps_.push_back({list[a], list[b], lo, hi});
                }
            }
        }
    }

    [[nodiscard]] int p() const noexcept { return p_; }
    [[nodiscard]] int n_subjects() const noexcept { return static_cast<int>(subject_ids_.size()); }
    [[nodiscard]] int n_rows() const noexcept { return n_rows_; }
    [[nodiscard]] int n_events() const noexcept { return n_events_; }
    [[nodiscard]] const std::vector<int>& subject_ids() const noexcept { return subject_ids_; }
    [[nodiscard]] const std::vector<int>& subject_events() const noexcept { return subject_events_; }
    [[nodiscard]] const std::vector<std::string>& warnings() const noexcept { return warnings_; }

    struct StratumSummary {
        StratumLabel label;
        int events = 0;
        int rows = 0;
    };

    [[nodiscard]] std::vector<StratumSummary> strata_summary() const
    {
        std::vector<StratumSummary> out;
        for (const auto& s : strata_) {
            int d = 0;
            for (double v : s.deaths) d += static_cast<int>(v);
            if (d > 0) out.push_back({s.label, d, s.n_rows});
        }
        std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.label < b.label; });
        return out;
    }

    /// Value and derivatives of the partial log-likelihood at (beta, omega).
    struct Evaluation {
        double value = 0.0;              // sum_events eta - sum_t d log S0(t)
        double event_eta = 0.0;          // sum over event rows of eta (frailty included)
        double d_log_d = 0.0;            // sum_t d log d
        Eigen::VectorXd grad_beta;
        Eigen::MatrixXd hess_beta;       // p x p
        Eigen::VectorXd grad_omega;      // n_subjects
        Eigen::MatrixXd hess_cross;      // p x n_subjects: d2 / dbeta domega_i
        Eigen::VectorXd hess_omega_diag; // exact diagonal of the omega block
        Eigen::VectorXd expected;        // per subject: sum_rows w_r * (cumulative Breslow hazard over the row)
        // kept for hessian_times
        std::vector<double> row_w, s0, c0;
    };

    /**
     * Evaluates the stratified Breslow partial log-likelihood with per-subject log-frailty
     * offsets. With `derivatives` false only the scalar parts and `expected` are filled.
     */
    Evaluation evaluate(const Eigen::VectorXd& beta, const Eigen::VectorXd& omega, bool derivatives = true) const
    {
        const int p = p_;
        const auto n = static_cast<Eigen::Index>(n_subjects());
        Evaluation ev;
        if (derivatives) {
            ev.grad_beta = Eigen::VectorXd::Zero(p);
            ev.hess_beta = Eigen::MatrixXd::Zero(p, p);
            ev.grad_omega = Eigen::VectorXd::Zero(n);
            ev.hess_cross = Eigen::MatrixXd::Zero(p, n);
            ev.hess_omega_diag = Eigen::VectorXd::Zero(n);
        }
        ev.expected = Eigen::VectorXd::Zero(n);

        // linear predictors and weights
        w_.resize(static_cast<std::size_t>(n_rows_));
        for (int r = 0; r < n_rows_; ++r) {
            double eta = omega.size() ? omega[row_subject_[static_cast<std::size_t>(r)]] : 0.0;
            const double* xr = &x_[static_cast<std::size_t>(r) * static_cast<std::size_t>(p)];
            for (int j = 0; j < p; ++j) eta += xr[j] * beta[j];
            if (row_status_[static_cast<std::size_t>(r)]) {
                ev.event_eta += eta;
                if (derivatives)
                    for (int j = 0; j < p; ++j) ev.grad_beta[j] += xr[j];
            }
            w_[static_cast<std::size_t>(r)] = std::exp(eta);
        }

        const std::size_t pp = static_cast<std::size_t>(p);
        const std::size_t slots = n_time_slots_;
        s0_.assign(slots, 0.0);
        if (derivatives) {
            s1_.assign(slots * pp, 0.0);
            s2_.assign(slots * pp * pp, 0.0);
        }
        c0_.assign(slots, 0.0);
        if (derivatives) {
            c1_.assign(slots * pp, 0.0);
            c2_.assign(slots, 0.0);
        }

        for (std::size_t si = 0; si < strata_.size(); ++si) {
            const auto& s = strata_[si];
            if (s.times.empty()) continue;
            const std::size_t base = stratum_offset_[si];
            const int J = static_cast<int>(s.times.size());
            // difference arrays in reverse time: +w at hi-1, -w at lo-1
            for (int r : s.rows) {
                const auto ru = static_cast<std::size_t>(r);
                const int lo = row_lo_[ru], hi = row_hi_[ru];
                if (lo >= hi) continue;
                const double w = w_[ru];
                const double* xr = &x_[ru * pp];
                const auto add = [&](int j, double sign) {
                    const std::size_t k = base + static_cast<std::size_t>(j);
                    s0_[k] += sign * w;
                    if (!derivatives) return;
                    for (std::size_t a = 0; a < pp; ++a) {
                        const double wx = sign * w * xr[a];
                        s1_[k * pp + a] += wx;
                        for (std::size_t b = 0; b < pp; ++b) s2_[(k * pp + a) * pp + b] += wx * xr[b];
                    }
                };
                add(hi - 1, 1.0);
                if (lo >= 1) add(lo - 1, -1.0);
            }
            for (int j = J - 2; j >= 0; --j) {
                const std::size_t k = base + static_cast<std::size_t>(j);
                s0_[k] += s0_[k + 1];
                if (!derivatives) continue;
                for (std::size_t a = 0; a < pp; ++a) s1_[k * pp + a] += s1_[(k + 1) * pp + a];
                for (std::size_t a = 0; a < pp * pp; ++a) s2_[k * pp * pp + a] += s2_[(k + 1) * pp * pp + a];
            }
            // accumulate over event times and build prefix sums (c*[base + j] = sum over times < j)
            double cum0 = 0.0, cum2 = 0.0;
            cum1_.assign(pp, 0.0);
            for (int j = 0; j < J; ++j) {
                const std::size_t k = base + static_cast<std::size_t>(j);
                const double d = s.deaths[static_cast<std::size_t>(j)];
                const double S0 = s0_[k];
                if (!(S0 > 0.0)) throw DataError("empty risk set at an event time in stratum " + to_string(s.label));
                ev.value -= d * std::log(S0);
                ev.d_log_d += d * std::log(d);
                c0_[k] = cum0;
                cum0 += d / S0;
                if (derivatives) {
                    c2_[k] = cum2;
                    cum2 += d / (S0 * S0);
                    for (std::size_t a = 0; a < pp; ++a) {
                        c1_[k * pp + a] = cum1_[a];
                        const double xbar_a = s1_[k * pp + a] / S0;
                        cum1_[a] += d * xbar_a / S0;
                        ev.grad_beta[static_cast<Eigen::Index>(a)] -= d * xbar_a;
                        for (std::size_t b = 0; b < pp; ++b) {
                            const double xbar_b = s1_[k * pp + b] / S0;
                            ev.hess_beta(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) -=
                                d * (s2_[(k * pp + a) * pp + b] / S0 - xbar_a * xbar_b);
                        }
                    }
                }
            }
            // terminal slot
            const std::size_t kend = base + static_cast<std::size_t>(J);
            c0_[kend] = cum0;
            if (derivatives) {
                c2_[kend] = cum2;
                for (std::size_t a = 0; a < pp; ++a) c1_[kend * pp + a] = cum1_[a];
            }
        }

        ev.value += ev.event_eta;

        // per-row contributions to the frailty derivatives
        for (int r = 0; r < n_rows_; ++r) {
            const auto ru = static_cast<std::size_t>(r);
            const int i = row_subject_[ru];
            const std::size_t base = stratum_offset_[static_cast<std::size_t>(row_stratum_[ru])];
            const std::size_t klo = base + static_cast<std::size_t>(row_lo_[ru]);
            const std::size_t khi = base + static_cast<std::size_t>(row_hi_[ru]);
            const double w = w_[ru];
            const double a_r = w * (c0_[khi] - c0_[klo]);
            ev.expected[i] += a_r;
            if (!derivatives) continue;
            ev.grad_omega[i] += row_status_[ru] - a_r;
            const double* xr = &x_[ru * pp];
            for (std::size_t a = 0; a < pp; ++a)
                ev.hess_cross(static_cast<Eigen::Index>(a), i) -= a_r * xr[a] - w * (c1_[khi * pp + a] - c1_[klo * pp + a]);
            ev.hess_omega_diag[i] -= a_r - w * w * (c2_[khi] - c2_[klo]);
        }
        if (derivatives) {
            for (const auto& o : overlaps_) {
                const auto ra = static_cast<std::size_t>(o.row_a), rb = static_cast<std::size_t>(o.row_b);
                const std::size_t base = stratum_offset_[static_cast<std::size_t>(row_stratum_[ra])];
                const double dc2 = c2_[base + static_cast<std::size_t>(o.hi)] - c2_[base + static_cast<std::size_t>(o.lo)];
                ev.hess_omega_diag[row_subject_[ra]] += 2.0 * w_[ra] * w_[rb] * dc2;
            }
            ev.row_w = w_;
            ev.s0 = s0_;
            ev.c0 = c0_;
        }
        return ev;
    }

    /**
     * Exact Hessian of the partial log-likelihood times (v_beta, v_omega), at the point of
     * a derivative evaluation. With z_r the change of row r's linear predictor along v and
     * Z_t its risk-set sum, row r contributes w_r (C_Z - z_r C_0) over its time range.
     */
    void hessian_times(const Evaluation& ev, const Eigen::VectorXd& v_beta, const Eigen::VectorXd& v_omega,
                       Eigen::VectorXd& out_beta, Eigen::VectorXd& out_omega) const
    {
        const std::size_t pp = static_cast<std::size_t>(p_);
        const auto rows = static_cast<std::size_t>(n_rows_);
        out_beta = Eigen::VectorXd::Zero(p_);
        out_omega = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_subjects()));
        z_.resize(rows);
        zsum_.assign(n_time_slots_, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            double z = v_omega.size() ? v_omega[row_subject_[r]] : 0.0;
            const double* xr = &x_[r * pp];
            for (std::size_t j = 0; j < pp; ++j) z += xr[j] * v_beta[static_cast<Eigen::Index>(j)];
            z_[r] = z;
            const std::size_t klo = row_klo_[r], khi = row_khi_[r];
            if (klo >= khi) continue;
            // risk-set sum at slot j collects rows with klo <= j < khi
            const double wz = ev.row_w[r] * z;
            zsum_[khi - 1] += wz;
            if (klo > slot_begin_[r]) zsum_[klo - 1] -= wz;
        }
        cz_.resize(n_time_slots_);
        for (std::size_t si = 0; si < strata_.size(); ++si) {
            const auto& s = strata_[si];
            if (s.times.empty()) continue;
            const std::size_t base = stratum_offset_[si];
            const std::size_t J = s.times.size();
            for (std::size_t j = J - 1; j-- > 0;) zsum_[base + j] += zsum_[base + j + 1];
            double cum = 0.0;
            for (std::size_t j = 0; j < J; ++j) {
                const std::size_t k = base + j;
                cz_[k] = cum;
                cum += s.deaths[j] * zsum_[k] / (ev.s0[k] * ev.s0[k]);
            }
            cz_[base + J] = cum;
        }
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t klo = row_klo_[r], khi = row_khi_[r];
            const double q = ev.row_w[r] * ((cz_[khi] - cz_[klo]) - z_[r] * (ev.c0[khi] - ev.c0[klo]));
            const double* xr = &x_[r * pp];
            for (std::size_t j = 0; j < pp; ++j) out_beta[static_cast<Eigen::Index>(j)] += q * xr[j];
            if (out_omega.size()) out_omega[row_subject_[r]] += q;
        }
    }

private:
    struct Stratum {
        StratumLabel label;
        std::vector<double> times;   // distinct event times, ascending
        std::vector<double> deaths;  // events at each time
        std::vector<int> rows;       // kept row indices
        int n_rows = 0;
    };
    struct Overlap {
        int row_a, row_b, lo, hi;
    };

    int p_ = 0;
    int n_rows_ = 0;
    int n_events_ = 0;
    std::vector<int> subject_ids_;
    std::vector<int> subject_events_;
    std::vector<Stratum> strata_;
    std::vector<std::size_t> stratum_offset_;
    std::size_t n_time_slots_ = 0;
    std::vector<int> row_subject_, row_status_, row_stratum_, row_lo_, row_hi_;
    std::vector<std::size_t> slot_begin_, row_klo_, row_khi_;  // absolute slot indices
    std::vector<double> x_;  // row-major n_rows x p
    std::vector<Overlap> overlaps_;
    std::vector<std::string> warnings_;

    // scratch
    mutable std::vector<double> w_, s0_, s1_, s2_, c0_, c1_, c2_, cum1_, z_, cz_, zsum_;
};

inline std::vector<int> all_covariates() { return {0, 1, 2}; }

/// Partial log-likelihood at (beta, log-frailties) for a list of rows.
inline CoxProblem::Evaluation breslow_partial_loglik(const Eigen::VectorXd& beta, const Eigen::VectorXd& log_frailty,
                                                     const std::vector<RiskRow>& rows,
                                                     std::span<const int> covariates)
{
    CoxProblem problem(rows, covariates);
    if (beta.size() != problem.p()) throw DomainError("beta has the wrong dimension");
    if (log_frailty.size() != 0 && log_frailty.size() != problem.n_subjects())
        throw DomainError("log_frailty has the wrong dimension");
    return problem.evaluate(beta, log_frailty);
}

// ---------------------------------------------------------------------------
// Gamma-frailty fit
// ---------------------------------------------------------------------------

struct CoxOptions {
    std::vector<int> covariates = all_covariates();
    std::optional<double> fixed_theta;  // unset: estimate; 0: no frailty
    double theta_max = 5.0;
    double theta_tol = 1e-4;
    int max_inner_iterations = 50;
    double inner_tol = 1e-7;
    int max_halvings = 10;
    double divergence_bound = 15.0;
};

struct CoxFit {
    Eigen::VectorXd beta;
    Eigen::VectorXd se;
    Eigen::MatrixXd vcov;
    double theta = 0.0;
    double loglik = 0.0;          // profiled marginal log-likelihood at theta
    double partial_loglik = 0.0;  // Breslow partial log-likelihood with frailty offsets
    double penalized_loglik = 0.0;
    int iterations = 0;           // inner Newton iterations summed over the theta search
    int theta_evaluations = 0;
    bool converged = false;
    int n_events = 0;
    std::vector<CoxProblem::StratumSummary> strata_used;
    std::vector<std::string> warnings;
    Eigen::VectorXd log_frailty;
    std::vector<int> subject_ids;
};

namespace detail {

struct InnerState {
    Eigen::VectorXd beta;
    Eigen::VectorXd omega;  // empty when theta == 0
};

struct InnerResult {
    InnerState state;
    double penalized = 0.0;
    double partial = 0.0;
    double marginal = 0.0;
    Eigen::MatrixXd vcov;
    int iterations = 0;
    bool converged = false;
};

inline double gamma_penalty(const Eigen::VectorXd& omega, double nu)
{
    double s = 0.0;
    for (Eigen::Index i = 0; i < omega.size(); ++i) s += std::exp(omega[i]) - omega[i];
    return nu * s;
}

/**
 * Profile marginal log-likelihood of the gamma-frailty model at the penalized solution,
 * with the Breslow baseline plugged in. Per subject with d events and frailty-free
 * cumulative hazard A the gamma integral contributes
 *   -nu log1p(A / nu) + sum_{m < d} log1p((m - A) / (nu + A)),   nu = 1 / theta,
 * which tends to -A as theta -> 0.
 */
inline double marginal_loglik(const CoxProblem& problem, const CoxProblem::Evaluation& ev,
                              const Eigen::VectorXd& omega, double theta)
{
    const auto& d = problem.subject_events();
    // sum d log(d / S0) + sum eta over events, with the frailty removed from eta
    double m = ev.d_log_d + ev.value;
    const bool frail = theta > 0.0 && omega.size() > 0;
    const double nu = frail ? 1.0 / theta : 0.0;
    for (Eigen::Index i = 0; i < ev.expected.size(); ++i) {
        const int di = d[static_cast<std::size_t>(i)];
        if (!frail) {
            m -= ev.expected[i];
            continue;
        }
        m -= di * omega[i];
        const double A = ev.expected[i] * std::exp(-omega[i]);
        double term = -nu * std::log1p(A / nu);
        for (int k = 0; k < di; ++k) term += std::log1p((k - A) / (nu + A));
        m += term;
    }
    return m;
}

/**
 * Newton iterations on (beta, omega) for a fixed theta. The full system is solved by
 * conjugate gradients with exact Hessian-vector products, preconditioned by the
 * exact beta block plus the diagonal of the omega block. Step-halving keeps the
 * penalized objective non-decreasing.
 */
inline InnerResult fit_inner(const CoxProblem& problem, double theta, InnerState start, const CoxOptions& opt)
{
    const int p = problem.p();
    const auto n = static_cast<Eigen::Index>(problem.n_subjects());
    const bool frail = theta > 0.0;
    const double nu = frail ? 1.0 / theta : 0.0;
    if (frail) {
        if (start.omega.size() != n) start.omega = Eigen::VectorXd::Zero(n);
    } else {
        start.omega.resize(0);
    }

    InnerResult res;
    res.state = std::move(start);
    const auto objective = [&](const CoxProblem::Evaluation& ev, const Eigen::VectorXd& omega) {
        return frail ? ev.value - gamma_penalty(omega, nu) : ev.value;
    };

    auto ev = problem.evaluate(res.state.beta, res.state.omega);
    double current = objective(ev, res.state.omega);
    Eigen::MatrixXd schur(p, p);
    Eigen::LDLT<Eigen::MatrixXd> ldlt;
    Eigen::VectorXd nd, dbeta(p), domega;
    Eigen::MatrixXd cross;  // N_beta,omega = -hess_cross

    // Factorizes the block preconditioner of N = -H + penalty: exact beta block,
    // exact diagonal of the omega block, solved through the Schur complement.
    const auto factorize = [&](const CoxProblem::Evaluation& e, const Eigen::VectorXd& omega) -> bool {
        schur = -e.hess_beta;
        if (frail) {
            nd.resize(n);
            cross = -e.hess_cross;
            for (Eigen::Index i = 0; i < n; ++i) {
                nd[i] = -e.hess_omega_diag[i] + nu * std::exp(omega[i]);
                schur.noalias() -= cross.col(i) * cross.col(i).transpose() / nd[i];
            }
        }
        ldlt.compute(schur);
        return ldlt.info() == Eigen::Success && ldlt.isPositive() &&
               ldlt.vectorD().minCoeff() > 1e-12 * std::max(1.0, schur.diagonal().maxCoeff());
    };
    // stacked vectors [beta; omega]
    const auto precondition = [&](const Eigen::VectorXd& r) -> Eigen::VectorXd {
        Eigen::VectorXd y(r.size());
        if (!frail) return ldlt.solve(r);
        const auto r_omega = r.tail(n);
        Eigen::VectorXd rhs = r.head(p) - cross * r_omega.cwiseQuotient(nd);
        y.head(p) = ldlt.solve(rhs);
        y.tail(n) = (r_omega - cross.transpose() * y.head(p)).cwiseQuotient(nd);
        return y;
    };
    Eigen::VectorXd hv_beta, hv_omega;
    const auto apply_n = [&](const CoxProblem::Evaluation& e, const Eigen::VectorXd& omega, const Eigen::VectorXd& v) {
        problem.hessian_times(e, v.head(p), v.tail(n), hv_beta, hv_omega);
        Eigen::VectorXd out(v.size());
        out.head(p) = -hv_beta;
        out.tail(n) = -hv_omega + nu * omega.array().exp().matrix().cwiseProduct(v.tail(n));
        return out;
    };
    // preconditioned conjugate gradients on N x = g; falls back to the preconditioned step
    const auto solve = [&](const CoxProblem::Evaluation& e, const Eigen::VectorXd& omega, const Eigen::VectorXd& g,
                           double rel_tol) {
        Eigen::VectorXd x = Eigen::VectorXd::Zero(g.size());
        Eigen::VectorXd r = g, z = precondition(r), d = z;
        double rz = r.dot(z);
        const double stop = rel_tol * g.norm();
        for (int k = 0; k < 200 && r.norm() > stop; ++k) {
            const Eigen::VectorXd nd_ = apply_n(e, omega, d);
            const double curv = d.dot(nd_);
            if (!(curv > 0.0)) return k == 0 ? z : x;
            const double alpha = rz / curv;
            x += alpha * d;
            r -= alpha * nd_;
            z = precondition(r);
            const double rz_new = r.dot(z);
            d = z + (rz_new / rz) * d;
            rz = rz_new;
        }
        return x;
    };

    const auto newton_system = [&](const CoxProblem::Evaluation& e, const Eigen::VectorXd& omega) -> bool {
        if (!factorize(e, omega)) return false;
        if (!frail) {
            dbeta = ldlt.solve(e.grad_beta);
            return true;
        }
        Eigen::VectorXd g(p + n);
        g.head(p) = e.grad_beta;
        g.tail(n) = e.grad_omega + nu * (1.0 - omega.array().exp()).matrix();
        const Eigen::VectorXd step = solve(e, omega, g, 1e-6);
        dbeta = step.head(p);
        domega = step.tail(n);
        return step.allFinite();
    };

    for (int it = 0; it < opt.max_inner_iterations; ++it) {
        if (!newton_system(ev, res.state.omega))
            throw SingularityError("singular information matrix (is a covariate constant within every stratum?)");
        double step = 1.0;
        double max_update = std::max(dbeta.cwiseAbs().maxCoeff(), frail ? domega.cwiseAbs().maxCoeff() : 0.0);
        bool accepted = false;
        InnerState trial;
        CoxProblem::Evaluation trial_ev;
        double trial_value = current;
        for (int h = 0; h <= opt.max_halvings; ++h, step *= 0.5) {
            trial.beta = res.state.beta + step * dbeta;
            if (frail) trial.omega = res.state.omega + step * domega;
            if (!trial.beta.allFinite() || (frail && !trial.omega.allFinite())) continue;
            trial_ev = problem.evaluate(trial.beta, trial.omega);
            trial_value = objective(trial_ev, trial.omega);
            if (std::isfinite(trial_value) && trial_value >= current - 1e-12 * (1.0 + std::abs(current))) {
                accepted = true;
                break;
            }
        }
        res.iterations = it + 1;
        if (!accepted) {
            // no ascent along the Newton direction: at the optimum up to rounding
            res.converged = max_update < 1e-4;
            break;
        }
        res.state = std::move(trial);
        ev = std::move(trial_ev);
        current = trial_value;
        if (res.state.beta.cwiseAbs().maxCoeff() > opt.divergence_bound) {
            std::ostringstream os;
            os << "monotone likelihood: |beta| exceeded " << opt.divergence_bound << " (beta = "
               << res.state.beta.transpose() << ")";
            throw DivergenceError(os.str());
        }
        if (step * max_update < opt.inner_tol) {
            res.converged = true;
            break;
        }
    }

    res.penalized = current;
    res.partial = ev.value;
    res.marginal = marginal_loglik(problem, ev, res.state.omega, theta);
    if (!newton_system(ev, res.state.omega))
        throw SingularityError("singular information matrix at the solution");
    if (frail) {
        // beta block of the inverse penalized information
        res.vcov.resize(p, p);
        for (int j = 0; j < p; ++j) {
            Eigen::VectorXd e_j = Eigen::VectorXd::Zero(p + n);
            e_j[j] = 1.0;
            res.vcov.col(j) = solve(ev, res.state.omega, e_j, 1e-10).head(p);
        }
    } else {
        res.vcov = schur.inverse();
    }
    res.vcov = 0.5 * (res.vcov + res.vcov.transpose()).eval();
    return res;
}

}  // namespace detail

/**
 * Stratified proportional-hazards fit with a shared gamma frailty per subject
 * (mean 1, variance theta), by penalized partial likelihood. For fixed theta the
 * penalty (1/theta) sum(omega - e^omega) is added to the partial log-likelihood and
 * maximized over (beta, omega); theta itself maximizes the profile marginal
 * likelihood over [0, theta_max] by golden-section search, with theta = 0 (plain
 * stratified Cox) always considered. Standard errors come from the beta block of the
 * inverse penalized information at the chosen theta, treating theta as known.
 */
inline CoxFit fit_cox_frailty(const std::vector<RiskRow>& rows, int n_subjects, const CoxOptions& options = {})
{
    const CoxProblem problem(rows, options.covariates);
    if (problem.n_subjects() != n_subjects) {
        std::ostringstream os;
        os << "expected " << n_subjects << " subjects, rows contain " << problem.n_subjects();
        throw DataError(os.str());
    }
    const int p = problem.p();
    if (p == 0) throw DomainError("no covariates selected");

    int total_iterations = 0;
    int evaluations = 0;
    detail::InnerState warm{Eigen::VectorXd::Zero(p), {}};
    const auto run = [&](double theta) {
        auto r = detail::fit_inner(problem, theta, warm, options);
        total_iterations += r.iterations;
        ++evaluations;
        warm.beta = r.state.beta;
        if (theta > 0.0) warm.omega = r.state.omega;
        return r;
    };

    detail::InnerResult best;
    double best_theta = 0.0;
    if (options.fixed_theta) {
        if (!(*options.fixed_theta >= 0.0)) throw DomainError("fixed theta must be >= 0");
        best_theta = *options.fixed_theta;
        best = run(best_theta);
    } else {
        best = run(0.0);
        best_theta = 0.0;
        const auto consider = [&](double theta, detail::InnerResult&& r) {
            if (r.marginal > best.marginal) {
                best = std::move(r);
                best_theta = theta;
            }
        };
        // golden-section search for the maximum of the profile marginal likelihood
        const double invphi = (std::sqrt(5.0) - 1.0) / 2.0;
        double a = 0.0, b = options.theta_max;
        double c = b - invphi * (b - a), d = a + invphi * (b - a);
        auto rc = run(c);
        double fc = rc.marginal;
        auto rd = run(d);
        double fd = rd.marginal;
        consider(c, std::move(rc));
        consider(d, std::move(rd));
        while (b - a > options.theta_tol) {
            if (fc >= fd) {
                b = d;
                d = c;
                fd = fc;
                c = b - invphi * (b - a);
                auto r = run(c);
                fc = r.marginal;
                consider(c, std::move(r));
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + invphi * (b - a);
                auto r = run(d);
                fd = r.marginal;
                consider(d, std::move(r));
            }
        }
    }

    CoxFit fit;
    fit.beta = best.state.beta;
    fit.vcov = best.vcov;
    fit.se = fit.vcov.diagonal().cwiseMax(0.0).cwiseSqrt();
    fit.theta = best_theta;
    fit.loglik = best.marginal;
    fit.partial_loglik = best.partial;
    fit.penalized_loglik = best.penalized;
    fit.iterations = total_iterations;
    fit.theta_evaluations = evaluations;
    fit.converged = best.converged && fit.se.allFinite();
    fit.n_events = problem.n_events();
    fit.strata_used = problem.strata_summary();
    fit.warnings = problem.warnings();
    fit.log_frailty = best.state.omega.size() ? best.state.omega : Eigen::VectorXd::Zero(problem.n_subjects());
    fit.subject_ids = problem.subject_ids();
    if (!fit.converged) {
        std::ostringstream os;
        os << "frailty Cox fit did not converge at theta = " << fit.theta << " (beta = " << fit.beta.transpose()
           << ", " << best.iterations << " inner iterations)";
        throw ConvergenceError(os.str());
    }
    return fit;
}

inline constexpr std::string_view kFitCsvHeader = "model,imputation,beta1,beta2,beta3,se1,se2,se3,theta,loglik,converged";

/// One fit as a CSV row; coefficients outside `covariates` are written as NA.
inline std::string fit_csv_row(std::string_view model, int imputation, const CoxFit& fit,
                               std::span<const int> covariates)
{
    std::string beta[3] = {"NA", "NA", "NA"}, se[3] = {"NA", "NA", "NA"};
    for (std::size_t j = 0; j < covariates.size(); ++j) {
        const auto c = static_cast<std::size_t>(covariates[j]);
        beta[c] = csv::num(fit.beta[static_cast<Eigen::Index>(j)]);
        se[c] = csv::num(fit.se[static_cast<Eigen::Index>(j)]);
    }
    std::string out(model);
    out += "," + std::to_string(imputation);
    for (const auto& b : beta) out += "," + b;
    for (const auto& s : se) out += "," + s;
    out += "," + csv::num(fit.theta) + "," + csv::num(fit.loglik) + "," + (fit.converged ? "1" : "0");
    return out;
}

}  // namespace lcrec
