#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lcrec/csv.hpp"
#include "lcrec/distributions.hpp"
#include "lcrec/errors.hpp"
#include "lcrec/rng.hpp"
#include "lcrec/simcohort.hpp"

namespace lcrec {

/**
 * COM-Poisson regression with log lambda_i = design_i . gamma and a shared
 * dispersion nu = exp(log_nu). `covariance` is over (gamma, log_nu) and is the
 * inverse observed information at the optimum (zero row/column for a fixed nu).
 */
struct ComPoissonFit {
    Eigen::VectorXd gamma;
    double log_nu = 0.0;
    Eigen::MatrixXd covariance;
    double loglik = 0.0;
    double gradient_norm = 0.0;  // max-norm of the (gamma, log_nu) score at the solution
    int iterations = 0;
    bool converged = false;
    bool nu_fixed = false;

    [[nodiscard]] Eigen::VectorXd parameters() const
    {
        Eigen::VectorXd v(gamma.size() + 1);
        v << gamma, log_nu;
        return v;
    }
};

struct ComPoissonOptions {
    std::optional<double> fixed_log_nu;
    int max_iterations = 200;
    double gradient_tol = 1e-6;
    int max_halvings = 30;
};

namespace detail {

struct CmpEvaluation {
    double loglik = 0.0;
    Eigen::VectorXd grad;  // over (gamma, nu)
    Eigen::MatrixXd hess;  // over (gamma, nu)
};

// Log-likelihood and derivatives in the natural parameters (gamma, nu), where the
// model is a regular exponential family and the log-likelihood is concave.
inline std::optional<CmpEvaluation> cmp_evaluate(std::span<const int> counts, const Eigen::MatrixXd& design,
                                                 const Eigen::VectorXd& gamma, double nu, bool derivatives)
{
    const auto q = design.cols();
    CmpEvaluation ev;
    if (derivatives) {
        ev.grad = Eigen::VectorXd::Zero(q + 1);
        ev.hess = Eigen::MatrixXd::Zero(q + 1, q + 1);
    }
    // identical design rows share moments
    std::map<double, ComPoissonMoments> cache;
    const Eigen::VectorXd eta = design * gamma;
    for (Eigen::Index i = 0; i < design.rows(); ++i) {
        if (!std::isfinite(eta[i]) || eta[i] > 700.0) return std::nullopt;
        auto it = cache.find(eta[i]);
        if (it == cache.end()) {
            const ComPoissonParams params{std::exp(eta[i]), nu};
            if (nu == 0.0 && params.lambda >= 1.0) return std::nullopt;
            ComPoissonMoments m;
            if (!com_poisson_series<true>(params, kComPoissonTol, m)) return std::nullopt;
            it = cache.emplace(eta[i], m).first;
        }
        const auto& m = it->second;
        const int y = counts[static_cast<std::size_t>(i)];
        const double lf = log_factorial(y);
        ev.loglik += y * eta[i] - nu * lf - m.log_z;
        if (!derivatives) continue;
        const auto z = design.row(i).transpose();
        ev.grad.head(q) += (y - m.mean) * z;
        ev.grad[q] += m.mean_lf - lf;
        ev.hess.topLeftCorner(q, q).noalias() -= m.var * z * z.transpose();
        ev.hess.col(q).head(q) += m.cov_y_lf * z;
        ev.hess(q, q) -= m.var_lf;
    }
    if (derivatives) ev.hess.row(q).head(q) = ev.hess.col(q).head(q).transpose();
    return ev;
}

}  // namespace detail

/// Log-likelihood of the COM-Poisson GLM at (gamma, log_nu).
inline double com_poisson_glm_loglik(std::span<const int> counts, const Eigen::MatrixXd& design,
                                     const Eigen::VectorXd& gamma, double log_nu)
{
    auto ev = detail::cmp_evaluate(counts, design, gamma, std::exp(log_nu), false);
    if (!ev) throw DomainError("COM-Poisson log-likelihood undefined at these parameters");
    return ev->loglik;
}

/**
 * Maximum-likelihood COM-Poisson regression. Newton-Raphson with step-halving in the
 * natural parameters (gamma, nu); the reported covariance is over (gamma, log nu).
 */
inline ComPoissonFit fit_com_poisson_glm(std::span<const int> counts, const Eigen::MatrixXd& design,
                                         const ComPoissonOptions& options = {},
                                         const std::optional<Eigen::VectorXd>& start = std::nullopt)
{
    const auto n = design.rows();
    const auto q = design.cols();
    if (static_cast<Eigen::Index>(counts.size()) != n) throw DomainError("counts and design differ in length");
    if (n == 0 || q == 0) throw DomainError("empty design");
    long total = 0;
    for (int y : counts) {
        if (y < 0) throw DomainError("counts must be non-negative");
        total += y;
    }
    if (total == 0) throw DegenerateFitError("all counts are zero; the COM-Poisson model cannot be fitted");
    {
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
        if (qr.rank() < q) throw SingularityError("COM-Poisson design matrix is rank deficient");
    }

    const bool nu_fixed = options.fixed_log_nu.has_value();
    Eigen::VectorXd gamma = Eigen::VectorXd::Zero(q);
    double nu = nu_fixed ? std::exp(*options.fixed_log_nu) : 1.0;
    if (start) {
        if (start->size() != q + 1) throw DomainError("start vector must hold gamma and log_nu");
        gamma = start->head(q);
        if (!nu_fixed) nu = std::exp((*start)[q]);
    } else {
        // Poisson-style start: intercept at the log mean when the first column is constant
        const double mean = static_cast<double>(total) / static_cast<double>(n);
        if ((design.col(0).array() == design(0, 0)).all() && design(0, 0) != 0.0)
            gamma[0] = std::log(mean) / design(0, 0);
    }

    auto ev = detail::cmp_evaluate(counts, design, gamma, nu, true);
    if (!ev) throw NumericError("COM-Poisson fit: invalid starting point");

    const Eigen::Index dim = nu_fixed ? q : q + 1;
    const auto score_norm = [&](const detail::CmpEvaluation& e) {
        double g = e.grad.head(q).cwiseAbs().maxCoeff();
        if (!nu_fixed) g = std::max(g, std::abs(e.grad[q] * nu));  // d/dlog_nu = nu d/dnu
        return g;
    };

    ComPoissonFit fit;
    fit.nu_fixed = nu_fixed;
    int it = 0;
    for (; it < options.max_iterations && score_norm(*ev) >= options.gradient_tol; ++it) {
        const Eigen::MatrixXd info = -ev->hess.topLeftCorner(dim, dim);
        Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
        Eigen::VectorXd step;
        if (ldlt.info() == Eigen::Success && ldlt.isPositive())
            step = ldlt.solve(ev->grad.head(dim));
        else
            step = ev->grad.head(dim) * 1e-3;  // gradient ascent fallback
        bool accepted = false;
        double scale = 1.0;
        for (int h = 0; h <= options.max_halvings; ++h, scale *= 0.5) {
            const Eigen::VectorXd g_new = gamma + scale * step.head(q);
            const double nu_new = nu_fixed ? nu : nu + scale * step[q];
            if (!(nu_new >= 0.0)) continue;
            auto trial = detail::cmp_evaluate(counts, design, g_new, nu_new, true);
            if (!trial || !std::isfinite(trial->loglik)) continue;
            if (trial->loglik >= ev->loglik - 1e-10 * (1.0 + std::abs(ev->loglik))) {
                gamma = g_new;
                nu = nu_new;
                ev = std::move(trial);
                accepted = true;
                break;
            }
        }
        if (!accepted) break;
    }

    fit.gamma = gamma;
    fit.log_nu = std::log(nu);
    fit.loglik = ev->loglik;
    fit.iterations = it;
    fit.gradient_norm = score_norm(*ev);
    fit.converged = fit.gradient_norm < options.gradient_tol;
    if (!fit.converged && !nu_fixed && nu < 1e-6) {
        // overdispersed beyond the geometric law: the maximum sits on the boundary nu = 0
        ComPoissonOptions boundary = options;
        boundary.fixed_log_nu = -std::numeric_limits<double>::infinity();
        Eigen::VectorXd from(q + 1);
        from << gamma, 0.0;
        return fit_com_poisson_glm(counts, design, boundary, from);
    }
    if (!fit.converged) {
        std::ostringstream os;
        os << "COM-Poisson fit did not converge after " << it << " iterations (score max-norm "
           << fit.gradient_norm << ", gamma = " << gamma.transpose() << ", log_nu = " << fit.log_nu << ")";
        throw ConvergenceError(os.str());
    }

    // observed information in (gamma, log nu): J^T I J with J = diag(1, ..., 1, nu) (score is zero)
    Eigen::MatrixXd info = -ev->hess.topLeftCorner(dim, dim);
    if (!nu_fixed) {
        info.col(q) *= nu;
        info.row(q) *= nu;
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
        throw SingularityError("COM-Poisson observed information is not positive definite");
    Eigen::MatrixXd cov = ldlt.solve(Eigen::MatrixXd::Identity(dim, dim));
    cov = 0.5 * (cov + cov.transpose()).eval();
    fit.covariance = Eigen::MatrixXd::Zero(q + 1, q + 1);
    fit.covariance.topLeftCorner(dim, dim) = cov;
    if (!fit.covariance.allFinite()) throw NumericError("COM-Poisson covariance is not finite");
    return fit;
}

/**
 * Multivariate normal draw from N(parameters, covariance) through a symmetric square
 * root. Marginally negative eigenvalues (>= -1e-10 relative) are clipped to zero.
 */
inline Eigen::VectorXd draw_params(const ComPoissonFit& fit, Rng& rng)
{
    if (!fit.converged) throw NumericError("draw_params: fit did not converge");
    const Eigen::VectorXd mean = fit.parameters();
    const auto dim = mean.size();
    if (fit.covariance.rows() != dim || fit.covariance.cols() != dim) throw DomainError("covariance has the wrong shape");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(fit.covariance);
    if (es.info() != Eigen::Success) throw NumericError("eigen-decomposition of the covariance failed");
    Eigen::VectorXd ev = es.eigenvalues();
    const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
    for (Eigen::Index i = 0; i < dim; ++i) {
        if (ev[i] < -1e-10 * scale) {
            std::ostringstream os;
            os << "covariance is not positive semi-definite (eigenvalue " << ev[i] << ")";
            throw NumericError(os.str());
        }
        ev[i] = std::max(ev[i], 0.0);
    }
    Eigen::VectorXd z(dim);
    for (Eigen::Index i = 0; i < dim; ++i) z[i] = rng.normal();
    if (ev.isZero(0.0)) return mean;
    return mean + es.eigenvectors() * (ev.cwiseSqrt().asDiagonal() * z);
}

// ---------------------------------------------------------------------------
// Imputation of unknown prior-episode counts
// ---------------------------------------------------------------------------

/// Imputation-model coefficients on the (1, x1, x2, x3, log exposure) scale.
struct ImputationParams {
    std::array<double, kNumCovariates + 2> gamma{};
    double log_nu = 0.0;
    // > 0: the fit saw one common exposure of this length; the exposure coefficient is
    // unused and lambda is chosen so the mean scales with prior_risk_days / reference
    double mean_scale_ref_days = 0.0;
};

/// Predicted means above this are truncated before matching (imputations are capped far below).
inline constexpr double kMaxScaledMean = 100.0;

/**
 * Scores of a previously-at-risk subject: lambda* = exp(gamma . (1, x, log prior_risk_days)),
 * nu* = exp(log_nu). In mean-scaling mode lambda* instead reproduces the mean at
 * exp(gamma . (1, x)) multiplied by prior_risk_days / mean_scale_ref_days.
 */
inline ComPoissonParams predict_scores(const ImputationParams& params, const Subject& subject)
{
    if (!(subject.prior_risk_days > 0.0))
        throw DomainError("predict_scores: subject " + std::to_string(subject.id) + " has no prior time at risk");
    double eta = params.gamma[0];
    for (std::size_t j = 0; j < subject.x.size(); ++j) eta += params.gamma[j + 1] * subject.x[j];
    const double nu = std::exp(params.log_nu);
    if (params.mean_scale_ref_days > 0.0) {
        const ComPoissonParams ref{std::exp(eta), nu};
        detail::ComPoissonMoments m;
        const bool finite = !(nu == 0.0 && ref.lambda >= 1.0) && detail::com_poisson_series<true>(ref, kComPoissonTol, m);
        const double ref_mean = finite ? m.mean : kMaxScaledMean;
        const double target = std::min(ref_mean * subject.prior_risk_days / params.mean_scale_ref_days, kMaxScaledMean);
        return {com_poisson_lambda_for_mean(nu, target), nu};
    }
    eta += params.gamma[kNumCovariates + 1] * std::log(subject.prior_risk_days);
    return {std::exp(eta), nu};
}

struct ImputedCohort {
    const Cohort* base = nullptr;
    std::vector<int> imputed_prior;  // 0 for subjects not previously at risk
    int imputation_index = 0;        // 1..m
    int cap_hits = 0;
};

inline constexpr int kImputedCountCap = 50;

struct MultipleImputation {
    std::optional<ComPoissonFit> fit;  // absent when nobody needs imputing
    bool mean_scaled = false;          // constant observed exposure: predictions scale the mean
    double exposure_ref_days = 0.0;
    int fit_sample_size = 0;
    std::vector<ImputedCohort> imputations;

    [[nodiscard]] int cap_hits() const
    {
        int n = 0;
        for (const auto& imp : imputations) n += imp.cap_hits;
        return n;
    }
};

/**
 * Builds the imputation design (1, x1, x2, x3, log exposure). When every subject has
 * the same observed exposure the last column is dropped, since it is collinear with
 * the intercept.
 */
inline Eigen::MatrixXd imputation_design(const std::vector<ObservedCount>& data, bool& exposure_constant)
{
    exposure_constant = true;
    for (const auto& d : data)
        if (d.exposure_days != data.front().exposure_days) exposure_constant = false;
    const Eigen::Index q = exposure_constant ? kNumCovariates + 1 : kNumCovariates + 2;
    Eigen::MatrixXd z(static_cast<Eigen::Index>(data.size()), q);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        z(r, 0) = 1.0;
        for (int j = 0; j < kNumCovariates; ++j) z(r, j + 1) = data[i].x[static_cast<std::size_t>(j)];
        if (!exposure_constant) z(r, kNumCovariates + 1) = std::log(data[i].exposure_days);
    }
    return z;
}

/**
 * Subjects whose follow-up counts train the imputation model: those not previously at
 * risk, whose follow-up starts at episode 1 like the unobserved prior period. Falls
 * back to the whole cohort when that group is empty or has no events.
 */
inline std::vector<ObservedCount> imputation_sample(const Cohort& cohort, const std::vector<ObservedCount>& all)
{
    std::vector<ObservedCount> fresh;
    int events = 0;
    for (std::size_t i = 0; i < all.size(); ++i) {
        if (cohort.subjects[i].previously_at_risk()) continue;
        fresh.push_back(all[i]);
        events += all[i].count;
    }
    if (events == 0) return all;
    return fresh;
}

/// Maps a draw of the fitted parameters onto prediction coefficients.
inline ImputationParams to_imputation_params(const Eigen::VectorXd& draw, bool mean_scaled, double exposure_ref_days)
{
    ImputationParams p;
    const auto q = draw.size() - 1;
    p.log_nu = draw[q];
    for (Eigen::Index j = 0; j < q; ++j) p.gamma[static_cast<std::size_t>(j)] = draw[j];
    if (mean_scaled) p.mean_scale_ref_days = exposure_ref_days;
    return p;
}

/**
 * Multiple imputation of prior-episode counts. Fits the COM-Poisson model once to the
 * observed follow-up counts of `imputation_sample`, then for each imputation l = 1..m
 * draws parameters from the approximate posterior, predicts scores from each subject's
 * prior time at risk and samples a count (capped at 50). Imputation l uses `rng.split(l)`.
 */
inline MultipleImputation multiple_impute(const Cohort& cohort, int m, const Rng& rng)
{
    if (m < 1) throw DomainError("multiple_impute: m must be >= 1");
    MultipleImputation out;
    const std::size_t n = cohort.subjects.size();
    bool any_prior = false;
    for (const auto& s : cohort.subjects) any_prior = any_prior || s.previously_at_risk();

    if (any_prior) {
        const auto all = observed_counts(cohort);
        auto data = imputation_sample(cohort, all);
        bool exposure_constant = false;
        const Eigen::MatrixXd design = imputation_design(data, exposure_constant);
        std::vector<int> counts(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) counts[i] = data[i].count;
        out.fit = fit_com_poisson_glm(counts, design);
        out.mean_scaled = exposure_constant;
        out.exposure_ref_days = data.front().exposure_days;
        out.fit_sample_size = static_cast<int>(data.size());
    }

    for (int l = 1; l <= m; ++l) {
        ImputedCohort imp;
        imp.base = &cohort;
        imp.imputation_index = l;
        imp.imputed_prior.assign(n, 0);
        if (out.fit) {
            Rng stream = rng.split(static_cast<std::uint64_t>(l));
            const auto params = to_imputation_params(draw_params(*out.fit, stream), out.mean_scaled, out.exposure_ref_days);
            for (std::size_t i = 0; i < n; ++i) {
                const auto& s = cohort.subjects[i];
                if (!s.previously_at_risk()) continue;
                const ComPoissonParams scores = predict_scores(params, s);
                int k = 0;
                if (scores.nu == 0.0 && scores.lambda >= 1.0)
                    k = kImputedCountCap;
                else
                    k = com_poisson_sample_capped(scores, kImputedCountCap, stream);
                if (k >= kImputedCountCap) ++imp.cap_hits;
                imp.imputed_prior[i] = k;
            }
        }
        out.imputations.push_back(std::move(imp));
    }
    return out;
}

/// Audit dump: one row per parameter with its estimate and covariance row.
inline void write_imputation_model_csv(std::ostream& out, const ComPoissonFit& fit, bool mean_scaled)
{
    const auto q = fit.gamma.size();
    std::vector<std::string> names;
    for (Eigen::Index j = 0; j < q; ++j) {
        if (j == 0) names.emplace_back("intercept");
        else if (j <= kNumCovariates) names.push_back("x" + std::to_string(j));
        else names.emplace_back("log_exposure");
    }
    names.emplace_back("log_nu");
    out << "parameter,estimate";
    for (const auto& nm : names) out << ",cov_" << nm;
    out << '\n';
    const Eigen::VectorXd est = fit.parameters();
    for (Eigen::Index i = 0; i < est.size(); ++i) {
        out << names[static_cast<std::size_t>(i)] << ',' << csv::num(est[i], 15);
        for (Eigen::Index j = 0; j < est.size(); ++j) out << ',' << csv::num(fit.covariance(i, j), 15);
        out << '\n';
    }
    out << "# loglik," << csv::num(fit.loglik, 15) << "\n# mean_scaled_exposure," << (mean_scaled ? 1 : 0) << '\n';
}

}  // namespace lcrec
