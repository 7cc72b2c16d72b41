#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>

#include "lcrec/detail/normal.hpp"
#include "lcrec/errors.hpp"
#include "lcrec/rng.hpp"

namespace lcrec {

// ---------------------------------------------------------------------------
// Baseline survival laws
// ---------------------------------------------------------------------------

enum class Family { Weibull, LogNormal, LogLogistic };

inline std::string_view to_string(Family f) noexcept
{
    switch (f) {
        case Family::Weibull: return "Weibull";
        case Family::LogNormal: return "LogNormal";
        case Family::LogLogistic: return "LogLogistic";
    }
    return "?";
}

/**
 * Per-episode baseline law on the log-time scale.
 *
 *   Weibull      S0(t) = exp(-(e^{-beta0} t)^a)
 *   LogNormal    S0(t) = 1 - Phi((ln t - beta0) / a)
 *   LogLogistic  S0(t) = 1 / (1 + (e^{-beta0} t)^{1/a})
 *
 * with a = ancillary. A Weibull law with a = 1 has constant hazard e^{-beta0}.
 */
struct EpisodeLaw {
    Family family = Family::Weibull;
    double beta0 = 0.0;
    double ancillary = 1.0;
};

inline void validate(const EpisodeLaw& law)
{
    if (!std::isfinite(law.beta0)) throw DomainError("episode law: beta0 must be finite");
    if (!(law.ancillary > 0.0) || !std::isfinite(law.ancillary))
        throw DomainError("episode law: ancillary must be positive and finite");
}

/// Standard normal CDF.
inline double normal_cdf(double x) noexcept { return detail::standard_normal_cdf(x); }

/// Inverse standard normal CDF; |Phi(result) - prob| is at rounding level.
inline double normal_quantile(double prob)
{
    if (!(prob > 0.0 && prob < 1.0)) {
        std::ostringstream os;
        os << "normal_quantile: probability " << prob << " outside (0, 1)";
        throw DomainError(os.str());
    }
    return detail::standard_normal_quantile(prob);
}

namespace detail {

// log S0(t) for t > 0.
inline double log_surv(const EpisodeLaw& law, double t)
{
    const double logt = std::log(t);
    switch (law.family) {
        case Family::Weibull:
            return -std::exp(law.ancillary * (logt - law.beta0));
        case Family::LogNormal: {
            const double z = (logt - law.beta0) / law.ancillary;
            return std::log(standard_normal_cdf(-z));
        }
        case Family::LogLogistic:
            return -std::log1p(std::exp((logt - law.beta0) / law.ancillary));
    }
    return 0.0;
}

// Solves log S0(t) = log_u for log_u <= 0.
inline double inv_log_surv(const EpisodeLaw& law, double log_u)
{
    if (log_u == 0.0) return 0.0;
    switch (law.family) {
        case Family::Weibull:
            return std::exp(law.beta0 + std::log(-log_u) / law.ancillary);
        case Family::LogNormal: {
            // z = Phi^{-1}(1 - u); pick the tail that keeps full precision.
            const double u = std::exp(log_u);
            const double z = u < 0.5 ? -standard_normal_quantile(u)
                                     : standard_normal_quantile(-std::expm1(log_u));
            return std::exp(law.beta0 + law.ancillary * z);
        }
        case Family::LogLogistic:
            return std::exp(law.beta0 + law.ancillary * std::log(std::expm1(-log_u)));
    }
    return 0.0;
}

}  // namespace detail

inline double surv_baseline(const EpisodeLaw& law, double t)
{
    validate(law);
    if (!(t >= 0.0)) throw DomainError("surv_baseline: t must be >= 0");
    if (t == 0.0) return 1.0;
    if (std::isinf(t)) return 0.0;
    return std::exp(detail::log_surv(law, t));
}

/// Baseline hazard h0(t) = f0(t) / S0(t), for t > 0.
inline double hazard_baseline(const EpisodeLaw& law, double t)
{
    validate(law);
    if (!(t > 0.0)) throw DomainError("hazard_baseline: t must be > 0");
    const double a = law.ancillary;
    const double logt = std::log(t);
    switch (law.family) {
        case Family::Weibull:
            // a s (s t)^{a-1}, s = e^{-beta0}
            return a * std::exp(-law.beta0 + (a - 1.0) * (logt - law.beta0));
        case Family::LogNormal: {
            const double z = (logt - law.beta0) / a;
            // phi(z) / (a t Phi(-z)) via the Mills ratio to stay finite in the tail
            const double log_phi = -0.5 * z * z - 0.5 * std::log(2.0 * std::numbers::pi);
            return std::exp(log_phi - std::log(a) - logt - std::log(detail::standard_normal_cdf(-z)));
        }
        case Family::LogLogistic: {
            const double w = (logt - law.beta0) / a;
            // (1/a)(1/t) e^w / (1 + e^w)
            return std::exp(-std::log(a) - logt - std::log1p(std::exp(-w)));
        }
    }
    return 0.0;
}

inline double inv_surv_baseline(const EpisodeLaw& law, double u)
{
    validate(law);
    if (!(u > 0.0 && u <= 1.0)) throw DomainError("inv_surv_baseline: u must lie in (0, 1]");
    if (u == 1.0) return 0.0;
    return detail::inv_log_surv(law, std::log(u));
}

/**
 * Proportional-hazards event time: inverts S0(t)^{exp(linpred)} = U, so the drawn
 * time has hazard h0(t) e^{linpred}.
 */
inline double draw_event_time(const EpisodeLaw& law, double linpred, Rng& rng)
{
    validate(law);
    if (!std::isfinite(linpred)) throw DomainError("draw_event_time: linear predictor must be finite");
    const double log_u = std::log(rng.uniform()) * std::exp(-linpred);
    double t = detail::inv_log_surv(law, log_u);
    if (!(t > 0.0)) t = std::numeric_limits<double>::min();
    return t;
}

// ---------------------------------------------------------------------------
// COM-Poisson
// ---------------------------------------------------------------------------

/// P(Y = y) proportional to lambda^y / (y!)^nu.
struct ComPoissonParams {
    double lambda = 1.0;
    double nu = 1.0;
};

inline constexpr double kComPoissonTol = 1e-12;
inline constexpr int kComPoissonMaxTerms = 10000;

inline void validate(const ComPoissonParams& p)
{
    if (!(p.lambda > 0.0) || !std::isfinite(p.lambda))
        throw DomainError("COM-Poisson: lambda must be positive and finite");
    if (!(p.nu >= 0.0) || !std::isfinite(p.nu))
        throw DomainError("COM-Poisson: nu must be non-negative and finite");
    if (p.nu == 0.0 && p.lambda >= 1.0)
        throw DomainError("COM-Poisson: nu = 0 requires lambda < 1 (series diverges)");
}

namespace detail {

inline double log_factorial(int y) { return std::lgamma(static_cast<double>(y) + 1.0); }

/// Moments of Y and log(Y!) needed by the GLM score and information.
struct ComPoissonMoments {
    double log_z = 0.0;
    double mean = 0.0;      // E[Y]
    double var = 0.0;       // Var[Y]
    double mean_lf = 0.0;   // E[log Y!]
    double var_lf = 0.0;    // Var[log Y!]
    double cov_y_lf = 0.0;  // Cov(Y, log Y!)
    int terms = 0;
};

/**
 * Sums the series term by term. Stops once terms are decreasing and the geometric
 * bound on the remaining tail falls below tol times the running sum. Returns false
 * instead of throwing when the term cap is reached.
 */
template <bool WithMoments>
bool com_poisson_series(const ComPoissonParams& p, double tol, ComPoissonMoments& out)
{
    const double log_lambda = std::log(p.lambda);
    // Running sums are kept relative to a moving log scale.
    double scale = 0.0;  // log of term 0
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, l1 = 0.0, l2 = 0.0, yl = 0.0;
    for (int j = 0; j < kComPoissonMaxTerms; ++j) {
        const double lf = log_factorial(j);
        const double lt = j * log_lambda - p.nu * lf;
        if (lt > scale) {
            const double r = std::exp(scale - lt);
            s0 *= r;
            if constexpr (WithMoments) { s1 *= r; s2 *= r; l1 *= r; l2 *= r; yl *= r; }
            scale = lt;
        }
        const double w = std::exp(lt - scale);
        s0 += w;
        if constexpr (WithMoments) {
            const double y = j;
            s1 += w * y;
            s2 += w * y * y;
            l1 += w * lf;
            l2 += w * lf * lf;
            yl += w * y * lf;
        }
        // ratio of the next term to this one
        const double ratio = std::exp(log_lambda - p.nu * std::log(j + 1.0));
        if (ratio < 1.0) {
            const double tail = w * ratio / (1.0 - ratio);
            if (tail < tol * s0) {
                out.terms = j + 1;
                out.log_z = scale + std::log(s0);
                if constexpr (WithMoments) {
                    out.mean = s1 / s0;
                    out.var = std::max(0.0, s2 / s0 - out.mean * out.mean);
                    out.mean_lf = l1 / s0;
                    out.var_lf = std::max(0.0, l2 / s0 - out.mean_lf * out.mean_lf);
                    out.cov_y_lf = yl / s0 - out.mean * out.mean_lf;
                }
                return true;
            }
        }
    }
    return false;
}

inline ComPoissonMoments com_poisson_moments(const ComPoissonParams& p, double tol = kComPoissonTol)
{
    validate(p);
    ComPoissonMoments m;
    if (!com_poisson_series<true>(p, tol, m))
        throw DomainError("COM-Poisson: normalizing series did not converge within the term cap");
    return m;
}

}  // namespace detail

/// log Z(lambda, nu) = log sum_j lambda^j / (j!)^nu.
/**
 * Rate parameter lambda giving mean `target` at dispersion nu. The mean is increasing
 * in log lambda with slope Var[Y], so a bracketed Newton iteration is used.
 */
inline double com_poisson_lambda_for_mean(double nu, double target)
{
    if (!(nu >= 0.0) || !std::isfinite(nu)) throw DomainError("COM-Poisson: nu must be finite and >= 0");
    if (!(target > 0.0) || !std::isfinite(target)) throw DomainError("COM-Poisson: target mean must be positive");
    if (nu == 0.0) return target / (1.0 + target);
    // the series fails to converge only for very large means
    const auto mean_at = [&](double x) {
        detail::ComPoissonMoments m;
        if (!detail::com_poisson_series<true>({std::exp(x), nu}, kComPoissonTol, m)) m.mean = m.var = std::numeric_limits<double>::infinity();
        return m;
    };
    double x = nu * std::log(target + 0.5 * (1.0 - 1.0 / nu) + 1.0);
    if (!std::isfinite(x)) x = 0.0;
    double lo = -std::numeric_limits<double>::infinity(), hi = std::numeric_limits<double>::infinity();
    for (int it = 0; it < 200; ++it) {
        const auto m = mean_at(x);
        const double f = m.mean - target;
        if (std::abs(f) <= 1e-12 * target) return std::exp(x);
        (f < 0.0 ? lo : hi) = x;
        double next = std::isfinite(f) ? x - f / std::max(m.var, 1e-300) : x - 1.0;
        if (!(next > lo && next < hi)) {
            if (std::isfinite(lo) && std::isfinite(hi)) next = 0.5 * (lo + hi);
            else next = std::isfinite(lo) ? lo + 1.0 : hi - 1.0;
        }
        if (std::isfinite(lo) && std::isfinite(hi) && hi - lo < 1e-14) return std::exp(0.5 * (lo + hi));
        x = next;
    }
    throw NumericError("COM-Poisson: no rate matches the requested mean");
}

inline double com_poisson_log_z(const ComPoissonParams& p, double tol = kComPoissonTol)
{
    validate(p);
    if (!(tol > 0.0 && tol <= 1e-6)) throw DomainError("com_poisson_log_z: tol must lie in (0, 1e-6]");
    detail::ComPoissonMoments m;
    if (!detail::com_poisson_series<false>(p, tol, m))
        throw DomainError("COM-Poisson: normalizing series did not converge within the term cap");
    return m.log_z;
}

inline double com_poisson_log_pmf(const ComPoissonParams& p, int y, double log_z)
{
    if (y < 0) throw DomainError("COM-Poisson pmf: y must be >= 0");
    return y * std::log(p.lambda) - p.nu * detail::log_factorial(y) - log_z;
}

inline double com_poisson_pmf(const ComPoissonParams& p, int y)
{
    if (y < 0) throw DomainError("COM-Poisson pmf: y must be >= 0");
    return std::exp(com_poisson_log_pmf(p, y, com_poisson_log_z(p)));
}

namespace detail {

// Inversion sampler given log Z; walks the CDF from zero. Returns `cap` if the
// walk reaches it first (cap < 0 means uncapped).
inline int com_poisson_invert(const ComPoissonParams& p, double log_z, double u, int cap)
{
    const double log_lambda = std::log(p.lambda);
    const double mode = p.nu > 0.0 ? std::exp(log_lambda / p.nu) : 0.0;
    const int limit = cap >= 0 ? cap : kComPoissonMaxTerms;
    double cdf = 0.0;
    int last_positive = 0;
    for (int j = 0; j < limit; ++j) {
        const double pj = std::exp(j * log_lambda - p.nu * log_factorial(j) - log_z);
        cdf += pj;
        if (u <= cdf) return j;
        if (pj > 0.0)
            last_positive = j;
        else if (j > mode)
            return last_positive;  // cdf stalled just below u through rounding
    }
    return cap >= 0 ? cap : last_positive;
}

}  // namespace detail

/// Inversion sampling from the COM-Poisson CDF.
inline int com_poisson_sample(const ComPoissonParams& p, Rng& rng)
{
    const double log_z = com_poisson_log_z(p);
    return detail::com_poisson_invert(p, log_z, rng.uniform(), -1);
}

/**
 * Sample truncated at `cap`: returns min(Y, cap). If the normalizing series cannot be
 * summed (mass far beyond the cap) the draw is `cap`.
 */
inline int com_poisson_sample_capped(const ComPoissonParams& p, int cap, Rng& rng)
{
    validate(p);
    const double u = rng.uniform();
    detail::ComPoissonMoments m;
    if (!detail::com_poisson_series<false>(p, kComPoissonTol, m)) return cap;
    return detail::com_poisson_invert(p, m.log_z, u, cap);
}

}  // namespace lcrec
