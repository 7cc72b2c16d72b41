#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "lcrec/distributions.hpp"
#include "lcrec/simcohort.hpp"

using namespace lcrec;

namespace {

const EpisodeLaw kW1{Family::Weibull, 8.109, 1.0};

std::vector<EpisodeLaw> all_table_laws()
{
    std::vector<EpisodeLaw> laws;
    for (int id = 1; id <= 6; ++id)
        for (const auto& l : population(id).episode_laws) laws.push_back(l);
    return laws;
}

// Z(lambda, nu) by brute-force summation of the first `terms` terms
double brute_z(double lambda, double nu, int terms)
{
    double z = 0.0;
    for (int j = 0; j < terms; ++j) z += std::exp(j * std::log(lambda) - nu * std::lgamma(j + 1.0));
    return z;
}

}  // namespace

TEST(SurvBaseline, IsOneAtZero)
{
    for (const auto& law : all_table_laws()) EXPECT_DOUBLE_EQ(surv_baseline(law, 0.0), 1.0);
}

TEST(SurvBaseline, WeibullAtFiveYears)
{
    // exp(-1825 e^{-8.109}), evaluated independently
    const long double rate = std::exp(-8.109L);
    const double expected = static_cast<double>(std::exp(-1825.0L * rate));
    EXPECT_NEAR(surv_baseline(kW1, 1825.0), expected, 1e-14);
    EXPECT_NEAR(surv_baseline(kW1, 1825.0), 0.57753, 1e-5);
}

TEST(SurvBaseline, LogLogisticMedianAtExpBeta0)
{
    const EpisodeLaw ll{Family::LogLogistic, 7.974, 0.836};
    EXPECT_NEAR(surv_baseline(ll, std::exp(7.974)), 0.5, 1e-14);
}

TEST(SurvBaseline, MonotoneAndRejectsNegativeTime)
{
    for (const auto& law : all_table_laws()) {
        double prev = 1.0;
        for (double t = 1.0; t < 1e5; t *= 1.7) {
            const double s = surv_baseline(law, t);
            EXPECT_LE(s, prev);
            prev = s;
        }
        EXPECT_THROW(surv_baseline(law, -1.0), DomainError);
    }
}

TEST(InvSurvBaseline, UnitProbabilityGivesZero)
{
    for (const auto& law : all_table_laws()) EXPECT_EQ(inv_surv_baseline(law, 1.0), 0.0);
}

TEST(InvSurvBaseline, WeibullMeanLifetime)
{
    EXPECT_NEAR(inv_surv_baseline(kW1, std::exp(-1.0)), std::exp(8.109), 1e-9 * std::exp(8.109));
    EXPECT_NEAR(inv_surv_baseline(kW1, std::exp(-1.0)), 3324.25, 0.01);
}

TEST(InvSurvBaseline, LogNormalMedian)
{
    const EpisodeLaw ln{Family::LogNormal, 7.195, 1.498};
    EXPECT_NEAR(inv_surv_baseline(ln, 0.5), std::exp(7.195), 1e-9 * std::exp(7.195));
    EXPECT_NEAR(inv_surv_baseline(ln, 0.5), 1332.75, 0.01);
}

TEST(InvSurvBaseline, RejectsOutOfRange)
{
    EXPECT_THROW(inv_surv_baseline(kW1, 0.0), DomainError);
    EXPECT_THROW(inv_surv_baseline(kW1, 1.5), DomainError);
}

TEST(InvSurvBaseline, RoundTripOnAllLaws)
{
    for (const auto& law : all_table_laws())
        for (double t = 1.0; t <= 1e5; t *= 1.37) {
            const double u = surv_baseline(law, t);
            EXPECT_NEAR(inv_surv_baseline(law, u), t, 1e-8 * t) << to_string(law.family) << " t=" << t;
        }
}

TEST(DrawEventTime, MonteCarloMeanOfExponentialLaw)
{
    Rng rng(11);
    double sum = 0.0;
    const int n = 50000;
    for (int i = 0; i < n; ++i) sum += draw_event_time(kW1, 0.0, rng);
    EXPECT_NEAR(sum / n, std::exp(8.109), 0.02 * std::exp(8.109));
}

TEST(DrawEventTime, EmpiricalHazardMatches)
{
    // exposure-based hazard estimate: events / total time, censored at 1825
    Rng rng(12);
    double time = 0.0;
    int events = 0;
    for (int i = 0; i < 50000; ++i) {
        const double t = draw_event_time(kW1, 0.0, rng);
        if (t <= 1825.0) ++events;
        time += std::min(t, 1825.0);
    }
    EXPECT_NEAR(events / time, std::exp(-8.109), 0.05 * std::exp(-8.109));
}

TEST(DrawEventTime, LargerLinearPredictorShortensTimes)
{
    Rng a(5), b(5);
    double lo = 0.0, hi = 0.0;
    for (int i = 0; i < 2000; ++i) {
        lo += draw_event_time(kW1, 0.0, a);
        hi += draw_event_time(kW1, 2.0, b);
    }
    EXPECT_LT(hi, lo);
}

TEST(DrawEventTime, ProportionalHazardsSurvival)
{
    // P(T > t) = S0(t)^{exp(linpred)}
    const EpisodeLaw ln{Family::LogNormal, 7.195, 1.498};
    const double lp = 0.7, t = 1500.0;
    Rng rng(99);
    int above = 0;
    const int n = 40000;
    for (int i = 0; i < n; ++i) above += draw_event_time(ln, lp, rng) > t;
    const double p = std::pow(surv_baseline(ln, t), std::exp(lp));
    EXPECT_NEAR(static_cast<double>(above) / n, p, 4.0 * std::sqrt(p * (1 - p) / n));
}

TEST(WeibullHazard, RatioReproducesEpisodeTwoEffect)
{
    const EpisodeLaw w2{Family::Weibull, 7.927, 1.0};
    EXPECT_NEAR(hazard_baseline(w2, 100.0) / hazard_baseline(kW1, 100.0), 1.20, 5e-4);
}

TEST(ComPoissonLogZ, PoissonCase) { EXPECT_NEAR(com_poisson_log_z({2.0, 1.0}), 2.0, 1e-12); }

TEST(ComPoissonLogZ, GeometricCase) { EXPECT_NEAR(com_poisson_log_z({0.5, 0.0}), std::log(2.0), 1e-12); }

TEST(ComPoissonLogZ, MatchesDirectSummation)
{
    const double z = brute_z(1.5, 2.0, 50);
    EXPECT_NEAR(std::exp(com_poisson_log_z({1.5, 2.0})), z, 10 * 1e-12 * z);
}

TEST(ComPoissonLogZ, RejectsDivergentSeriesAndBadTolerance)
{
    EXPECT_THROW(com_poisson_log_z({1.0, 0.0}), DomainError);
    EXPECT_THROW(com_poisson_log_z({2.0, 0.0}), DomainError);
    EXPECT_THROW(com_poisson_log_z({2.0, 1.0}, 1e-3), DomainError);
    EXPECT_THROW(com_poisson_log_z({-1.0, 1.0}), DomainError);
}

TEST(ComPoissonLogZ, LargeRateStaysFinite)
{
    // Poisson with lambda = 500: log Z = 500
    EXPECT_NEAR(com_poisson_log_z({500.0, 1.0}), 500.0, 1e-9 * 500.0);
}

TEST(ComPoissonPmf, SpotValues)
{
    EXPECT_NEAR(com_poisson_pmf({2.0, 1.0}, 0), std::exp(-2.0), 1e-12);
    EXPECT_NEAR(com_poisson_pmf({0.5, 0.0}, 3), 0.0625, 1e-12);
    EXPECT_NEAR(com_poisson_pmf({1.5, 2.0}, 1), 1.5 / brute_z(1.5, 2.0, 50), 1e-12);
}

TEST(ComPoissonPmf, PoissonReduction)
{
    for (double lambda : {0.5, 2.0, 5.0})
        for (int y = 0; y <= 30; ++y) {
            const double poisson = std::exp(y * std::log(lambda) - lambda - std::lgamma(y + 1.0));
            EXPECT_NEAR(com_poisson_pmf({lambda, 1.0}, y), poisson, 1e-12);
        }
}

TEST(ComPoissonPmf, GeometricReduction)
{
    for (double lambda : {0.1, 0.5, 0.9})
        for (int y = 0; y <= 30; ++y)
            EXPECT_NEAR(com_poisson_pmf({lambda, 0.0}, y), (1 - lambda) * std::pow(lambda, y), 1e-12);
}

TEST(ComPoissonPmf, SumsToOne)
{
    for (const ComPoissonParams p : {ComPoissonParams{0.3, 0.2}, ComPoissonParams{3.0, 0.7}, ComPoissonParams{8.0, 2.5}}) {
        double s = 0.0;
        for (int y = 0; y < 400; ++y) s += com_poisson_pmf(p, y);
        EXPECT_NEAR(s, 1.0, 1e-10);
    }
    EXPECT_THROW(com_poisson_pmf({1.0, 1.0}, -1), DomainError);
}

TEST(ComPoissonSample, TinyRateGivesZero)
{
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) EXPECT_EQ(com_poisson_sample({1e-12, 0.5}, rng), 0);
}

TEST(ComPoissonSample, PoissonMean)
{
    Rng rng(4);
    double s = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) s += com_poisson_sample({2.0, 1.0}, rng);
    EXPECT_NEAR(s / n, 2.0, 0.03);
}

TEST(ComPoissonSample, GeometricMean)
{
    Rng rng(5);
    double s = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) s += com_poisson_sample({0.5, 0.0}, rng);
    EXPECT_NEAR(s / n, 0.5 / (1 - 0.5), 0.03);
}

TEST(ComPoissonSample, FrequenciesMatchPmf)
{
    const ComPoissonParams p{2.5, 1.7};
    Rng rng(6);
    std::vector<int> hist(12, 0);
    const int n = 60000;
    for (int i = 0; i < n; ++i) ++hist[static_cast<std::size_t>(std::min(com_poisson_sample(p, rng), 11))];
    for (int y = 0; y < 6; ++y) {
        const double q = com_poisson_pmf(p, y);
        EXPECT_NEAR(hist[static_cast<std::size_t>(y)] / double(n), q, 4.0 * std::sqrt(q * (1 - q) / n)) << "y=" << y;
    }
}

TEST(ComPoissonLambdaForMean, InvertsTheMean)
{
    for (double nu : {0.0, 0.15, 1.0, 2.0})
        for (double target : {0.05, 1.0, 7.5}) {
            const double lambda = com_poisson_lambda_for_mean(nu, target);
            double mean = 0.0;
            for (int y = 1; y < 2000; ++y) mean += y * com_poisson_pmf({lambda, nu}, y);
            EXPECT_NEAR(mean, target, 1e-8 * (1 + target)) << "nu=" << nu;
        }
    EXPECT_NEAR(com_poisson_lambda_for_mean(1.0, 3.0), 3.0, 1e-10);
}

TEST(NormalQuantile, KnownValues)
{
    EXPECT_NEAR(normal_quantile(0.5), 0.0, 1e-15);
    EXPECT_NEAR(normal_quantile(0.975), 1.959963984540054, 1e-12);
}

TEST(NormalQuantile, RoundTrip)
{
    for (int i = 1; i <= 99; ++i) {
        const double p = i / 100.0;
        EXPECT_NEAR(normal_cdf(normal_quantile(p)), p, 1e-12);
    }
}

TEST(NormalQuantile, RejectsBoundaries)
{
    EXPECT_THROW(normal_quantile(0.0), DomainError);
    EXPECT_THROW(normal_quantile(1.0), DomainError);
}

TEST(Rng, StreamsAreReproducibleAndDistinct)
{
    Rng a{1, 2, 3}, b{1, 2, 3}, c{1, 2, 4};
    for (int i = 0; i < 10; ++i) {
        const double x = a.uniform();
        EXPECT_EQ(x, b.uniform());
        EXPECT_NE(x, c.uniform());
    }
    const Rng base(9);
    Rng s1 = base.split(1), s1b = base.split(1), s2 = base.split(2);
    const double u = s1.uniform();
    EXPECT_EQ(u, s1b.uniform());
    EXPECT_NE(u, s2.uniform());
}
