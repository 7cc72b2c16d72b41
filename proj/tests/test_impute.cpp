#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "lcrec/impute.hpp"

using namespace lcrec;

namespace {

// log-likelihood by direct summation, independent of the library series code
double brute_loglik(const std::vector<int>& y, const Eigen::MatrixXd& z, const Eigen::VectorXd& gamma, double nu)
{
    double ll = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double log_lambda = z.row(static_cast<Eigen::Index>(i)).dot(gamma);
        double zsum = 0.0;
        for (int j = 0; j < 400; ++j) zsum += std::exp(j * log_lambda - nu * std::lgamma(j + 1.0));
        ll += y[i] * log_lambda - nu * std::lgamma(y[i] + 1.0) - std::log(zsum);
    }
    return ll;
}

struct Sample {
    std::vector<int> y;
    Eigen::MatrixXd z;
};

Sample simulate(int n, const Eigen::VectorXd& gamma, double nu, std::uint64_t seed)
{
    Rng rng(seed);
    Sample s;
    s.z.resize(n, gamma.size());
    for (int i = 0; i < n; ++i) {
        s.z(i, 0) = 1.0;
        for (Eigen::Index j = 1; j < gamma.size(); ++j) s.z(i, j) = rng.bernoulli(0.5) ? 1.0 : 0.0;
        s.y.push_back(com_poisson_sample({std::exp(s.z.row(i).dot(gamma)), nu}, rng));
    }
    return s;
}

ScenarioConfig config(double prop, int n)
{
    ScenarioConfig c;
    c.population = population(2);
    c.n = n;
    c.prop_prior = prop;
    c.replicates = 1;
    c.seed = 77;
    return c;
}

}  // namespace

TEST(ComPoissonGlm, LoglikMatchesDirectSummation)
{
    Eigen::VectorXd g(2);
    g << 0.2, -0.4;
    const auto s = simulate(50, g, 0.8, 1);
    EXPECT_NEAR(com_poisson_glm_loglik(s.y, s.z, g, std::log(0.8)), brute_loglik(s.y, s.z, g, 0.8), 1e-8);
}

TEST(ComPoissonGlm, FixedUnitDispersionIsPoissonRegression)
{
    // intercept only: the Poisson MLE is log(mean)
    const std::vector<int> y{0, 1, 3, 2, 0, 4, 1, 1};
    const Eigen::MatrixXd z = Eigen::MatrixXd::Ones(8, 1);
    ComPoissonOptions o;
    o.fixed_log_nu = 0.0;
    const auto fit = fit_com_poisson_glm(y, z, o);
    EXPECT_TRUE(fit.converged);
    EXPECT_NEAR(fit.gamma[0], std::log(12.0 / 8.0), 1e-8);
    // Poisson variance of log mean: 1 / sum(y)
    EXPECT_NEAR(fit.covariance(0, 0), 1.0 / 12.0, 1e-6);
    EXPECT_EQ(fit.covariance(1, 1), 0.0);
}

TEST(ComPoissonGlm, MaximumIsLocalOptimumOfDirectLikelihood)
{
    Eigen::VectorXd g(3);
    g << 0.5, 0.3, -0.2;
    const auto s = simulate(400, g, 1.6, 2);
    const auto fit = fit_com_poisson_glm(s.y, s.z);
    ASSERT_TRUE(fit.converged);
    const double nu = std::exp(fit.log_nu);
    const double best = brute_loglik(s.y, s.z, fit.gamma, nu);
    EXPECT_NEAR(fit.loglik, best, 1e-7);
    for (Eigen::Index j = 0; j < 3; ++j)
        for (double h : {-1e-3, 1e-3}) {
            Eigen::VectorXd gp = fit.gamma;
            gp[j] += h;
            EXPECT_LE(brute_loglik(s.y, s.z, gp, nu), best + 1e-9);
        }
    for (double h : {-1e-3, 1e-3}) EXPECT_LE(brute_loglik(s.y, s.z, fit.gamma, nu * std::exp(h)), best + 1e-9);
}

TEST(ComPoissonGlm, RecoversGeneratingParameters)
{
    Eigen::VectorXd g(2);
    g << 0.7, 0.4;
    const auto s = simulate(4000, g, 1.5, 3);
    const auto fit = fit_com_poisson_glm(s.y, s.z);
    ASSERT_TRUE(fit.converged);
    EXPECT_NEAR(std::exp(fit.log_nu), 1.5, 4 * std::sqrt(fit.covariance(2, 2)) * 1.5);
    EXPECT_NEAR(fit.gamma[1], 0.4, 4 * std::sqrt(fit.covariance(1, 1)));
}

TEST(ComPoissonGlm, StrongOverdispersionLandsOnGeometricBoundary)
{
    // mixture of zeros and large counts: more variance than any geometric law allows
    std::vector<int> y;
    for (int i = 0; i < 60; ++i) y.push_back(i % 3 == 0 ? 12 : 0);
    const Eigen::MatrixXd z = Eigen::MatrixXd::Ones(60, 1);
    const auto fit = fit_com_poisson_glm(y, z);
    EXPECT_TRUE(fit.converged);
    EXPECT_TRUE(fit.nu_fixed);
    EXPECT_EQ(std::exp(fit.log_nu), 0.0);
    // geometric MLE: lambda = mean / (1 + mean)
    EXPECT_NEAR(std::exp(fit.gamma[0]), 4.0 / 5.0, 1e-6);
}

TEST(ComPoissonGlm, RejectsRankDeficientDesign)
{
    const std::vector<int> y{1, 2, 0};
    Eigen::MatrixXd z(3, 2);
    z << 1, 2, 1, 2, 1, 2;
    EXPECT_THROW(fit_com_poisson_glm(y, z), SingularityError);
}

TEST(DrawParams, CentredOnEstimate)
{
    ComPoissonFit fit;
    fit.gamma = Eigen::Vector2d(0.3, -0.1);
    fit.log_nu = 0.2;
    fit.converged = true;
    fit.covariance = Eigen::Matrix3d::Identity() * 0.01;
    Rng rng(8);
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(3);
    const int n = 20000;
    for (int i = 0; i < n; ++i) sum += draw_params(fit, rng);
    EXPECT_LT((sum / n - fit.parameters()).cwiseAbs().maxCoeff(), 4 * 0.1 / std::sqrt(n));
    fit.covariance(0, 0) = -1.0;
    EXPECT_THROW(draw_params(fit, rng), NumericError);
}

TEST(PredictScores, ExposureCoefficientMode)
{
    ImputationParams p;
    p.gamma = {-7.0, 0.25, 0.5, 0.75, 1.0};
    p.log_nu = std::log(0.5);
    Subject s;
    s.x = {1, 0, 1};
    s.prior_risk_days = 2000.0;
    const auto sc = predict_scores(p, s);
    EXPECT_NEAR(sc.lambda, std::exp(-7.0 + 0.25 + 0.75 + std::log(2000.0)), 1e-12);
    EXPECT_DOUBLE_EQ(sc.nu, 0.5);
    s.prior_risk_days = 0.0;
    EXPECT_THROW(predict_scores(p, s), DomainError);
}

TEST(PredictScores, MeanScalingMode)
{
    ImputationParams p;
    p.gamma = {-0.5, 0.2, 0.0, 0.0, 0.0};
    p.log_nu = std::log(1.3);
    p.mean_scale_ref_days = 1825.0;
    Subject s;
    s.x = {1, 0, 0};
    s.prior_risk_days = 3650.0;
    const auto sc = predict_scores(p, s);
    const auto mean = [](ComPoissonParams q) {
        double z = 0, m = 0;
        for (int j = 0; j < 400; ++j) {
            const double w = std::exp(j * std::log(q.lambda) - q.nu * std::lgamma(j + 1.0));
            z += w;
            m += j * w;
        }
        return m / z;
    };
    EXPECT_NEAR(mean(sc), 2.0 * mean({std::exp(-0.3), 1.3}), 1e-8);
}

TEST(ImputationSample, UsesFreshSubjects)
{
    const auto cohort = generate_cohort(config(0.5, 400), 0);
    const auto all = observed_counts(cohort);
    const auto fresh = imputation_sample(cohort, all);
    EXPECT_EQ(fresh.size(), 200u);
    for (const auto& d : fresh) EXPECT_EQ(d.prior_risk_days, 0.0);
}

TEST(ImputationSample, FallsBackToEveryoneWhenNobodyIsFresh)
{
    const auto cohort = generate_cohort(config(1.0, 200), 0);
    EXPECT_EQ(imputation_sample(cohort, observed_counts(cohort)).size(), 200u);
}

TEST(MultipleImpute, CountsOnlyForPriorSubjects)
{
    const auto cohort = generate_cohort(config(0.5, 600), 0);
    const auto mi = multiple_impute(cohort, 5, Rng(4));
    ASSERT_TRUE(mi.fit.has_value());
    EXPECT_TRUE(mi.mean_scaled);
    EXPECT_EQ(mi.fit_sample_size, 300);
    ASSERT_EQ(mi.imputations.size(), 5u);
    bool differ = false;
    for (const auto& imp : mi.imputations) {
        ASSERT_EQ(imp.imputed_prior.size(), cohort.subjects.size());
        for (std::size_t i = 0; i < cohort.subjects.size(); ++i) {
            if (!cohort.subjects[i].previously_at_risk()) {
                EXPECT_EQ(imp.imputed_prior[i], 0);
            }
            EXPECT_GE(imp.imputed_prior[i], 0);
            EXPECT_LE(imp.imputed_prior[i], kImputedCountCap);
            differ = differ || imp.imputed_prior != mi.imputations.front().imputed_prior;
        }
    }
    EXPECT_TRUE(differ);
}

TEST(MultipleImpute, ImputedTotalsTrackTruth)
{
    const auto cohort = generate_cohort(config(0.5, 2000), 0);
    const auto mi = multiple_impute(cohort, 5, Rng(5));
    double truth = 0;
    for (const auto& s : cohort.subjects) truth += s.true_prior_count;
    for (const auto& imp : mi.imputations) {
        double total = 0;
        for (int k : imp.imputed_prior) total += k;
        EXPECT_NEAR(total / truth, 1.0, 0.35);
    }
}

TEST(MultipleImpute, ReproducibleAndNoFitWithoutPriorRisk)
{
    const auto cohort = generate_cohort(config(0.5, 300), 1);
    const auto a = multiple_impute(cohort, 3, Rng(6)), b = multiple_impute(cohort, 3, Rng(6));
    for (int l = 0; l < 3; ++l) EXPECT_EQ(a.imputations[l].imputed_prior, b.imputations[l].imputed_prior);

    const auto fresh = generate_cohort(config(0.0, 300), 1);
    const auto none = multiple_impute(fresh, 3, Rng(6));
    EXPECT_FALSE(none.fit.has_value());
    for (const auto& imp : none.imputations)
        for (int k : imp.imputed_prior) EXPECT_EQ(k, 0);
}

TEST(MultipleImpute, LongerPriorTimeGivesMoreImputedEpisodes)
{
    auto cfg = config(0.5, 10000);
    cfg.population = population(1);
    const auto cohort = generate_cohort(cfg, 0);
    const auto mi = multiple_impute(cohort, 2, Rng(9));
    double short_sum = 0, long_sum = 0;
    int short_n = 0, long_n = 0;
    for (const auto& imp : mi.imputations)
        for (std::size_t i = 0; i < cohort.subjects.size(); ++i) {
            const double days = cohort.subjects[i].prior_risk_days;
            if (days > 0 && days <= 365) short_sum += imp.imputed_prior[i], ++short_n;
            if (days >= 9 * 365) long_sum += imp.imputed_prior[i], ++long_n;
        }
    ASSERT_GT(short_n, 0);
    ASSERT_GT(long_n, 0);
    EXPECT_GT(long_sum / long_n, short_sum / short_n);
}
