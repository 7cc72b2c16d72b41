// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "lcrec/lcrec.hpp"

using namespace lcrec;

namespace {

int threads()
{
    if (const char* env = std::getenv("LCREC_THREADS")) return std::max(1, std::atoi(env));
    return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

struct Report {
    int failed = 0;
    void line(int id, bool ok, const std::string& detail)
    {
        std::printf("criterion %d: %s  %s\n", id, ok ? "PASS" : "FAIL", detail.c_str());
        std::fflush(stdout);
        failed += !ok;
    }
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0)
{
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

void hazard_ratios(Report& rep)
{
    const double expected[3][2] = {{1.20, 1.44}, {1.50, 2.25}, {2.50, 6.25}};
    bool ok = true;
    std::ostringstream os;
    for (int p = 1; p <= 3; ++p)
        for (int k = 2; k <= 3; ++k) {
            const double hr = episode_hazard_ratio(population(p), k);
            ok = ok && std::abs(hr - expected[p - 1][k - 2]) <= 0.005;
            os << "pop" << p << ".k" << k << "=" << fmt("%.4f", hr) << ' ';
        }
    rep.line(1, ok, os.str());
}

void cox_oracle(Report& rep)
{
    // closed-form likelihood of the 3-subject instance, maximised by grid refinement
    const auto logl = [](double b) { return b - std::log(2 * std::exp(b) + 1) - std::log(1 + std::exp(b)); };
    double lo = -3, hi = 3;
    for (int pass = 0; pass < 6; ++pass) {
        double best = lo, best_v = -1e300;
        const double step = (hi - lo) / 1000;
        for (double b = lo; b <= hi; b += step)
            if (logl(b) > best_v) best_v = logl(b), best = b;
        lo = best - step, hi = best + step;
    }
    const double oracle = 0.5 * (lo + hi);
    const std::vector<RiskRow> rows{{1, 0, 1, 1, {0, 1}, {1, 0, 0}}, {2, 0, 2, 1, {0, 1}, {0, 0, 0}}, {3, 0, 3, 1, {0, 1}, {1, 0, 0}}};
    CoxOptions o;
    o.fixed_theta = 0.0;
    o.covariates = {0};
    const auto fit = fit_cox_frailty(rows, 3, o);
    const bool beta_ok = std::abs(fit.beta[0] - oracle) <= 1e-4 && std::abs(fit.beta[0] + 0.34657) <= 1e-4;

    // gradient of the partial likelihood against central differences
    Rng rng(2718);
    double worst = 0.0;
    int instances = 0;
    while (instances < 100) {
        std::vector<RiskRow> micro;
        const int n = 3 + static_cast<int>(rng.below(5));
        bool any_event = false;
        for (int i = 1; i <= n; ++i) {
            const Covariates x{rng.normal(), rng.bernoulli(0.5) ? 1.0 : 0.0, rng.uniform()};
            double t = 0.0;
            for (int k = 0, m = 1 + static_cast<int>(rng.below(3)); k < m; ++k) {
                const double stop = t + 1.0 + static_cast<double>(rng.below(4));
                const int status = rng.bernoulli(0.6) ? 1 : 0;
                any_event = any_event || status;
                micro.push_back({i, t, stop, status, {static_cast<int>(rng.below(2)), 1}, x});
                t = stop;
            }
        }
        if (!any_event) continue;
        ++instances;
        Eigen::VectorXd beta(3);
        for (auto& b : beta) b = 0.5 * rng.normal();
        const auto cov = all_covariates();
        const auto g = breslow_partial_loglik(beta, Eigen::VectorXd(), micro, cov).grad_beta;
        const double h = 1e-6;
        for (int j = 0; j < 3; ++j) {
            Eigen::VectorXd bp = beta, bm = beta;
            bp[j] += h, bm[j] -= h;
            const double fd = (breslow_partial_loglik(bp, Eigen::VectorXd(), micro, cov).value -
                               breslow_partial_loglik(bm, Eigen::VectorXd(), micro, cov).value) / (2 * h);
            worst = std::max(worst, std::abs(fd - g[j]));
        }
    }
    rep.line(2, beta_ok && worst <= 1e-5,
             fmt("beta_hat=%.6f oracle=%.6f max|grad-fd|=%.2e over 100 instances", fit.beta[0], oracle, worst));
}

void distribution_reductions(Report& rep)
{
    double worst = 0.0;
    for (double lambda : {0.5, 2.0, 5.0})
        for (int y = 0; y <= 30; ++y)
            worst = std::max(worst, std::abs(com_poisson_pmf({lambda, 1.0}, y) -
                                             std::exp(y * std::log(lambda) - lambda - std::lgamma(y + 1.0))));
    for (double lambda : {0.1, 0.5, 0.9})
        for (int y = 0; y <= 30; ++y)
            worst = std::max(worst, std::abs(com_poisson_pmf({lambda, 0.0}, y) - (1 - lambda) * std::pow(lambda, y)));

    const int n = 100000;
    const auto z_score = [&](ComPoissonParams p, double mean, double var, std::uint64_t seed) {
        Rng rng(seed);
        double s = 0.0;
        for (int i = 0; i < n; ++i) s += com_poisson_sample(p, rng);
        return std::abs(s / n - mean) / std::sqrt(var / n);
    };
    const double z_pois = z_score({2.0, 1.0}, 2.0, 2.0, 31);
    const double z_geom = z_score({0.5, 0.0}, 1.0, 2.0, 32);
    rep.line(3, worst <= 1e-12 && z_pois <= 3 && z_geom <= 3,
             fmt("max pmf diff=%.2e  sampler |z| poisson=%.2f geometric=%.2f", worst, z_pois, z_geom));
}

void rubin(Report& rep)
{
    Rng rng(77);
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const int m = 2 + static_cast<int>(rng.below(9));
        std::vector<Eigen::VectorXd> est, var;
        for (int l = 0; l < m; ++l) {
            est.push_back(Eigen::VectorXd::NullaryExpr(3, [&] { return rng.normal(); }));
            var.push_back(Eigen::VectorXd::NullaryExpr(3, [&] { return rng.uniform(0.01, 1.0); }));
        }
        const auto p = pool_rubin(est, var);
        for (int j = 0; j < 3; ++j) {
            double qbar = 0, w = 0, b = 0;
            for (int l = 0; l < m; ++l) qbar += est[l][j], w += var[l][j];
            qbar /= m, w /= m;
            for (int l = 0; l < m; ++l) b += (est[l][j] - qbar) * (est[l][j] - qbar);
            b /= m - 1;
            const double t = w + (1.0 + 1.0 / m) * b;
            worst = std::max(worst, std::abs(p.total[j] - t) / t);
        }
    }
    Eigen::VectorXd v(1);
    v << 0.01;
    const auto hand = pool_rubin({Eigen::VectorXd::Constant(1, 0.9), Eigen::VectorXd::Constant(1, 1.0),
                                  Eigen::VectorXd::Constant(1, 1.1)},
                                 {v, v, v});
    rep.line(4, worst <= 1e-14 && std::abs(hand.df[0] - 6.125) <= 8 * std::numeric_limits<double>::epsilon() * 6.125,
             fmt("max rel |T - (W+(1+1/m)B)|=%.1e  hand example df=%.15g T=%.6f", worst, hand.df[0], hand.total[0]));
}

ScenarioSummary run_cell(const ScenarioConfig& cfg, const char* label)
{
    const auto t0 = std::chrono::steady_clock::now();
    const auto results = run_replicates(cfg, threads());
    const auto summary = summarize(results, cfg.population.beta, cfg.models);
    std::printf("  [%s: R=%d, %.0f s]\n", label, cfg.replicates,
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    for (const auto& ms : summary.models) {
        std::printf("    %-12s ok=%d failed=%d", std::string(to_string(ms.model)).c_str(), ms.replicates, ms.failures);
        for (const auto& c : ms.coefficients) std::printf("  rb=%6.2f%% cov=%5.1f%%", c.relative_bias, c.coverage);
        std::printf("\n");
    }
    std::fflush(stdout);
    return summary;
}

ScenarioConfig cell(int pop, double prop, int R, std::vector<Model> models)
{
    ScenarioConfig c;
    c.population = population(pop);
    c.n = 1000;
    c.follow_up_days = 5 * kDaysPerYear;
    c.max_prior_days = 10 * kDaysPerYear;
    c.prop_prior = prop;
    c.replicates = R;
    c.m_imputations = 5;
    c.seed = 20240601;
    c.models = std::move(models);
    return c;
}

void no_censoring(Report& rep)
{
    const auto cfg = cell(1, 0.0, 100, {Model::ShfmiCp});
    const auto s = run_cell(cfg, "pop 1, prop_prior 0");
    const auto* cp = s.find(Model::ShfmiCp);
    bool ok = cp && cp->replicates == cfg.replicates;
    std::ostringstream os;
    if (cp)
        for (const auto& c : cp->coefficients) {
            const double z = std::abs(c.mean_estimate - c.truth) / c.mc_se;
            ok = ok && z <= 3.0 && c.coverage >= 90.0 && c.coverage <= 98.0;
            os << fmt("mean=%.4f |z|=%.2f cov=%.1f%%  ", c.mean_estimate, z, c.coverage);
        }
    rep.line(5, ok, os.str());
}

void headline_and_ordering(Report& rep)
{
    const std::vector<Model> all{Model::ShfmiCp, Model::ShfmiGt, Model::ChfmStrata};
    const auto s3 = run_cell(cell(3, 0.5, 200, all), "pop 3, prop_prior 0.5");
    {
        const auto* cp = s3.find(Model::ShfmiCp);
        const auto* ch = s3.find(Model::ChfmStrata);
        bool chfm_violates = false, cp_ok = cp && cp->replicates > 0;
        for (const auto& c : ch->coefficients)
            chfm_violates = chfm_violates || std::abs(c.relative_bias) >= kBiasThreshold || c.coverage < kCoverageLow ||
                            c.coverage > kCoverageHigh;
        chfm_violates = chfm_violates && ch->replicates > 0;
        double worst = 0.0;
        for (const auto& c : cp->coefficients) worst = std::max(worst, std::abs(c.relative_bias));
        cp_ok = cp_ok && worst < kBiasThreshold + 2.0;
        rep.line(6, chfm_violates && cp_ok,
                 std::string("CHFM.strata violates=") + (chfm_violates ? "yes" : "no") +
                     fmt("  SHFMI.CP max|rb|=%.2f%% (limit 12%%)", worst));
    }
    const auto s1 = run_cell(cell(1, 0.5, 200, {Model::ShfmiCp, Model::ShfmiGt}), "pop 1, prop_prior 0.5");
    const auto* cp = s1.find(Model::ShfmiCp);
    const auto* gt = s1.find(Model::ShfmiGt);
    const double rb_cp = std::abs(cp->coefficients[2].relative_bias);
    const double rb_gt = std::abs(gt->coefficients[2].relative_bias);
    rep.line(7, cp->replicates > 0 && gt->replicates > 0 && rb_gt <= rb_cp + 2.0,
             fmt("beta3 |rb| SHFMI.GT=%.2f%%  SHFMI.CP=%.2f%%", rb_gt, rb_cp));
}

void determinism(Report& rep)
{
    auto cfg = cell(2, 0.5, 4, {Model::ShfmiCp, Model::ShfmiGt, Model::ChfmStrata});
    cfg.n = 300;
    const auto csv_of = [&] {
        std::ostringstream os;
        os << kSummaryCsvHeader << '\n';
        write_summary_rows(os, cell_of(cfg), summarize(run_replicates(cfg, threads()), cfg.population.beta, cfg.models));
        return os.str();
    };
    const std::string a = csv_of(), b = csv_of();
    rep.line(8, a == b && a.size() > kSummaryCsvHeader.size() + 1,
             fmt("two runs, %.0f bytes each, identical=", static_cast<double>(a.size())) + (a == b ? "yes" : "no"));
}

}  // namespace

int main()
{
    Report rep;
    const auto guard = [&](int id, auto&& fn) {
        try {
            fn(rep);
        } catch (const std::exception& e) {
            rep.line(id, false, std::string("error: ") + e.what());
        }
    };
    guard(1, hazard_ratios);
    guard(2, cox_oracle);
    guard(3, distribution_reductions);
    guard(4, rubin);
    guard(5, no_censoring);
    try {
        headline_and_ordering(rep);
    } catch (const std::exception& e) {
        rep.line(6, false, std::string("error: ") + e.what());
        rep.line(7, false, "not run");
    }
    guard(8, determinism);
    std::printf("%d of 8 criteria failed\n", rep.failed);
    return rep.failed ? 1 : 0;
}
