#include <gtest/gtest.h>

#include "lcrec/config.hpp"

using namespace lcrec;

namespace {

// expects a ConfigError whose message contains `fragment`
void expect_error(const std::string& text, const std::string& fragment)
{
    try {
        parse_config_string(text, "t.cfg");
        ADD_FAILURE() << "no error for:\n" << text;
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
}

}  // namespace

TEST(Config, DefaultsWithoutKeys)
{
    const auto cfg = parse_config_string("");
    const auto cells = cfg.cells();
    ASSERT_EQ(cells.size(), 1u);
    EXPECT_EQ(cells[0].population.id, 1);
    EXPECT_EQ(cells[0].n, 1000);
    EXPECT_EQ(cells[0].follow_up_days, 1825);
    EXPECT_EQ(cells[0].max_prior_days, 3650);
    EXPECT_EQ(cells[0].models.size(), 3u);
}

TEST(Config, GridIsCartesianProduct)
{
    const auto cfg = parse_config_string(
        "# comment\n[grid]\npopulation = 1, 3\nfollow_up_years = 2, 5\nprop_prior = 0.1, 0.5, 1\nn = 500\n"
        "[run]\nreplicates = 20\nm_imputations = 4\nseed = 18446744073709551615\nmodels = SHFMI.GT\n");
    const auto cells = cfg.cells();
    ASSERT_EQ(cells.size(), 12u);
    EXPECT_EQ(cells.front().population.id, 1);
    EXPECT_EQ(cells.back().population.id, 3);
    EXPECT_EQ(cells[0].follow_up_days, 730);
    EXPECT_DOUBLE_EQ(cells[2].prop_prior, 1.0);
    EXPECT_EQ(cells[0].replicates, 20);
    EXPECT_EQ(cells[0].m_imputations, 4);
    EXPECT_EQ(cells[0].seed, 18446744073709551615ULL);
    EXPECT_EQ(cells[0].models, (std::vector<Model>{Model::ShfmiGt}));
}

TEST(Config, CustomPopulation)
{
    const auto cfg = parse_config_string(
        "[population]\nlaw1 = weibull 8.109 1\nlaw2 = lognormal 7.2 1.5\nlaw3 = loglogistic 6.6 0.9\n"
        "beta = 0.1, 0.2, 0.3\nfrailty_variance = 0.5\n");
    const auto c = cfg.cells().at(0);
    EXPECT_EQ(c.population.id, 0);
    EXPECT_EQ(c.population.episode_laws[1].family, Family::LogNormal);
    EXPECT_DOUBLE_EQ(c.population.episode_laws[2].ancillary, 0.9);
    EXPECT_DOUBLE_EQ(c.population.beta[2], 0.3);
    EXPECT_DOUBLE_EQ(c.population.frailty_variance, 0.5);
}

TEST(Config, ErrorsNameTheLine)
{
    expect_error("[grid]\nn = 100\nprop_prior = 1.5\n", "t.cfg:3");
    expect_error("[grid]\nn = 0\n", "t.cfg:2");
    expect_error("[grid]\n\nn = 10\nn = 20\n", "t.cfg:4: duplicate key");
    expect_error("[run]\nmodels = SHFMI.CP, cox\n", "t.cfg:2");
    expect_error("[grid]\npopulation = 9\n", "t.cfg:2");
    expect_error("[grid]\ncolour = red\n", "unknown key 'colour'");
    expect_error("[grids]\n", "unknown section");
    expect_error("n = 5\n", "outside of a section");
    expect_error("[run]\nm_imputations = 1\n", "t.cfg:2");
    expect_error("[run]\nseed = -4\n", "t.cfg:2");
    expect_error("[grid]\nn = 10.5\n", "t.cfg:2");
    expect_error("[grid]\nfollow_up_days = 100\nfollow_up_years = 2\n", "not both");
}

TEST(Config, EmptyModelListRejected)
{
    expect_error("[run]\nmodels = none\n", "model list is empty");
}

TEST(Config, PopulationSectionConflictsWithGrid)
{
    expect_error("[grid]\npopulation = 2\n[population]\nlaw1 = weibull 8 1\nlaw2 = weibull 8 1\nlaw3 = weibull 8 1\n",
                 "t.cfg:2");
    expect_error("[population]\nlaw1 = weibull 8 1\n", "missing law2");
    expect_error("[population]\nlaw1 = gamma 8 1\nlaw2 = weibull 8 1\nlaw3 = weibull 8 1\n", "t.cfg:2");
}

TEST(Config, MissingFile)
{
    EXPECT_THROW(load_config("/nonexistent/dir/x.cfg"), ConfigError);
}

TEST(Config, ShippedConfigsParse)
{
    int count = 0;
    for (const auto& entry : std::filesystem::directory_iterator(LCREC_CONFIGS)) {
        if (entry.path().extension() != ".cfg") continue;
        ++count;
        EXPECT_NO_THROW({
            const auto cfg = load_config(entry.path());
            EXPECT_FALSE(cfg.cells().empty());
        }) << entry.path();
    }
    EXPECT_GE(count, 4);
}
