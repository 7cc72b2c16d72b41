// lcrec: simulate cohorts, run scenario grids, fit external risk-set data, check criteria.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <set>
#include <thread>

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "lcrec/lcrec.hpp"

namespace fs = std::filesystem;
using namespace lcrec;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4 };

std::string read_text(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + p.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::string hex(const unsigned char* d, unsigned n)
{
    static const char* digits = "0123456789abcdef";
    std::string s;
    for (unsigned i = 0; i < n; ++i) {
        s += digits[d[i] >> 4];
        s += digits[d[i] & 15];
    }
    return s;
}

// same hash as `git hash-object`
std::string git_blob_sha1(const std::string& content)
{
    const std::string blob = "blob " + std::to_string(content.size()) + '\0' + content;
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned len = 0;
    if (EVP_Digest(blob.data(), blob.size(), md, &len, EVP_sha1(), nullptr) != 1) throw Error("SHA-1 failed");
    return hex(md, len);
}

std::string utc_now()
{
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

int default_threads()
{
    if (const char* env = std::getenv("LCREC_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v >= 1) return static_cast<int>(v);
        throw ConfigError("LCREC_THREADS must be a positive integer");
    }
    return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

/// Collects written files; the manifest itself is written last.
class Outputs {
public:
    Outputs(fs::path dir, std::string config_path, std::string command, int threads)
        : dir_(std::move(dir)), started_(utc_now())
    {
        manifest_["config_path"] = config_path;
        manifest_["output_dir"] = dir_.string();
        manifest_["threads"] = threads;
        manifest_["commands"] = nlohmann::json::array({command});
        manifest_["started_at"] = started_;
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec || !fs::is_directory(dir_)) throw Error("cannot create output directory " + dir_.string());
        if (!config_path.empty()) manifest_["config_sha1"] = git_blob_sha1(read_text(config_path));
    }

    void write(const std::string& name, const std::string& content)
    {
        csv::write_atomic(dir_ / name, content);
        files_.push_back({{"path", name}, {"bytes", content.size()}, {"sha1", git_blob_sha1(content)}});
    }

    void finish(int exit_code)
    {
        manifest_["files"] = files_;
        manifest_["finished_at"] = utc_now();
        manifest_["exit_code"] = exit_code;
        csv::write_atomic(dir_ / "manifest.json", manifest_.dump(2) + "\n");
    }

    nlohmann::json& extra() { return manifest_; }

private:
    fs::path dir_;
    std::string started_;
    nlohmann::json manifest_;
    nlohmann::json files_ = nlohmann::json::array();
};

std::string cell_tag(const ScenarioConfig& c)
{
    std::ostringstream os;
    os << "pop" << c.population.id << "_fu" << c.follow_up_days << "_mp" << c.max_prior_days << "_n" << c.n << "_pp"
       << csv::num(c.prop_prior);
    return os.str();
}

std::string join_args(int argc, char** argv)
{
    std::string s;
    for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
    return s;
}

// ---------------------------------------------------------------------------

int cmd_simulate(const std::string& config_path, const fs::path& out, int threads, const std::string& command)
{
    const RunConfig cfg = load_config(config_path);
    Outputs outputs(out, config_path, command, threads);
    for (const auto& cell : cfg.cells()) {
        const std::string tag = cell_tag(cell);
        std::vector<Cohort> cohorts(static_cast<std::size_t>(cell.replicates));
        {
            std::atomic<int> next{0};
            const auto worker = [&] {
                for (int r = next++; r < cell.replicates; r = next++) cohorts[static_cast<std::size_t>(r)] = generate_cohort(cell, r);
            };
            std::vector<std::jthread> pool;
            for (int t = 1; t < std::min(threads, cell.replicates); ++t) pool.emplace_back(worker);
            worker();
        }
        for (int r = 0; r < cell.replicates; ++r) {
            const auto& cohort = cohorts[static_cast<std::size_t>(r)];
            std::ostringstream episodes, subjects;
            write_cohort_csv(episodes, cohort);
            subjects << "subject_id,x1,x2,x3,prior_risk_days,true_prior_count,observed_events\n";
            for (const auto& s : cohort.subjects)
                subjects << s.id << ',' << csv::num(s.x[0]) << ',' << csv::num(s.x[1]) << ',' << csv::num(s.x[2]) << ','
                         << csv::num(s.prior_risk_days) << ',' << s.true_prior_count << ',' << s.observed_events.size()
                         << '\n';
            char rep[16];
            std::snprintf(rep, sizeof rep, "r%04d", r);
            outputs.write("cohort_" + tag + "_" + rep + ".csv", episodes.str());
            outputs.write("subjects_" + tag + "_" + rep + ".csv", subjects.str());
        }
    }
    outputs.finish(kOk);
    return kOk;
}

int cmd_run(const std::string& config_path, const fs::path& out, int threads, const std::string& command, bool quiet)
{
    const RunConfig cfg = load_config(config_path);
    Outputs outputs(out, config_path, command, threads);

    std::ostringstream summary_csv, criteria_csv, fits_csv;
    summary_csv << kSummaryCsvHeader << '\n';
    criteria_csv << kCriteriaCsvHeader << '\n';
    fits_csv << "population,follow_up_days,max_prior_days,prop_prior,n,replicate," << kFitCsvHeader << ",error\n";

    // figures group cells by everything except prop_prior
    std::map<std::tuple<int, int, int, int>, svg::FigureData> figures;
    bool partial_failure = false;
    nlohmann::json failed_cells = nlohmann::json::array();
    const auto cells = cfg.cells();

    for (std::size_t ci = 0; ci < cells.size(); ++ci) {
        const auto& cell = cells[ci];
        const Cell id = cell_of(cell);
        if (!quiet) std::cerr << "[" << ci + 1 << "/" << cells.size() << "] " << cell_tag(cell) << " R=" << cell.replicates << std::flush;
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<ReplicateResult> results;
        try {
            results = run_replicates(cell, threads);
        } catch (const Error& e) {
            partial_failure = true;
            failed_cells.push_back({{"cell", cell_tag(cell)}, {"error", e.what()}});
            if (!quiet) std::cerr << " failed: " << e.what() << '\n';
            continue;
        }
        const auto summary = summarize(results, cell.population.beta, cell.models);
        const auto flags = check_criteria(summary);
        write_summary_rows(summary_csv, id, summary);
        write_criteria_rows(criteria_csv, id, flags);
        for (const auto& ms : summary.models)
            if (ms.unreliable || ms.replicates == 0) {
                partial_failure = true;
                failed_cells.push_back({{"cell", cell_tag(cell)},
                                        {"model", std::string(to_string(ms.model))},
                                        {"failures", ms.failures}});
            }
        for (const auto& r : results)
            for (const auto& o : r.models) {
                const std::string prefix = std::to_string(id.population) + ',' + std::to_string(id.follow_up_days) + ',' +
                                           std::to_string(id.max_prior_days) + ',' + csv::num(id.prop_prior) + ',' +
                                           std::to_string(id.n) + ',' + std::to_string(r.replicate) + ',';
                if (!o.error.empty()) {
                    std::string msg = o.error;
                    std::replace(msg.begin(), msg.end(), ',', ';');
                    std::replace(msg.begin(), msg.end(), '\n', ' ');
                    fits_csv << prefix << to_string(o.model) << ",NA,NA,NA,NA,NA,NA,NA,NA,NA,0," << msg << '\n';
                    continue;
                }
                for (std::size_t l = 0; l < o.fits.size(); ++l)
                    fits_csv << prefix
                             << fit_csv_row(to_string(o.model), o.model == Model::ChfmStrata ? 0 : static_cast<int>(l) + 1,
                                            o.fits[l], all_covariates())
                             << ",\n";
            }
        auto& fig = figures[{id.population, id.follow_up_days, id.max_prior_days, id.n}];
        if (fig.title.empty()) {
            std::ostringstream title;
            title << "Population " << (id.population ? std::to_string(id.population) : std::string("custom"))
                  << ", follow-up " << csv::num(id.follow_up_days / double(kDaysPerYear)) << " y, max prior "
                  << csv::num(id.max_prior_days / double(kDaysPerYear)) << " y, n = " << id.n;
            fig.title = title.str();
            fig.models = cell.models;
        }
        fig.by_prop[id.prop_prior] = summary;
        if (!quiet)
            std::cerr << " done in " << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()
                      << " s\n";
    }

    outputs.write("summary.csv", summary_csv.str());
    outputs.write("criteria.csv", criteria_csv.str());
    outputs.write("fits.csv", fits_csv.str());
    for (const auto& [key, fig] : figures) {
        const auto& [pop, fu, mp, n] = key;
        std::ostringstream name;
        name << "figure_pop" << pop << "_fu" << fu << "_mp" << mp << "_n" << n << ".svg";
        outputs.write(name.str(), svg::render(fig));
    }
    outputs.extra()["failed"] = failed_cells;
    const int code = partial_failure ? kNumeric : kOk;
    outputs.finish(code);
    return code;
}

std::vector<int> parse_covariates(const std::vector<std::string>& names)
{
    if (names.empty()) return all_covariates();
    std::vector<int> out;
    for (const auto& n : names) {
        if (n != "x1" && n != "x2" && n != "x3") throw ConfigError("unknown covariate '" + n + "' (expected x1, x2 or x3)");
        const int c = n[1] - '1';
        if (std::find(out.begin(), out.end(), c) != out.end()) throw ConfigError("covariate '" + n + "' listed twice");
        out.push_back(c);
    }
    std::sort(out.begin(), out.end());
    return out;
}

int cmd_fit(const fs::path& data, const std::string& model_name, const std::optional<double>& theta,
            const std::vector<std::string>& covariates, const std::string& out_path)
{
    const Model model = parse_model(model_name);
    CoxOptions options;
    options.fixed_theta = theta;
    options.covariates = parse_covariates(covariates);
    const auto table = read_riskset_csv(csv::read_file(data), model == Model::ShfmiGt);

    std::ostringstream os;
    os << kFitCsvHeader << '\n';
    std::vector<CoxFit> fits;
    for (const auto& [imp, rows] : table.by_imputation) {
        std::set<int> ids;
        for (const auto& r : rows) ids.insert(r.subject_id);
        fits.push_back(fit_cox_frailty(rows, static_cast<int>(ids.size()), options));
        os << fit_csv_row(model_name, imp, fits.back(), options.covariates) << '\n';
    }
    if (fits.size() > 1) {
        const auto pooled = pool_rubin(fits);
        std::string beta[3] = {"NA", "NA", "NA"}, se[3] = {"NA", "NA", "NA"};
        for (std::size_t j = 0; j < options.covariates.size(); ++j) {
            const auto c = static_cast<std::size_t>(options.covariates[j]);
            beta[c] = csv::num(pooled.qbar[static_cast<Eigen::Index>(j)]);
            se[c] = csv::num(std::sqrt(pooled.total[static_cast<Eigen::Index>(j)]));
        }
        os << model_name << ",pooled";
        for (const auto& b : beta) os << ',' << b;
        for (const auto& e : se) os << ',' << e;
        os << ",NA,NA,1\n";
    }
    for (const auto& f : fits)
        for (const auto& w : f.warnings) std::cerr << "warning: " << w << '\n';
    if (out_path.empty() || out_path == "-")
        std::cout << os.str();
    else
        csv::write_atomic(out_path, os.str());
    return kOk;
}

int cmd_check(const fs::path& summary_path, const std::string& out_path)
{
    const auto cells = read_summary_csv(csv::read_file(summary_path));
    std::ostringstream os;
    os << kCriteriaCsvHeader << '\n';
    for (const auto& [cell, summary] : cells) write_criteria_rows(os, cell, check_criteria(summary));
    if (out_path.empty() || out_path == "-")
        std::cout << os.str();
    else
        csv::write_atomic(out_path, os.str());
    return kOk;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Recurrent-event simulation with left-censored prior episode counts"};
    app.require_subcommand(1);
    const std::string command = join_args(argc, argv);

    std::string config_path, out_dir, data_path, model_name = "SHFMI.CP", out_file;
    int threads = 0;
    std::optional<double> theta;
    std::vector<std::string> covariate_names;
    bool quiet = false;

    auto* sim = app.add_subcommand("simulate", "Write simulated cohorts (one CSV pair per replicate)");
    sim->add_option("-c,--config", config_path, "Scenario config file")->required();
    sim->add_option("-o,--out", out_dir, "Output directory")->required();
    sim->add_option("-t,--threads", threads, "Worker threads (default: LCREC_THREADS or all cores)")->check(CLI::PositiveNumber);

    auto* run = app.add_subcommand("run", "Run the scenario grid and write summaries and figures");
    run->add_option("-c,--config", config_path, "Scenario config file")->required();
    run->add_option("-o,--out", out_dir, "Output directory")->required();
    run->add_option("-t,--threads", threads, "Worker threads (default: LCREC_THREADS or all cores)")->check(CLI::PositiveNumber);
    run->add_flag("-q,--quiet", quiet, "No progress output");

    auto* fit = app.add_subcommand("fit", "Fit the frailty model to a risk-set CSV");
    fit->add_option("-d,--data", data_path, "CSV: id,start,stop,status,stratum,x1,x2,x3[,imputation]")->required();
    fit->add_option("-m,--model", model_name, "SHFMI.CP, SHFMI.GT or CHFM.strata (GT expects gap-time rows)");
    fit->add_option("--covariates", covariate_names, "Covariates to include (default: x1 x2 x3)")->delimiter(',');
    fit->add_option("--theta", theta, "Fix the frailty variance instead of estimating it")->check(CLI::NonNegativeNumber);
    fit->add_option("-o,--out", out_file, "Output CSV (default: stdout)");

    auto* check = app.add_subcommand("check", "Criteria flags from an existing summary CSV");
    check->add_option("-s,--summary", data_path, "summary.csv written by `run`")->required();
    check->add_option("-o,--out", out_file, "Output CSV (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    try {
        if (threads == 0 && (*sim || *run)) threads = default_threads();
        if (*sim) return cmd_simulate(config_path, out_dir, threads, command);
        if (*run) return cmd_run(config_path, out_dir, threads, command, quiet);
        if (*fit) return cmd_fit(data_path, model_name, theta, covariate_names, out_file);
        if (*check) return cmd_check(data_path, out_file);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kNumeric;
    } catch (const PoolingError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailure;
    }
    return kFailure;
}
