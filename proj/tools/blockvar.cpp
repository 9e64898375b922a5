// blockvar: analyze blocked/matched-pairs experiments, run simulation
// studies, and compare blocked vs complete randomization.
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "blockvar/data.hpp"
#include "blockvar/estimators.hpp"
#include "blockvar/oracle.hpp"
#include "blockvar/rng.hpp"
#include "blockvar/simulate.hpp"
#include "json.hpp"

using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitIo = 1;
constexpr int kExitValidation = 2;
constexpr int kExitAllFailed = 3;

std::string fmt12(double x) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.12g", x);
    return buf;
}

// Round to 12 significant digits so serialized JSON is stable.
double round12(double x) { return std::strtod(fmt12(x).c_str(), nullptr); }

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::ios_base::failure("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<blockvar::EstimatorId> parse_estimator_list(const std::string& csv) {
    std::vector<blockvar::EstimatorId> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        auto id = blockvar::estimator_from_string(item);
        if (!id) throw blockvar::ValidationError("unknown estimator '" + item + "'");
        out.push_back(*id);
    }
    if (out.empty()) throw blockvar::ValidationError("at least one estimator is required");
    return out;
}

// ---------------------------------------------------------------- analyze

int cmd_analyze(const std::string& input, const std::string& estimator_csv, double ci_level,
                bool has_ci, const std::string& format) {
    std::vector<blockvar::EstimatorId> ids = parse_estimator_list(estimator_csv);
    std::ifstream in(input, std::ios::binary);
    if (!in) {
        std::cerr << "cannot open file: " << input << "\n";
        return kExitIo;
    }
    blockvar::ExperimentTable table = blockvar::parse_experiment_csv(in);
    blockvar::ExperimentSummary summary = blockvar::summarize(table);

    if (has_ci && (ci_level <= 0.0 || ci_level >= 1.0)) {
        throw blockvar::ValidationError("CI level must be in (0,1)");
    }
    double z = has_ci ? blockvar::inv_norm_cdf((1.0 + ci_level) / 2.0) : 0.0;

    json out;
    out["estimate"] = round12(blockvar::tau_hat_blk(summary));
    json per;
    int succeeded = 0;
    for (auto id : ids) {
        json entry;
        try {
            blockvar::EstimateReport rep = blockvar::estimate(table, summary, id);
            entry["estimate"] = round12(rep.estimate);
            entry["variance"] = round12(*rep.variance_estimate);
            entry["se"] = round12(*rep.se);
            entry["warnings"] = rep.warnings;
            if (has_ci) {
                entry["ci"] = {{"level", round12(ci_level)},
                               {"lower", round12(rep.estimate - z * *rep.se)},
                               {"upper", round12(rep.estimate + z * *rep.se)}};
            }
            ++succeeded;
        } catch (const blockvar::ValidationError& e) {
            entry["error"] = e.what();
        }
        per[blockvar::to_string(id)] = entry;
    }
    out["per_estimator"] = per;
    json blocks = json::array();
    for (const auto& b : summary.blocks) {
        blocks.push_back({{"block", b.block_id},
                          {"n_k", b.n_k},
                          {"n_tk", b.n_tk},
                          {"n_ck", b.n_ck},
                          {"mean_t", round12(b.mean_t)},
                          {"mean_c", round12(b.mean_c)},
                          {"tau_hat", round12(b.tau_hat_k)},
                          {"class", b.cls == blockvar::BlockClass::big ? "big" : "small"}});
    }
    out["block_table"] = blocks;

    if (format == "json") {
        std::cout << out.dump(2) << "\n";
    } else {
        std::cout << "estimate (block-weighted): " << fmt12(out["estimate"].get<double>())
                  << "\n";
        for (auto id : ids) {
            const json& e = per[blockvar::to_string(id)];
            std::cout << blockvar::to_string(id) << ": ";
            if (e.contains("error")) {
                std::cout << "error: " << e["error"].get<std::string>() << "\n";
                continue;
            }
            std::cout << "estimate " << fmt12(e["estimate"].get<double>()) << ", variance "
                      << fmt12(e["variance"].get<double>()) << ", se "
                      << fmt12(e["se"].get<double>());
            if (e.contains("ci")) {
                std::cout << ", " << fmt12(100.0 * ci_level) << "% CI ["
                          << fmt12(e["ci"]["lower"].get<double>()) << ", "
                          << fmt12(e["ci"]["upper"].get<double>()) << "]";
            }
            std::cout << "\n";
            for (const auto& w : e["warnings"]) {
                std::cout << "  warning: " << w.get<std::string>() << "\n";
            }
        }
        std::cout << "blocks:\n";
        for (const auto& b : blocks) {
            std::cout << "  " << b["block"].get<std::string>() << " n=" << b["n_k"].get<int>()
                      << " n_t=" << b["n_tk"].get<int>() << " tau_hat="
                      << fmt12(b["tau_hat"].get<double>()) << " ("
                      << b["class"].get<std::string>() << ")\n";
        }
    }
    return succeeded > 0 ? kExitOk : kExitAllFailed;
}

// --------------------------------------------------------------- simulate

template <typename T>
T config_field(const json& cfg, const std::string& name) {
    if (!cfg.contains(name)) {
        throw blockvar::ValidationError("missing config field '" + name + "'");
    }
    try {
        return cfg.at(name).get<T>();
    } catch (const json::exception&) {
        throw blockvar::ValidationError("invalid config field '" + name + "'");
    }
}

template <typename T>
T config_field_or(const json& cfg, const std::string& name, T fallback) {
    if (!cfg.contains(name)) return fallback;
    try {
        return cfg.at(name).get<T>();
    } catch (const json::exception&) {
        throw blockvar::ValidationError("invalid config field '" + name + "'");
    }
}

blockvar::MCResult run_simulation(const json& cfg, std::uint64_t seed, int threads) {
    std::vector<blockvar::EstimatorId> ids;
    if (cfg.contains("estimators")) {
        for (const auto& name : config_field<std::vector<std::string>>(cfg, "estimators")) {
            auto id = blockvar::estimator_from_string(name);
            if (!id) throw blockvar::ValidationError("invalid config field 'estimators'");
            ids.push_back(*id);
        }
        if (ids.empty()) throw blockvar::ValidationError("invalid config field 'estimators'");
    } else {
        ids = blockvar::all_estimators();
    }
    long long reps = config_field_or<long long>(cfg, "reps", 5000);
    if (reps < 1) throw blockvar::ValidationError("invalid config field 'reps'");
    std::string framework = config_field_or<std::string>(cfg, "framework", "finite");

    if (framework == "finite") {
        blockvar::DGPConfig dgp;
        dgp.K = config_field<int>(cfg, "K");
        dgp.sizes = config_field<std::vector<int>>(cfg, "sizes");
        dgp.n_tk = config_field<std::vector<int>>(cfg, "n_t");
        dgp.rho = config_field<double>(cfg, "rho");
        dgp.a = config_field<double>(cfg, "a");
        dgp.b = config_field<double>(cfg, "b");
        dgp.base_effect = config_field_or<double>(cfg, "base_effect", 5.0);
        dgp.seed = seed;
        std::string mode = config_field_or<std::string>(cfg, "mode", "sampled");
        if (mode != "sampled" && mode != "exhaustive") {
            throw blockvar::ValidationError("invalid config field 'mode'");
        }
        blockvar::ScienceTable science = blockvar::generate_dgp(dgp);
        blockvar::Design design = blockvar::design_for_dgp(dgp);
        return blockvar::monte_carlo_study(
            science, design, ids, reps, seed,
            mode == "sampled" ? blockvar::MCMode::sampled : blockvar::MCMode::exhaustive,
            threads);
    }

    json params = config_field_or<json>(cfg, "framework_params", json::object());
    long long r_inner = config_field_or<long long>(params, "r_inner", 1);
    blockvar::SuperpopInputs inputs;
    if (framework == "m1") {
        if (!params.contains("strata")) {
            throw blockvar::ValidationError("missing config field 'framework_params.strata'");
        }
        inputs.framework = blockvar::Framework::m1;
        inputs.m1 = blockvar::parse_strata_json(params.at("strata").dump());
    } else if (framework == "srs") {
        inputs.framework = blockvar::Framework::srs;
        inputs.srs.sizes = config_field<std::vector<int>>(cfg, "sizes");
        inputs.srs.n_tk = config_field<std::vector<int>>(cfg, "n_t");
        inputs.srs.rho = config_field<double>(cfg, "rho");
        inputs.srs.base_effect = config_field_or<double>(cfg, "base_effect", 5.0);
        inputs.srs.slope_y0 = config_field_or<double>(params, "slope_y0", 1.0);
        inputs.srs.slope_tau = config_field_or<double>(params, "slope_tau", 0.0);
    } else if (framework == "m2") {
        inputs.framework = blockvar::Framework::m2;
        inputs.m2.K = config_field<int>(params, "K");
        if (!params.contains("pool") || !params.at("pool").is_array()) {
            throw blockvar::ValidationError("invalid config field 'framework_params.pool'");
        }
        for (const auto& cand : params.at("pool")) {
            blockvar::SamplingFrame::Candidate c;
            c.y0 = config_field<std::vector<double>>(cand, "y0");
            c.y1 = config_field<std::vector<double>>(cand, "y1");
            c.n_tk = config_field_or<int>(cand, "n_tk", 1);
            inputs.m2.pool.push_back(std::move(c));
        }
    } else {
        throw blockvar::ValidationError("invalid config field 'framework'");
    }
    return blockvar::superpopulation_study(inputs, ids, reps, r_inner, seed, threads);
}

int cmd_simulate(const std::string& config_path, const std::string& out_path,
                 std::optional<std::uint64_t> seed_flag, int threads) {
    std::string text;
    try {
        text = read_file(config_path);
    } catch (const std::ios_base::failure& e) {
        std::cerr << e.what() << "\n";
        return kExitIo;
    }
    json cfg;
    try {
        cfg = json::parse(text);
    } catch (const json::exception& e) {
        throw blockvar::ParseError(std::string("invalid config JSON: ") + e.what());
    }
    std::uint64_t seed =
        seed_flag ? *seed_flag : config_field_or<std::uint64_t>(cfg, "seed", 0);
    blockvar::MCResult res = run_simulation(cfg, seed, threads);

    std::ostringstream out;
    out << "estimator,mean_tau,var_tau,mean_vhat,rel_bias,var_vhat,mc_se\n";
    for (const auto& st : res.estimators) {
        out << blockvar::to_string(st.id) << ',';
        if (st.skipped) {
            out << "nan,nan,nan,nan,nan,nan\n";
            continue;
        }
        out << fmt12(st.mean_point) << ',' << fmt12(st.var_point) << ',' << fmt12(st.mean_vhat)
            << ',' << fmt12(st.rel_bias) << ',' << fmt12(st.var_vhat) << ',' << fmt12(st.mc_se)
            << '\n';
    }
    std::ofstream f(out_path, std::ios::binary);
    if (!f) {
        std::cerr << "cannot open file: " << out_path << "\n";
        return kExitIo;
    }
    f << out.str();
    for (const auto& st : res.estimators) {
        for (const auto& w : st.warnings) {
            std::cerr << blockvar::to_string(st.id) << ": " << w << "\n";
        }
    }
    return kExitOk;
}

// ---------------------------------------------------------------- compare

// Design CSV: header `block,n_t`, one row per block.
std::map<std::string, int> parse_design_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw blockvar::ParseError("empty design file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "block,n_t") {
        throw blockvar::ParseError("expected header 'block,n_t', line 1");
    }
    std::map<std::string, int> out;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto comma = line.find(',');
        if (comma == std::string::npos) {
            throw blockvar::ParseError("expected two fields, line " + std::to_string(lineno));
        }
        std::string block = line.substr(0, comma);
        int n_t = 0;
        try {
            n_t = std::stoi(line.substr(comma + 1));
        } catch (const std::exception&) {
            throw blockvar::ParseError("non-numeric n_t, line " + std::to_string(lineno));
        }
        if (!out.emplace(block, n_t).second) {
            throw blockvar::ValidationError("duplicate block in design: " + block);
        }
    }
    return out;
}

int cmd_compare(const std::string& framework, const std::string& science_path,
                const std::string& design_path, const std::string& strata_path, double p_cr,
                bool has_p_cr) {
    json out;
    out["framework"] = framework;
    if (framework == "finite") {
        if (science_path.empty() || design_path.empty()) {
            throw blockvar::ValidationError(
                "finite framework requires --science and --design");
        }
        std::ifstream sin(science_path, std::ios::binary);
        if (!sin) {
            std::cerr << "cannot open file: " << science_path << "\n";
            return kExitIo;
        }
        blockvar::ScienceTable science =
            blockvar::ScienceTable::from_units(blockvar::parse_science_csv(sin));
        std::ifstream din(design_path, std::ios::binary);
        if (!din) {
            std::cerr << "cannot open file: " << design_path << "\n";
            return kExitIo;
        }
        std::map<std::string, int> treated = parse_design_csv(din);
        std::vector<int> n_treated;
        for (const auto& b : science.blocks) {
            auto it = treated.find(b.block_id);
            if (it == treated.end()) {
                throw blockvar::ValidationError("design missing block " + b.block_id);
            }
            n_treated.push_back(it->second);
        }
        if (treated.size() != science.blocks.size()) {
            throw blockvar::ValidationError("design has blocks absent from the science table");
        }
        blockvar::Design design = blockvar::Design::for_science(science, n_treated);
        out["var_cr"] =
            round12(blockvar::true_var_finite(science, design, blockvar::Mechanism::complete));
        out["var_blk"] =
            round12(blockvar::true_var_finite(science, design, blockvar::Mechanism::blocked));
        out["difference"] =
            round12(out["var_cr"].get<double>() - out["var_blk"].get<double>());
        if (design.equal_proportions()) {
            blockvar::DesignComparison cmp =
                blockvar::compare_designs_finite_detail(science, design);
            out["decomposition"] = {{"between_term", round12(cmp.between_term)},
                                    {"within_term", round12(cmp.within_term)}};
            out["ignore_blocking_bias"] =
                round12(blockvar::ignore_blocking_bias_finite(science, design));
        } else {
            out["note"] =
                "unequal treated proportions: decomposition and ignoring-blocking bias need "
                "p_k constant";
        }
    } else if (framework == "m1") {
        if (strata_path.empty()) {
            throw blockvar::ValidationError("m1 framework requires --strata");
        }
        std::string text;
        try {
            text = read_file(strata_path);
        } catch (const std::ios_base::failure& e) {
            std::cerr << e.what() << "\n";
            return kExitIo;
        }
        blockvar::StrataPopulation pop = blockvar::parse_strata_json(text);
        double var_blk = blockvar::true_var_m1(pop);
        out["var_blk"] = round12(var_blk);
        if (has_p_cr) {
            blockvar::UnequalComparison cmp = blockvar::compare_designs_unequal(pop, p_cr);
            out["difference"] = round12(cmp.total);
            out["var_cr"] = round12(var_blk + cmp.total);
            out["decomposition"] = {{"between_term", round12(cmp.between_term)},
                                    {"penalty_term", round12(cmp.penalty_term)}};
        } else {
            double diff = blockvar::compare_designs_m1(pop);
            out["difference"] = round12(diff);
            out["var_cr"] = round12(var_blk + diff);
            out["decomposition"] = {{"between_term", round12(diff)}, {"penalty_term", 0.0}};
            out["difference_nonnegative"] = diff >= 0.0;
        }
        if (pop.equal_proportions()) {
            out["ignore_blocking_bias"] = round12(blockvar::ignore_blocking_bias_m1(pop));
        }
    } else {
        throw blockvar::ValidationError("framework must be 'finite' or 'm1'");
    }
    std::cout << out.dump(2) << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Design-based variance estimation for blocked and matched-pairs experiments"};
    app.require_subcommand(1);

    auto* analyze = app.add_subcommand("analyze", "Analyze an experiment CSV");
    std::string input, estimator_csv, format = "json";
    double ci_level = 0.95;
    analyze->add_option("--input", input, "experiment CSV (unit_id,block,z,y)")->required();
    analyze->add_option("--estimator", estimator_csv, "comma-separated estimator ids")
        ->required();
    auto* ci_opt = analyze->add_option("--ci", ci_level, "normal CI level, e.g. 0.95");
    analyze->add_option("--format", format, "json or text")
        ->check(CLI::IsMember({"json", "text"}));

    auto* simulate = app.add_subcommand("simulate", "Run a Monte Carlo study");
    std::string config_path, out_path;
    std::uint64_t seed_val = 0;
    int threads = 0;
    simulate->add_option("--config", config_path, "simulation config JSON")->required();
    simulate->add_option("--out", out_path, "results CSV path")->required();
    auto* seed_opt = simulate->add_option("--seed", seed_val, "override the config seed");
    simulate->add_option("--threads", threads, "worker threads (0 = default)");

    auto* compare = app.add_subcommand("compare", "Compare blocked vs complete randomization");
    std::string framework, science_path, design_path, strata_path;
    double p_cr = 0.5;
    compare->add_option("--framework", framework, "finite or m1")->required();
    compare->add_option("--science", science_path, "science CSV (block,y0,y1)");
    compare->add_option("--design", design_path, "design CSV (block,n_t)");
    compare->add_option("--strata", strata_path, "strata JSON");
    auto* pcr_opt = compare->add_option("--p-cr", p_cr,
                                        "overall treated proportion for the comparison");

    CLI11_PARSE(app, argc, argv);

    if (threads <= 0) {
        if (const char* env = std::getenv("BLOCKVAR_THREADS")) threads = std::atoi(env);
    }

    try {
        if (app.got_subcommand(analyze)) {
            return cmd_analyze(input, estimator_csv, ci_level, ci_opt->count() > 0, format);
        }
        if (app.got_subcommand(simulate)) {
            std::optional<std::uint64_t> seed;
            if (seed_opt->count() > 0) seed = seed_val;
            return cmd_simulate(config_path, out_path, seed, threads);
        }
        return cmd_compare(framework, science_path, design_path, strata_path, p_cr,
                           pcr_opt->count() > 0);
    } catch (const blockvar::ParseError& e) {
        std::cerr << e.what() << "\n";
        return kExitValidation;
    } catch (const blockvar::ValidationError& e) {
        std::cerr << e.what() << "\n";
        return kExitValidation;
    } catch (const std::ios_base::failure& e) {
        std::cerr << e.what() << "\n";
        return kExitIo;
    }
}
