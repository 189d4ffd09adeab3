#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <unordered_map>
#include <vector>

#include <CLI11.hpp>

#include "dtropt/config.hpp"
#include "dtropt/emucontrol.hpp"
#include "dtropt/posterior.hpp"
#include "dtropt/simulate.hpp"
#include "dtropt/tabular.hpp"

namespace {

using namespace dtropt;

Dataset load_data(const ConfigFile& cfg, const std::string& data_override) {
    DataSpec spec = data_spec(cfg);
    std::string path = data_override.empty() ? spec.path : data_override;
    if (path.empty())
        throw ConfigError("no dataset: set [data] path in the config or pass --data");
    return load_csv(path, spec.id_col, spec.treat_cols, spec.outcome_col);
}

void write_optima_csv(const std::vector<DrawOptimum>& optima,
                      const std::vector<std::string>& psi_names, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    for (std::size_t d = 0; d < psi_names.size(); ++d) os << (d ? "," : "") << psi_names[d];
    os << ",value\n";
    char buf[64];
    for (const auto& opt : optima) {
        for (std::size_t d = 0; d < opt.psi.size(); ++d) {
            std::snprintf(buf, sizeof buf, "%.17g", opt.psi[d]);
            os << (d ? "," : "") << buf;
        }
        std::snprintf(buf, sizeof buf, "%.17g", opt.value);
        os << "," << buf << "\n";
    }
}

int cmd_simulate(const std::string& config_path, const std::string& out,
                 long n_override, long seed_override, int confound_override) {
    ConfigFile cfg = config_path.empty() ? ConfigFile() : ConfigFile::parse_file(config_path);
    SimConfig sc = build_sim_config(cfg);
    if (n_override > 0) sc.n = static_cast<std::size_t>(n_override);
    if (seed_override >= 0) sc.seed = static_cast<std::uint64_t>(seed_override);
    if (confound_override >= 0) sc.confounded = confound_override != 0;
    Dataset data = simulate_dataset(sc);
    emit_csv(data, out);
    std::cout << "wrote " << data.n() << " patients to " << out << "\n";
    return 0;
}

int cmd_oracle(double step, const std::string& out, long n_mc, long seed) {
    OracleSurface s = oracle_surface(step, static_cast<std::uint64_t>(seed),
                                     static_cast<std::size_t>(n_mc));
    if (!out.empty()) {
        std::ofstream os(out);
        if (!os) throw IoError("cannot open '" + out + "' for writing");
        os << "psi1,psi2,value\n";
        char buf[64];
        for (std::size_t i = 0; i < s.psi1.size(); ++i)
            for (std::size_t j = 0; j < s.psi2.size(); ++j) {
                std::snprintf(buf, sizeof buf, "%g,%g,%.10g", s.psi1[i], s.psi2[j],
                              s.value[i][j]);
                os << buf << "\n";
            }
    }
    std::printf("optimum: psi=(%g, %g) value=%.6f\n", s.opt_psi1, s.opt_psi2, s.opt_value);
    return 0;
}

int cmd_analyze(const std::string& config_path, const std::string& data_override,
                const std::string& out_prefix) {
    ConfigFile cfg = ConfigFile::parse_file(config_path);
    Dataset data = load_data(cfg, data_override);
    RegimeFamily fam = build_family(cfg, data.stages());
    fam.validate_against(data);
    BayesRun run = build_bayes_run(cfg, fam, data.stages());
    PosteriorMatrix pm = run_bayes(data, fam, run);
    write_posterior_csv(pm, out_prefix + "posterior.csv");
    write_summary_csv(pm, out_prefix + "summary.csv");
    auto optima = posterior_optimum(pm, run, fam);
    write_optima_csv(optima, fam.psi_names, out_prefix + "optima.csv");
    for (const auto& f : pm.failures) std::cerr << "note: " << f << "\n";
    std::cout << "wrote " << out_prefix << "{posterior,summary,optima}.csv ("
              << pm.values.rows() << " draws)\n";
    return 0;
}

int cmd_gp_design(const std::string& config_path, const std::string& data_override,
                  const std::string& state_out) {
    ConfigFile cfg = ConfigFile::parse_file(config_path);
    Dataset data = load_data(cfg, data_override);
    RegimeFamily fam = build_family(cfg, data.stages());
    fam.validate_against(data);
    EstimatorConfig ec = build_estimator_config(cfg, data.stages());
    GpOptions gp = build_gp_options(cfg, fam);
    Eigen::MatrixXd design = build_design(cfg, fam);
    EmulationState state = design_fit(data, fam, ec, design, gp);
    save_state(state, state_out);
    std::printf("design fit: m=%zu x_max=(%g", state.m(), state.x_max(0));
    for (Eigen::Index d = 1; d < state.x_max.size(); ++d) std::printf(", %g", state.x_max(d));
    std::printf(") y_max=%.6f; state saved to %s\n", state.y_max, state_out.c_str());
    return 0;
}

int cmd_gp_sequence(const std::string& config_path, const std::string& data_override,
                    const std::string& state_in, const std::string& state_out, int additional,
                    long seed, int ei_budget, const std::string& report_out) {
    ConfigFile cfg = ConfigFile::parse_file(config_path);
    Dataset data = load_data(cfg, data_override);
    RegimeFamily fam = build_family(cfg, data.stages());
    fam.validate_against(data);
    EstimatorConfig ec = build_estimator_config(cfg, data.stages());
    EmulationState state = load_state(state_in, ec);
    state = sequence_fit(data, fam, state, additional, ei_budget,
                         static_cast<std::uint64_t>(seed));
    save_state(state, state_out);
    if (!report_out.empty()) write_convergence_csv(state, fam.psi_names, report_out);
    for (const auto& l : state.log) std::cerr << "note: " << l << "\n";
    std::printf("sequence fit: m=%zu x_max=(%g", state.m(), state.x_max(0));
    for (Eigen::Index d = 1; d < state.x_max.size(); ++d) std::printf(", %g", state.x_max(d));
    std::printf(") y_max=%.6f; state saved to %s\n", state.y_max, state_out.c_str());
    return 0;
}

int cmd_gp_infer(const std::string& config_path, const std::string& data_override,
                 const std::string& out) {
    ConfigFile cfg = ConfigFile::parse_file(config_path);
    Dataset data = load_data(cfg, data_override);
    RegimeFamily fam = build_family(cfg, data.stages());
    fam.validate_against(data);
    EstimatorConfig ec = build_estimator_config(cfg, data.stages());
    GpOptions gp = build_gp_options(cfg, fam);
    FitInferRun run;
    run.design = build_design(cfg, fam);
    run.path_grid = build_path_grid(cfg, fam);
    run.additional = static_cast<int>(cfg.get_int("gp", "additional", 6));
    run.boot_start = static_cast<int>(cfg.require_int("gp", "boot_start"));
    run.boot_end = static_cast<int>(cfg.require_int("gp", "boot_end"));
    run.n_paths = static_cast<int>(cfg.require_int("gp", "paths"));
    run.base_seed = static_cast<std::uint64_t>(cfg.get_int("gp", "boot_seed", 1));
    run.ei_budget = static_cast<int>(cfg.get_int("gp", "ei_budget", 600));
    run.threads = static_cast<unsigned>(cfg.get_int("gp", "threads", 1));
    OptimumPosterior op = fit_infer(data, fam, ec, gp, run);
    write_optimum_csv(op, out);
    for (const auto& f : op.failures) std::cerr << "note: " << f << "\n";
    std::cout << "wrote " << op.rows.rows() << " optimum rows to " << out << "\n";
    return 0;
}

int cmd_gp_postmean(const std::string& config_path, const std::string& state_in,
                    const std::string& out) {
    ConfigFile cfg = ConfigFile::parse_file(config_path);
    DataSpec spec = data_spec(cfg);
    RegimeFamily fam = build_family(cfg, spec.treat_cols.size());
    EstimatorConfig ec = build_estimator_config(cfg, spec.treat_cols.size());
    EmulationState state = load_state(state_in, ec);
    Eigen::MatrixXd grid = build_path_grid(cfg, fam);
    std::ofstream os(out);
    if (!os) throw IoError("cannot open '" + out + "' for writing");
    for (std::size_t d = 0; d < fam.psi_names.size(); ++d)
        os << (d ? "," : "") << fam.psi_names[d];
    os << ",mean\n";
    char buf[64];
    for (Eigen::Index i = 0; i < grid.rows(); ++i) {
        for (Eigen::Index d = 0; d < grid.cols(); ++d) {
            std::snprintf(buf, sizeof buf, "%g", grid(i, d));
            os << (d ? "," : "") << buf;
        }
        std::snprintf(buf, sizeof buf, "%.10g", post_mean(state, grid.row(i).transpose()));
        os << "," << buf << "\n";
    }
    std::cout << "wrote " << grid.rows() << " posterior means to " << out << "\n";
    return 0;
}

int cmd_individualize(const std::string& config_path, const std::string& optima_path,
                      int stage, const std::string& covariate, const std::string& range_text,
                      const std::string& out) {
    ConfigFile cfg = ConfigFile::parse_file(config_path);
    DataSpec spec = data_spec(cfg);
    RegimeFamily fam = build_family(cfg, spec.treat_cols.size());
    if (stage < 1 || static_cast<std::size_t>(stage) > fam.stages())
        throw ConfigError("stage out of range: " + std::to_string(stage));

    std::ifstream is(optima_path);
    if (!is) throw IoError("cannot open posterior optima file '" + optima_path + "'");
    std::string line;
    if (!std::getline(is, line)) throw DataError("empty posterior optima file");
    auto header = detail::split_csv_line(line);
    if (header.size() != fam.dim() + 1)
        throw DataError("posterior optima file must have one column per psi plus value");
    std::vector<DrawOptimum> optima;
    std::size_t row = 1;
    while (std::getline(is, line)) {
        ++row;
        if (line.empty()) continue;
        auto fields = detail::split_csv_line(line);
        if (fields.size() != header.size())
            throw DataError("row " + std::to_string(row) + " has " +
                            std::to_string(fields.size()) + " fields");
        DrawOptimum opt;
        for (std::size_t d = 0; d < fam.dim(); ++d)
            opt.psi.push_back(detail::parse_number(fields[d], row, header[d]));
        opt.value = detail::parse_number(fields.back(), row, "value");
        optima.push_back(std::move(opt));
    }

    RangeSpec range = parse_range(range_text);
    std::ofstream os(out);
    if (!os) throw IoError("cannot open '" + out + "' for writing");
    os << covariate << ",probability\n";
    char buf[64];
    for (double v : range_values(range)) {
        std::unordered_map<std::string, double> x_new{{covariate, v}};
        double p = individualized_prob(optima, fam, static_cast<std::size_t>(stage - 1), x_new);
        std::snprintf(buf, sizeof buf, "%g,%.10g", v, p);
        os << buf << "\n";
    }
    std::cout << "wrote individualized probabilities to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Optimal dynamic treatment regimes via Bayesian causal estimation and "
                 "Gaussian-process emulation"};
    app.require_subcommand(1);

    std::string config_path, data_path, out, out_prefix = "dtropt_";
    std::string state_in, state_out, report_out, optima_path, covariate, range_text;
    long n_override = -1, seed = 1, n_mc = 1000000;
    int confound_override = -1, additional = 6, ei_budget = 600, stage = 1;
    double step = 5.0;

    auto* sim = app.add_subcommand("simulate", "Generate a synthetic two-stage trial dataset");
    sim->add_option("--config", config_path, "Config file ([simulate] section)");
    sim->add_option("--out", out, "Output CSV path")->required();
    sim->add_option("--n", n_override, "Number of patients (overrides config)");
    sim->add_option("--seed", seed, "RNG seed (overrides config)");
    sim->add_flag(
        "--confounded,!--randomized",
        [&confound_override](std::int64_t c) { confound_override = c > 0 ? 1 : 0; },
        "Treatment assignment depends on CD4");

    auto* orc = app.add_subcommand("oracle", "True value surface by Monte Carlo");
    orc->add_option("--step", step, "Grid step over [200,500]^2")->required();
    orc->add_option("--out", out, "Surface CSV path");
    orc->add_option("--n-mc", n_mc, "Monte Carlo sample size");
    orc->add_option("--seed", seed, "RNG seed");

    auto* ana = app.add_subcommand("analyze", "MSM / grid-IPW / grid-DR posterior");
    ana->add_option("--config", config_path, "Config file")->required();
    ana->add_option("--data", data_path, "Dataset CSV (overrides [data] path)");
    ana->add_option("--out-prefix", out_prefix, "Prefix for output CSVs");

    auto* gp = app.add_subcommand("gp", "Gaussian-process emulation");
    gp->require_subcommand(1);
    auto* gpd = gp->add_subcommand("design", "Fit GP on the design points");
    gpd->add_option("--config", config_path, "Config file")->required();
    gpd->add_option("--data", data_path, "Dataset CSV (overrides [data] path)");
    gpd->add_option("--state-out", state_out, "Emulation state output")->required();
    auto* gps = gp->add_subcommand("sequence", "Extend a fit with EI-chosen points");
    gps->add_option("--config", config_path, "Config file")->required();
    gps->add_option("--data", data_path, "Dataset CSV (overrides [data] path)");
    gps->add_option("--state-in", state_in, "Emulation state input")->required();
    gps->add_option("--state-out", state_out, "Emulation state output")->required();
    gps->add_option("--additional", additional, "Number of sequential points");
    gps->add_option("--seed", seed, "Seed for the sequential stream");
    gps->add_option("--ei-budget", ei_budget, "EI search evaluations per step");
    gps->add_option("--report", report_out, "Convergence report CSV");
    auto* gpi = gp->add_subcommand("infer", "Bootstrap + sample-path posterior of the optimum");
    gpi->add_option("--config", config_path, "Config file")->required();
    gpi->add_option("--data", data_path, "Dataset CSV (overrides [data] path)");
    gpi->add_option("--out", out, "Optimum posterior CSV")->required();
    auto* gpm = gp->add_subcommand("postmean", "Posterior mean on the path grid");
    gpm->add_option("--config", config_path, "Config file")->required();
    gpm->add_option("--state-in", state_in, "Emulation state input")->required();
    gpm->add_option("--out", out, "Posterior mean CSV")->required();

    auto* ind = app.add_subcommand("individualize",
                                   "Posterior treatment probabilities along a covariate grid");
    ind->add_option("--config", config_path, "Config file")->required();
    ind->add_option("--optima", optima_path, "Posterior optima CSV")->required();
    ind->add_option("--stage", stage, "Decision stage (1-based)")->required();
    ind->add_option("--covariate", covariate, "Covariate name in the rule")->required();
    ind->add_option("--range", range_text, "Covariate grid lo:hi:step")->required();
    ind->add_option("--out", out, "Probability CSV path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*sim) return cmd_simulate(config_path, out, n_override, seed, confound_override);
        if (*orc) return cmd_oracle(step, out, n_mc, seed);
        if (*ana) return cmd_analyze(config_path, data_path, out_prefix);
        if (*gpd) return cmd_gp_design(config_path, data_path, state_out);
        if (*gps)
            return cmd_gp_sequence(config_path, data_path, state_in, state_out, additional,
                                   seed, ei_budget, report_out);
        if (*gpi) return cmd_gp_infer(config_path, data_path, out);
        if (*gpm) return cmd_gp_postmean(config_path, state_in, out);
        if (*ind)
            return cmd_individualize(config_path, optima_path, stage, covariate, range_text,
                                     out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return 1;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 1;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
