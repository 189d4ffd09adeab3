#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dtropt/dsl.hpp"
#include "dtropt/emucontrol.hpp"
#include "dtropt/errors.hpp"
#include "dtropt/gp.hpp"
#include "dtropt/posterior.hpp"
#include "dtropt/simulate.hpp"

namespace dtropt {

// ---------------------------------------------------------------------------
// Structured-text config: [section] blocks of key = value lines, # comments.
// ---------------------------------------------------------------------------

class ConfigFile {
public:
    static ConfigFile parse_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw IoError("cannot open config file '" + path + "'");
        std::stringstream ss;
        ss << is.rdbuf();
        return parse_text(ss.str(), path);
    }

    static ConfigFile parse_text(const std::string& text, const std::string& origin = "<text>") {
        ConfigFile cfg;
        cfg.origin_ = origin;
        std::istringstream is(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            line = strip(line);
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw ConfigError(origin + ":" + std::to_string(lineno) +
                                      ": malformed section header");
                section = strip(line.substr(1, line.size() - 2));
                continue;
            }
            auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) +
                                  ": expected key = value");
            std::string key = strip(line.substr(0, eq));
            std::string value = strip(line.substr(eq + 1));
            if (key.empty())
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
            cfg.values_[section + "." + key] = value;
        }
        return cfg;
    }

    void set(const std::string& section, const std::string& key, const std::string& value) {
        values_[section + "." + key] = value;
    }

    bool has(const std::string& section, const std::string& key) const {
        return values_.count(section + "." + key) > 0;
    }

    std::string require(const std::string& section, const std::string& key) const {
        auto it = values_.find(section + "." + key);
        if (it == values_.end())
            throw ConfigError("missing required config key [" + section + "] " + key);
        return it->second;
    }

    std::string get(const std::string& section, const std::string& key,
                    const std::string& fallback) const {
        auto it = values_.find(section + "." + key);
        return it == values_.end() ? fallback : it->second;
    }

    double require_real(const std::string& section, const std::string& key) const {
        return to_real(require(section, key), section, key);
    }

    double get_real(const std::string& section, const std::string& key, double fallback) const {
        return has(section, key) ? require_real(section, key) : fallback;
    }

    long require_int(const std::string& section, const std::string& key) const {
        double v = require_real(section, key);
        long l = static_cast<long>(v);
        if (static_cast<double>(l) != v)
            throw ConfigError("config key [" + section + "] " + key + " must be an integer");
        return l;
    }

    long get_int(const std::string& section, const std::string& key, long fallback) const {
        return has(section, key) ? require_int(section, key) : fallback;
    }

    bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
        if (!has(section, key)) return fallback;
        std::string v = require(section, key);
        std::transform(v.begin(), v.end(), v.begin(),
                       [](unsigned char c) { return std::tolower(c); });
        if (v == "true" || v == "yes" || v == "1") return true;
        if (v == "false" || v == "no" || v == "0") return false;
        throw ConfigError("config key [" + section + "] " + key + " must be true or false");
    }

    std::vector<std::string> require_list(const std::string& section,
                                          const std::string& key) const {
        std::vector<std::string> out;
        std::string v = require(section, key);
        std::string item;
        std::istringstream is(v);
        while (std::getline(is, item, ',')) {
            item = strip(item);
            if (item.empty())
                throw ConfigError("config key [" + section + "] " + key + " has an empty item");
            out.push_back(item);
        }
        if (out.empty())
            throw ConfigError("config key [" + section + "] " + key + " is empty");
        return out;
    }

private:
    static std::string strip(const std::string& s) {
        std::size_t a = 0, b = s.size();
        while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
        while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
        return s.substr(a, b - a);
    }

    static double to_real(const std::string& v, const std::string& section,
                          const std::string& key) {
        try {
            std::size_t pos = 0;
            double d = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return d;
        } catch (const std::exception&) {
            throw ConfigError("config key [" + section + "] " + key + " has non-numeric value '" +
                              v + "'");
        }
    }

    std::string origin_;
    std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Range specs "lo:hi:step" and grids
// ---------------------------------------------------------------------------

struct RangeSpec {
    double lo = 0.0, hi = 0.0, step = 0.0;
};

inline RangeSpec parse_range(const std::string& text) {
    RangeSpec r;
    char c1 = 0, c2 = 0;
    std::istringstream is(text);
    if (!(is >> r.lo >> c1 >> r.hi >> c2 >> r.step) || c1 != ':' || c2 != ':' ||
        (is >> std::ws, !is.eof()))
        throw ConfigError("malformed range '" + text + "', expected lo:hi:step");
    if (r.step <= 0.0 || r.hi < r.lo)
        throw ConfigError("range '" + text + "' must have lo <= hi and step > 0");
    return r;
}

inline std::vector<double> range_values(const RangeSpec& r) {
    std::vector<double> v;
    for (double x = r.lo; x <= r.hi + 1e-9 * (r.hi - r.lo + 1.0); x += r.step)
        v.push_back(std::min(x, r.hi));
    return v;
}

/// Cartesian product grid, first coordinate varying slowest.
inline std::vector<std::vector<double>> cartesian_grid(
    const std::vector<std::vector<double>>& axes) {
    std::vector<std::vector<double>> grid{{}};
    for (const auto& axis : axes) {
        std::vector<std::vector<double>> next;
        for (const auto& prefix : grid)
            for (double v : axis) {
                auto row = prefix;
                row.push_back(v);
                next.push_back(row);
            }
        grid = std::move(next);
    }
    return grid;
}

// ---------------------------------------------------------------------------
// Builders from config sections
// ---------------------------------------------------------------------------

struct DataSpec {
    std::string path;
    std::string id_col;
    std::vector<std::string> treat_cols;
    std::string outcome_col;
};

inline DataSpec data_spec(const ConfigFile& cfg) {
    DataSpec d;
    d.path = cfg.get("data", "path", "");
    d.id_col = cfg.require("data", "id");
    d.treat_cols = cfg.require_list("data", "treatments");
    d.outcome_col = cfg.require("data", "outcome");
    return d;
}

inline RegimeFamily build_family(const ConfigFile& cfg, std::size_t stages) {
    RegimeFamily fam;
    for (std::size_t k = 1; k <= stages; ++k)
        fam.rules.push_back(parse_rule(cfg.require("rules", "g" + std::to_string(k))));
    fam.psi_names = cfg.require_list("rules", "psi");
    for (const auto& name : fam.psi_names) {
        auto r = cfg.require("rules", "domain." + name);
        double lo, hi;
        char c = 0;
        std::istringstream is(r);
        if (!(is >> lo >> c >> hi) || c != ':')
            throw ConfigError("malformed domain '" + r + "' for " + name + ", expected lo:hi");
        fam.domain.emplace_back(lo, hi);
    }
    return fam;
}

inline std::vector<ModelFormula> build_formulas(const ConfigFile& cfg, const std::string& prefix,
                                                std::size_t stages, bool required) {
    std::vector<ModelFormula> out;
    for (std::size_t k = 1; k <= stages; ++k) {
        std::string key = prefix + std::to_string(k);
        if (!cfg.has("models", key)) {
            if (!required && out.empty() && k == 1) return {};
            throw ConfigError("missing required config key [models] " + key);
        }
        out.push_back(parse_formula(cfg.require("models", key)));
    }
    return out;
}

/// Grid over the psi coordinates from [grid] entries "name = lo:hi:step".
inline std::vector<std::vector<double>> build_grid(const ConfigFile& cfg,
                                                   const RegimeFamily& fam) {
    std::vector<std::vector<double>> axes;
    for (const auto& name : fam.psi_names)
        axes.push_back(range_values(parse_range(cfg.require("grid", name))));
    return cartesian_grid(axes);
}

/// Estimator + bootstrap settings for `analyze`, validated against the
/// required/optional/unavailable parameter tables.
inline BayesRun build_bayes_run(const ConfigFile& cfg, const RegimeFamily& fam,
                                std::size_t stages) {
    BayesRun run;
    std::string kind = cfg.require("estimator", "kind");
    if (kind == "msm")
        run.kind = EstimatorKind::Msm;
    else if (kind == "grid-ipw")
        run.kind = EstimatorKind::GridIpw;
    else if (kind == "grid-dr")
        run.kind = EstimatorKind::GridDr;
    else
        throw ConfigError("estimator kind must be msm, grid-ipw, or grid-dr; got '" + kind +
                          "'");

    run.normalized = cfg.get_bool("estimator", "normalized", run.kind != EstimatorKind::Msm);
    if (run.kind == EstimatorKind::Msm && cfg.has("estimator", "normalized") &&
        cfg.get_bool("estimator", "normalized", false))
        throw ConfigError(
            "the MSM estimator does not support normalized weights (Unavailable: Normalized)");

    run.treat_models = build_formulas(cfg, "treat", stages, true);
    if (run.kind == EstimatorKind::GridDr)
        run.outcome_models = build_formulas(cfg, "outcome", stages, true);
    else if (cfg.has("models", "outcome1") && run.kind == EstimatorKind::GridIpw)
        throw ConfigError("outcome models are only used with the grid-dr estimator");

    if (run.kind == EstimatorKind::Msm) {
        run.msm_model = parse_formula(cfg.require("models", "msm"));
    }
    run.grid = build_grid(cfg, fam);
    run.draws = static_cast<int>(cfg.get_int("estimator", "draws", 100));
    run.base_seed = static_cast<std::uint64_t>(cfg.get_int("estimator", "seed", 1));
    run.bayes = cfg.get_bool("estimator", "bayes", true);
    if (!run.bayes) run.draws = 1;
    if (cfg.has("estimator", "truncate"))
        run.truncate_quantile = cfg.require_real("estimator", "truncate");
    run.threads = static_cast<unsigned>(cfg.get_int("estimator", "threads", 1));
    return run;
}

inline EstimatorConfig build_estimator_config(const ConfigFile& cfg, std::size_t stages) {
    EstimatorConfig ec;
    std::string kind = cfg.get("estimator", "kind", "ipw-normalized");
    bool dr = cfg.get_bool("estimator", "dr", false) || kind == "dr" || kind == "grid-dr";
    bool normalized = cfg.get_bool("estimator", "normalized", true);
    if (dr)
        ec.kind = EmuEstimator::Dr;
    else
        ec.kind = normalized ? EmuEstimator::IpwNormalized : EmuEstimator::IpwRaw;
    ec.treat_models = build_formulas(cfg, "treat", stages, true);
    if (dr) ec.outcome_models = build_formulas(cfg, "outcome", stages, true);
    if (cfg.has("estimator", "truncate"))
        ec.truncate_quantile = cfg.require_real("estimator", "truncate");
    return ec;
}

inline GpOptions build_gp_options(const ConfigFile& cfg, const RegimeFamily& fam) {
    GpOptions gp;
    const std::size_t D = fam.dim();
    std::string kernel = cfg.require("gp", "kernel");
    if (kernel == "matern32")
        gp.kind = KernelKind::Matern32;
    else if (kernel == "matern52")
        gp.kind = KernelKind::Matern52;
    else
        throw ConfigError("gp kernel must be matern32 or matern52; got '" + kernel + "'");
    auto lower = cfg.require_list("gp", "theta_lower");
    auto upper = cfg.require_list("gp", "theta_upper");
    if (lower.size() != D || upper.size() != D)
        throw ConfigError("gp lengthscale bounds must have one entry per psi coordinate");
    gp.theta_lower.resize(static_cast<Eigen::Index>(D));
    gp.theta_upper.resize(static_cast<Eigen::Index>(D));
    for (std::size_t d = 0; d < D; ++d) {
        try {
            gp.theta_lower(static_cast<Eigen::Index>(d)) = std::stod(lower[d]);
            gp.theta_upper(static_cast<Eigen::Index>(d)) = std::stod(upper[d]);
        } catch (const std::exception&) {
            throw ConfigError("gp lengthscale bounds must be numeric");
        }
    }
    gp.n_starts = static_cast<int>(cfg.require_int("gp", "n_starts"));
    gp.seed = static_cast<std::uint64_t>(cfg.get_int("gp", "seed", 1));
    std::string prior = cfg.get("gp", "prior", "none");
    if (prior == "auto") {
        PriorSpec ps;
        for (const auto& [lo, hi] : fam.domain)
            ps.lognormal.push_back(elicit_lognormal_prior(hi - lo, gp.kind));
        gp.prior = ps;
    } else if (prior != "none") {
        // explicit "mu sigma; mu sigma; ..."
        PriorSpec ps;
        std::istringstream is(prior);
        std::string part;
        while (std::getline(is, part, ';')) {
            std::istringstream ps_is(part);
            double mu, sd;
            if (!(ps_is >> mu >> sd))
                throw ConfigError("gp prior must be 'auto', 'none', or 'mu sd; mu sd; ...'");
            ps.lognormal.emplace_back(mu, sd);
        }
        if (ps.lognormal.size() != D)
            throw ConfigError("gp prior needs one (mu, sd) pair per psi coordinate");
        gp.prior = ps;
    }
    return gp;
}

/// Design points from [gp] design entries "design.<name> = lo:hi:step".
inline Eigen::MatrixXd build_design(const ConfigFile& cfg, const RegimeFamily& fam) {
    std::vector<std::vector<double>> axes;
    for (const auto& name : fam.psi_names)
        axes.push_back(range_values(parse_range(cfg.require("gp", "design." + name))));
    auto grid = cartesian_grid(axes);
    Eigen::MatrixXd design(static_cast<Eigen::Index>(grid.size()),
                           static_cast<Eigen::Index>(fam.dim()));
    for (std::size_t i = 0; i < grid.size(); ++i)
        for (std::size_t d = 0; d < fam.dim(); ++d)
            design(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = grid[i][d];
    return design;
}

inline Eigen::MatrixXd build_path_grid(const ConfigFile& cfg, const RegimeFamily& fam) {
    std::vector<std::vector<double>> axes;
    for (const auto& name : fam.psi_names)
        axes.push_back(range_values(parse_range(cfg.require("gp", "path_grid." + name))));
    auto grid = cartesian_grid(axes);
    Eigen::MatrixXd pg(static_cast<Eigen::Index>(grid.size()),
                       static_cast<Eigen::Index>(fam.dim()));
    for (std::size_t i = 0; i < grid.size(); ++i)
        for (std::size_t d = 0; d < fam.dim(); ++d)
            pg(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = grid[i][d];
    return pg;
}

inline SimConfig build_sim_config(const ConfigFile& cfg) {
    SimConfig sc;
    sc.n = static_cast<std::size_t>(cfg.get_int("simulate", "n", 1000));
    sc.seed = static_cast<std::uint64_t>(cfg.get_int("simulate", "seed", 1));
    sc.confounded = cfg.get_bool("simulate", "confounded", false);
    sc.conf_intercept = cfg.get_real("simulate", "conf_intercept", -3.5);
    sc.conf_slope = cfg.get_real("simulate", "conf_slope", 0.01);
    return sc;
}

}  // namespace dtropt
