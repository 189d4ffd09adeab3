#pragma once

#include <cmath>
#include <fstream>
#include <limits>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "dtropt/causal.hpp"
#include "dtropt/dsl.hpp"
#include "dtropt/errors.hpp"
#include "dtropt/gp.hpp"
#include "dtropt/posterior.hpp"
#include "dtropt/rng.hpp"
#include "dtropt/tabular.hpp"

namespace dtropt {

// ---------------------------------------------------------------------------
// Value estimator plugged into the emulation loop
// ---------------------------------------------------------------------------

enum class EmuEstimator { IpwNormalized, IpwRaw, Dr };

struct EstimatorConfig {
    EmuEstimator kind = EmuEstimator::IpwNormalized;
    std::vector<ModelFormula> treat_models;
    std::vector<ModelFormula> outcome_models;  // DR only
    std::optional<double> truncate_quantile;
};

/// One-time setup (propensity fits, DR design factorizations) for repeated
/// value evaluations under a fixed weight vector pi.
class ValueEvaluator {
public:
    ValueEvaluator(const Dataset& data, const RegimeFamily& family, const EstimatorConfig& cfg,
                   const Eigen::VectorXd& pi)
        : data_(data), family_(family), cfg_(cfg), pi_(pi), rows_(data) {
        pf_ = fit_propensities(data, cfg.treat_models, pi);
        if (cfg.kind == EmuEstimator::Dr)
            dr_.emplace(data, family, cfg.outcome_models, pi);
    }

    double at(const std::vector<double>& psi) const {
        Eigen::MatrixXi adh = adherence_through(data_, family_, psi, rows_);
        switch (cfg_.kind) {
            case EmuEstimator::IpwNormalized: {
                WeightVector wv = weights_from_adherence(adh, psi, pf_, true, pi_,
                                                         cfg_.truncate_quantile);
                return value_ipw(data_, wv, pi_).value;
            }
            case EmuEstimator::IpwRaw: {
                WeightVector wv = weights_from_adherence(adh, psi, pf_, false, pi_,
                                                         cfg_.truncate_quantile);
                return value_ipw(data_, wv, pi_).value;
            }
            case EmuEstimator::Dr: {
                WeightVector wv = weights_from_adherence(adh, psi, pf_, false, pi_,
                                                         cfg_.truncate_quantile);
                DrRecursion rec =
                    dr_->fit_with(enforced_treatments(data_, family_, psi, rows_));
                return value_dr(data_, wv, rec, pi_).value;
            }
        }
        throw ConfigError("unknown estimator kind");
    }

private:
    const Dataset& data_;
    const RegimeFamily& family_;
    EstimatorConfig cfg_;
    Eigen::VectorXd pi_;
    RowBindings rows_;
    PropensityFit pf_;
    std::optional<DrEngine> dr_;
};

// ---------------------------------------------------------------------------
// Emulation state
// ---------------------------------------------------------------------------

struct EmulationState {
    EstimatorConfig estimator;
    std::vector<std::pair<double, double>> domain;
    GpOptions gp_options;

    Eigen::MatrixXd points;   // m x D, design rows first
    Eigen::VectorXd values;   // estimator evaluations
    std::size_t design_size = 0;

    GPFit fit;     // noisy fit of (points, values)
    GPFit smooth;  // re-interpolated twin

    std::vector<double> ei_history;  // one entry per sequential point
    std::uint64_t seq_seed = 0;      // seed stream for the sequential phase
    int seq_steps = 0;               // sequential points consumed so far
    std::vector<std::string> log;

    Eigen::VectorXd x_max;  // argmax over re-interpolated responses
    double y_max = 0.0;

    std::size_t m() const { return static_cast<std::size_t>(points.rows()); }
    std::size_t dim() const { return static_cast<std::size_t>(points.cols()); }
};

namespace emudetail {

inline std::string point_text(const Eigen::VectorXd& x) {
    std::string s = "(";
    for (Eigen::Index d = 0; d < x.size(); ++d)
        s += (d ? "," : "") + std::to_string(x(d));
    return s + ")";
}

inline void refit(EmulationState& state) {
    state.fit = fit_hyperparams(state.points, state.values, state.gp_options);
    state.smooth = reinterpolate(state.fit);
    Eigen::Index best = 0;
    state.smooth.responses.maxCoeff(&best);
    // maxCoeff returns the first maximizer, which is the tie rule we want
    state.x_max = state.points.row(best);
    state.y_max = state.smooth.responses(best);
}

inline std::vector<double> to_psi(const Eigen::VectorXd& x) {
    return std::vector<double>(x.data(), x.data() + x.size());
}

}  // namespace emudetail

/// Algorithm 2 setup: evaluate the estimator at the design points, fit the
/// noisy GP, and compute its re-interpolated twin. The pi defaults to the
/// frequentist 1/n.
inline EmulationState design_fit(const Dataset& data, const RegimeFamily& family,
                                 const EstimatorConfig& cfg, const Eigen::MatrixXd& design,
                                 const GpOptions& gp_options,
                                 const Eigen::VectorXd* pi_opt = nullptr) {
    const Eigen::Index m0 = design.rows(), D = design.cols();
    if (static_cast<std::size_t>(D) != family.dim())
        throw ConfigError("design dimension does not match the regime index");
    if (m0 < D + 2)
        throw ConfigError("design needs at least " + std::to_string(D + 2) + " points, got " +
                          std::to_string(m0));
    for (Eigen::Index i = 0; i < m0; ++i)
        for (Eigen::Index d = 0; d < D; ++d)
            if (design(i, d) < family.domain[static_cast<std::size_t>(d)].first ||
                design(i, d) > family.domain[static_cast<std::size_t>(d)].second)
                throw ConfigError("design point " + std::to_string(i + 1) +
                                  " lies outside the psi domain");

    Eigen::VectorXd pi = pi_opt ? *pi_opt
                                : Eigen::VectorXd::Constant(
                                      static_cast<Eigen::Index>(data.n()),
                                      1.0 / static_cast<double>(data.n()));
    ValueEvaluator eval(data, family, cfg, pi);

    EmulationState state;
    state.estimator = cfg;
    state.domain = family.domain;
    state.gp_options = gp_options;
    state.points = design;
    state.values.resize(m0);
    state.design_size = static_cast<std::size_t>(m0);
    for (Eigen::Index i = 0; i < m0; ++i) {
        try {
            state.values(i) = eval.at(emudetail::to_psi(design.row(i)));
        } catch (const PositivityError& e) {
            throw PositivityError("design point " + emudetail::point_text(design.row(i)) +
                                  ": " + e.what());
        }
    }
    emudetail::refit(state);
    return state;
}

namespace emudetail {

/// Shared sequential loop. Per-step randomness is keyed off (seed, absolute
/// step index), so splitting one call into several with the same seed is
/// stream-composable.
inline void run_sequence(EmulationState& state, const ValueEvaluator& eval, int additional,
                         int ei_budget, std::uint64_t seed) {
    if (additional < 1) throw ConfigError("sequence_fit: additional must be >= 1");
    if (state.seq_steps == 0)
        state.seq_seed = seed;
    else if (state.seq_seed != seed)
        throw ConfigError("sequence_fit: seed differs from the stream started earlier");

    const Eigen::Index D = state.points.cols();
    double diag2 = 0.0;
    for (const auto& [lo, hi] : state.domain) diag2 += (hi - lo) * (hi - lo);
    const double dup_tol = 1e-6 * std::sqrt(diag2);

    for (int step = 0; step < additional; ++step) {
        const int abs_step = state.seq_steps;
        auto [x_new, ei] = maximize_ei(state.smooth, state.domain, ei_budget,
                                       mix_seed(seed, 2 * static_cast<std::uint64_t>(abs_step)));

        double min_dist = std::numeric_limits<double>::infinity();
        for (Eigen::Index i = 0; i < state.points.rows(); ++i)
            min_dist = std::min(min_dist, (state.points.row(i).transpose() - x_new).norm());
        if (min_dist < dup_tol) {
            Rng rng(seed, 2 * static_cast<std::uint64_t>(abs_step) + 1);
            Eigen::VectorXd far = x_new;
            double far_dist = -1.0;
            for (int c = 0; c < 32; ++c) {
                Eigen::VectorXd cand(D);
                for (Eigen::Index d = 0; d < D; ++d)
                    cand(d) = rng.uniform(state.domain[static_cast<std::size_t>(d)].first,
                                          state.domain[static_cast<std::size_t>(d)].second);
                double dmin = std::numeric_limits<double>::infinity();
                for (Eigen::Index i = 0; i < state.points.rows(); ++i)
                    dmin = std::min(dmin,
                                    (state.points.row(i).transpose() - cand).norm());
                if (dmin > far_dist) {
                    far_dist = dmin;
                    far = cand;
                }
            }
            state.log.push_back("step " + std::to_string(abs_step + 1) +
                                ": EI maximizer duplicated an existing point; perturbed to " +
                                point_text(far));
            x_new = far;
            ei = expected_improvement(state.smooth, x_new, state.smooth.responses.maxCoeff());
        }

        double y_new;
        try {
            y_new = eval.at(to_psi(x_new));
        } catch (const Error& e) {
            throw FitError("sequential step " + std::to_string(abs_step + 1) + " at " +
                           point_text(x_new) + ": " + e.what());
        }

        const Eigen::Index m = state.points.rows();
        state.points.conservativeResize(m + 1, Eigen::NoChange);
        state.points.row(m) = x_new.transpose();
        state.values.conservativeResize(m + 1);
        state.values(m) = y_new;
        state.ei_history.push_back(ei);
        ++state.seq_steps;
        try {
            refit(state);
        } catch (const Error& e) {
            throw FitError("sequential step " + std::to_string(abs_step + 1) + ": " +
                           std::string(e.what()));
        }
    }
}

}  // namespace emudetail

/// Extends the state with `additional` EI-chosen points (Algorithm 2 loop).
inline EmulationState sequence_fit(const Dataset& data, const RegimeFamily& family,
                                   EmulationState state, int additional, int ei_budget,
                                   std::uint64_t seed) {
    Eigen::VectorXd pi = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(data.n()),
                                                   1.0 / static_cast<double>(data.n()));
    ValueEvaluator eval(data, family, state.estimator, pi);
    emudetail::run_sequence(state, eval, additional, ei_budget, seed);
    return state;
}

/// Eq. (10) posterior mean of the current noisy fit.
inline double post_mean(const EmulationState& state, const Eigen::VectorXd& x) {
    return posterior_predict(state.fit, x).mean;
}

// ---------------------------------------------------------------------------
// Convergence report
// ---------------------------------------------------------------------------

struct ConvergenceRow {
    int step = 0;
    std::vector<double> psi;
    double value = 0.0;
    std::optional<double> ei;  // empty for design rows
};

inline std::vector<ConvergenceRow> convergence_report(const EmulationState& state) {
    std::vector<ConvergenceRow> rows;
    for (std::size_t i = 0; i < state.m(); ++i) {
        ConvergenceRow r;
        r.step = static_cast<int>(i) + 1;
        r.psi = emudetail::to_psi(state.points.row(static_cast<Eigen::Index>(i)));
        r.value = state.values(static_cast<Eigen::Index>(i));
        if (i >= state.design_size) r.ei = state.ei_history[i - state.design_size];
        rows.push_back(std::move(r));
    }
    return rows;
}

inline void write_convergence_csv(const EmulationState& state,
                                  const std::vector<std::string>& psi_names,
                                  const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << "step";
    for (const auto& name : psi_names) os << "," << name;
    os << ",value,ei\n";
    char buf[64];
    for (const auto& r : convergence_report(state)) {
        os << r.step;
        for (double p : r.psi) {
            std::snprintf(buf, sizeof buf, "%.17g", p);
            os << "," << buf;
        }
        std::snprintf(buf, sizeof buf, "%.17g", r.value);
        os << "," << buf;
        os << ",";
        if (r.ei) {
            std::snprintf(buf, sizeof buf, "%.17g", *r.ei);
            os << buf;
        }
        os << "\n";
    }
}

// ---------------------------------------------------------------------------
// FitInfer: bootstrap + sample-path uncertainty
// ---------------------------------------------------------------------------

struct OptimumPosterior {
    std::vector<std::string> psi_names;
    Eigen::MatrixXd rows;  // N*(Boot_End-Boot_Start+1) x (D+1): psi, value
    std::vector<std::string> failures;
};

struct FitInferRun {
    Eigen::MatrixXd design;     // Psi_0
    int additional = 6;
    int boot_start = 1;
    int boot_end = 100;
    int n_paths = 100;          // N
    Eigen::MatrixXd path_grid;  // q x D, also the per-path argmax search set
    std::uint64_t base_seed = 1;
    int ei_budget = 600;
    unsigned threads = 1;
};

namespace emudetail {

constexpr std::uint64_t kSeqStream = 0x5e9;
constexpr std::uint64_t kPathStream = 0xba7;

}  // namespace emudetail

/// Algorithm 2 second half: for each bootstrap b the estimation surface is
/// rebuilt under Dirichlet weights seeded with base_seed + b, the sequential
/// phase is rerun from the original design up to m_+ points, and N posterior
/// paths are sampled on the path grid; each path contributes its argmax.
/// Everything for bootstrap b depends only on base_seed + b, so any Boot
/// range reproduces the corresponding rows of a wider run exactly.
inline OptimumPosterior fit_infer(const Dataset& data, const RegimeFamily& family,
                                  const EstimatorConfig& cfg, const GpOptions& gp_options,
                                  const FitInferRun& run) {
    if (run.boot_start > run.boot_end)
        throw ConfigError("Boot_Start must be <= Boot_End");
    if (run.n_paths < 1) throw ConfigError("N (paths per bootstrap) must be >= 1");
    const Eigen::Index D = run.design.cols(), q = run.path_grid.rows();
    if (run.path_grid.cols() != D) throw ConfigError("path grid dimension mismatch");
    for (Eigen::Index i = 0; i < q; ++i)
        for (Eigen::Index d = 0; d < D; ++d)
            if (run.path_grid(i, d) < family.domain[static_cast<std::size_t>(d)].first ||
                run.path_grid(i, d) > family.domain[static_cast<std::size_t>(d)].second)
                throw ConfigError("path grid point " + std::to_string(i + 1) +
                                  " lies outside the psi domain");

    const int n_boot = run.boot_end - run.boot_start + 1;
    OptimumPosterior out;
    out.psi_names = family.psi_names;
    out.rows.setConstant(static_cast<Eigen::Index>(n_boot) * run.n_paths, D + 1,
                         std::numeric_limits<double>::quiet_NaN());
    std::vector<char> failed(static_cast<std::size_t>(n_boot), 0);
    std::vector<std::vector<std::string>> fail_logs(
        std::max<unsigned>(run.threads, 1));

    auto one_boot = [&](int bi, std::vector<std::string>& flog) {
        const int b = run.boot_start + bi;
        const std::uint64_t bseed = run.base_seed + static_cast<std::uint64_t>(b);
        try {
            Eigen::VectorXd pi = dirichlet_draw(data.n(), bseed).pi;
            ValueEvaluator eval(data, family, cfg, pi);
            EmulationState state =
                design_fit(data, family, cfg, run.design, gp_options, &pi);
            if (run.additional > 0)
                emudetail::run_sequence(state, eval, run.additional, run.ei_budget,
                                        mix_seed(bseed, emudetail::kSeqStream));
            Eigen::MatrixXd paths = sample_paths(state.fit, run.path_grid, run.n_paths,
                                                 mix_seed(bseed, emudetail::kPathStream));
            for (int p = 0; p < run.n_paths; ++p) {
                Eigen::Index best = 0;
                double best_v = paths(p, 0);
                for (Eigen::Index j = 1; j < q; ++j)
                    if (paths(p, j) > best_v) {
                        best_v = paths(p, j);
                        best = j;
                    }
                Eigen::Index row = static_cast<Eigen::Index>(bi) * run.n_paths + p;
                out.rows.block(row, 0, 1, D) = run.path_grid.row(best);
                out.rows(row, D) = best_v;
            }
        } catch (const Error& e) {
            failed[static_cast<std::size_t>(bi)] = 1;
            flog.push_back("bootstrap " + std::to_string(b) + ": " + e.what());
        }
    };

    const unsigned nthreads = std::max<unsigned>(run.threads, 1);
    if (nthreads <= 1 || n_boot <= 1) {
        for (int bi = 0; bi < n_boot; ++bi) one_boot(bi, fail_logs[0]);
    } else {
        std::vector<std::thread> workers;
        for (unsigned t = 0; t < nthreads; ++t)
            workers.emplace_back([&, t]() {
                for (int bi = static_cast<int>(t); bi < n_boot;
                     bi += static_cast<int>(nthreads))
                    one_boot(bi, fail_logs[t]);
            });
        for (auto& w : workers) w.join();
    }
    for (auto& flog : fail_logs)
        out.failures.insert(out.failures.end(), flog.begin(), flog.end());
    std::sort(out.failures.begin(), out.failures.end());

    int n_failed = 0;
    for (char f : failed) n_failed += f;
    if (n_failed * 5 > n_boot)
        throw FitError(std::to_string(n_failed) + " of " + std::to_string(n_boot) +
                       " bootstraps failed (tolerance 20%): " +
                       (out.failures.empty() ? "" : out.failures.front()));

    // drop rows of failed bootstraps
    if (n_failed > 0) {
        Eigen::MatrixXd kept(out.rows.rows(), out.rows.cols());
        Eigen::Index kr = 0;
        for (int bi = 0; bi < n_boot; ++bi) {
            if (failed[static_cast<std::size_t>(bi)]) continue;
            kept.block(kr, 0, run.n_paths, out.rows.cols()) =
                out.rows.block(static_cast<Eigen::Index>(bi) * run.n_paths, 0, run.n_paths,
                               out.rows.cols());
            kr += run.n_paths;
        }
        out.rows = kept.topRows(kr);
    }
    return out;
}

inline void write_optimum_csv(const OptimumPosterior& op, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    for (std::size_t d = 0; d < op.psi_names.size(); ++d)
        os << (d ? "," : "") << op.psi_names[d];
    os << ",value\n";
    char buf[64];
    for (Eigen::Index i = 0; i < op.rows.rows(); ++i) {
        for (Eigen::Index j = 0; j < op.rows.cols(); ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", op.rows(i, j));
            os << (j ? "," : "") << buf;
        }
        os << "\n";
    }
}

// ---------------------------------------------------------------------------
// State file (versioned structured text)
// ---------------------------------------------------------------------------

inline void save_state(const EmulationState& state, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os.precision(17);
    os << "dtropt-state 1\n";
    os << "kernel " << (state.gp_options.kind == KernelKind::Matern32 ? "matern32" : "matern52")
       << "\n";
    auto vec_line = [&](const char* key, const Eigen::VectorXd& v) {
        os << key;
        for (Eigen::Index i = 0; i < v.size(); ++i) os << " " << v(i);
        os << "\n";
    };
    vec_line("theta_lower", state.gp_options.theta_lower);
    vec_line("theta_upper", state.gp_options.theta_upper);
    os << "n_starts " << state.gp_options.n_starts << "\n";
    os << "gp_seed " << state.gp_options.seed << "\n";
    os << "prior";
    if (state.gp_options.prior)
        for (auto [mu, sd] : state.gp_options.prior->lognormal) os << " " << mu << " " << sd;
    os << "\n";
    os << "domain";
    for (auto [lo, hi] : state.domain) os << " " << lo << " " << hi;
    os << "\n";
    os << "design_size " << state.design_size << "\n";
    os << "seq_steps " << state.seq_steps << "\n";
    os << "seq_seed " << state.seq_seed << "\n";
    os << "points " << state.points.rows() << " " << state.points.cols() << "\n";
    for (Eigen::Index i = 0; i < state.points.rows(); ++i) {
        for (Eigen::Index d = 0; d < state.points.cols(); ++d)
            os << (d ? " " : "") << state.points(i, d);
        os << "\n";
    }
    os << "values " << state.values.size() << "\n";
    for (Eigen::Index i = 0; i < state.values.size(); ++i) os << state.values(i) << "\n";
    os << "ei_history " << state.ei_history.size() << "\n";
    for (double e : state.ei_history) os << e << "\n";
}

/// Loads a state file and deterministically refits the GP from the stored
/// arrays, so a save/load round trip resumes identically. The estimator
/// config is supplied by the caller (it lives in the analysis config).
inline EmulationState load_state(const std::string& path, const EstimatorConfig& cfg) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open state file '" + path + "'");
    auto corrupt = [&](const std::string& what) {
        return IoError("corrupt state file '" + path + "': " + what);
    };
    std::string magic;
    int version = 0;
    if (!(is >> magic >> version) || magic != "dtropt-state")
        throw corrupt("missing header");
    if (version != 1)
        throw IoError("state file '" + path + "' has unsupported version " +
                      std::to_string(version));

    EmulationState state;
    state.estimator = cfg;
    std::string key, line;
    std::getline(is, line);
    auto read_key = [&](const char* expect) {
        if (!(is >> key) || key != expect) throw corrupt(std::string("expected ") + expect);
    };
    read_key("kernel");
    std::string kname;
    is >> kname;
    if (kname == "matern32")
        state.gp_options.kind = KernelKind::Matern32;
    else if (kname == "matern52")
        state.gp_options.kind = KernelKind::Matern52;
    else
        throw corrupt("unknown kernel '" + kname + "'");

    auto read_vec_line = [&](const char* expect) {
        read_key(expect);
        std::getline(is, line);
        std::istringstream ls(line);
        std::vector<double> v;
        double x;
        while (ls >> x) v.push_back(x);
        return v;
    };
    auto lower = read_vec_line("theta_lower");
    auto upper = read_vec_line("theta_upper");
    if (lower.size() != upper.size() || lower.empty()) throw corrupt("bad lengthscale bounds");
    state.gp_options.theta_lower =
        Eigen::Map<Eigen::VectorXd>(lower.data(), static_cast<Eigen::Index>(lower.size()));
    state.gp_options.theta_upper =
        Eigen::Map<Eigen::VectorXd>(upper.data(), static_cast<Eigen::Index>(upper.size()));
    read_key("n_starts");
    if (!(is >> state.gp_options.n_starts)) throw corrupt("bad n_starts");
    read_key("gp_seed");
    if (!(is >> state.gp_options.seed)) throw corrupt("bad gp_seed");
    std::getline(is, line);
    auto prior = read_vec_line("prior");
    if (!prior.empty()) {
        if (prior.size() % 2 != 0) throw corrupt("bad prior");
        PriorSpec ps;
        for (std::size_t i = 0; i < prior.size(); i += 2)
            ps.lognormal.emplace_back(prior[i], prior[i + 1]);
        state.gp_options.prior = ps;
    }
    auto dom = read_vec_line("domain");
    if (dom.size() % 2 != 0 || dom.empty()) throw corrupt("bad domain");
    for (std::size_t i = 0; i < dom.size(); i += 2)
        state.domain.emplace_back(dom[i], dom[i + 1]);
    read_key("design_size");
    if (!(is >> state.design_size)) throw corrupt("bad design_size");
    read_key("seq_steps");
    if (!(is >> state.seq_steps)) throw corrupt("bad seq_steps");
    read_key("seq_seed");
    if (!(is >> state.seq_seed)) throw corrupt("bad seq_seed");

    read_key("points");
    Eigen::Index m = 0, D = 0;
    if (!(is >> m >> D) || m < 2 || D < 1) throw corrupt("bad points header");
    state.points.resize(m, D);
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index d = 0; d < D; ++d)
            if (!(is >> state.points(i, d))) throw corrupt("truncated points");
    read_key("values");
    Eigen::Index nv = 0;
    if (!(is >> nv) || nv != m) throw corrupt("bad values header");
    state.values.resize(nv);
    for (Eigen::Index i = 0; i < nv; ++i)
        if (!(is >> state.values(i))) throw corrupt("truncated values");
    read_key("ei_history");
    std::size_t ne = 0;
    if (!(is >> ne)) throw corrupt("bad ei_history header");
    if (ne != static_cast<std::size_t>(m) - state.design_size)
        throw corrupt("ei_history length mismatch");
    state.ei_history.resize(ne);
    for (std::size_t i = 0; i < ne; ++i)
        if (!(is >> state.ei_history[i])) throw corrupt("truncated ei_history");

    emudetail::refit(state);
    return state;
}

}  // namespace dtropt
