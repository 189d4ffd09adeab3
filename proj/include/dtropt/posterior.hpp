#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "dtropt/causal.hpp"
#include "dtropt/errors.hpp"
#include "dtropt/rng.hpp"

namespace dtropt {

// ---------------------------------------------------------------------------
// Dirichlet(1,...,1) draws
// ---------------------------------------------------------------------------

struct DirichletDraw {
    Eigen::VectorXd pi;
    long draw_id = 0;
    std::uint64_t seed = 0;
};

/// Flat Dirichlet via normalized standard exponentials; deterministic given
/// the seed.
inline DirichletDraw dirichlet_draw(std::size_t n, std::uint64_t seed) {
    if (n < 1) throw ConfigError("dirichlet_draw: n must be >= 1");
    Rng rng(seed);
    DirichletDraw d;
    d.seed = seed;
    d.pi.resize(n);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        d.pi(i) = rng.exponential();
        sum += d.pi(i);
    }
    d.pi /= sum;
    return d;
}

// ---------------------------------------------------------------------------
// Posterior runs
// ---------------------------------------------------------------------------

enum class EstimatorKind { GridIpw, GridDr, Msm };

struct BayesRun {
    EstimatorKind kind = EstimatorKind::GridIpw;
    bool normalized = false;  // grid estimators only; unavailable for MSM
    std::vector<ModelFormula> treat_models;
    std::vector<ModelFormula> outcome_models;  // DR only
    std::vector<std::vector<double>> grid;     // grid modes; also MSM augmentation grid
    ModelFormula msm_model;                    // MSM mode
    int draws = 100;                           // B
    std::uint64_t base_seed = 1;
    bool bayes = true;  // frequentist mode: pi = 1/n, single draw
    std::optional<double> truncate_quantile;
    unsigned threads = 1;
};

/// B x C matrix of posterior draws. Columns are MSM coefficients or grid-point
/// values in grid order. Failed cells (per-draw positivity) hold NaN with the
/// reason recorded.
struct PosteriorMatrix {
    std::vector<std::string> column_labels;
    Eigen::MatrixXd values;
    std::vector<std::string> failures;  // "draw b: reason"
};

namespace detail {

inline std::string grid_label(const std::vector<std::string>& names,
                              const std::vector<double>& psi) {
    std::string s;
    for (std::size_t d = 0; d < psi.size(); ++d) {
        if (d) s += '_';
        char buf[32];
        std::snprintf(buf, sizeof buf, "%g", psi[d]);
        s += names[d] + "=" + buf;
    }
    return s;
}

}  // namespace detail

/// Runs the Bayesian bootstrap (or its frequentist counterpart) for one of
/// the three estimators. Draw b uses seed base_seed + b, so any subset of
/// rows can be reproduced in isolation and parallel execution is
/// order-deterministic.
inline PosteriorMatrix run_bayes(const Dataset& data, const RegimeFamily& family,
                                 const BayesRun& run) {
    if (run.draws < 1) throw ConfigError("number of posterior draws must be >= 1");
    if (run.kind == EstimatorKind::Msm && run.normalized)
        throw ConfigError("normalized weights are unavailable with the MSM estimator");
    const std::size_t n = data.n();
    const int B = run.bayes ? run.draws : 1;

    // psi-independent of pi: enforced treatments and adherence masks per grid
    // point, shared across draws.
    RowBindings rows(data);
    std::vector<Eigen::MatrixXi> g_pts, adh_pts;
    const std::size_t K = data.stages();
    for (const auto& psi : run.grid) {
        Eigen::MatrixXi g = enforced_treatments(data, family, psi, rows);
        Eigen::MatrixXi adh = Eigen::MatrixXi::Zero(n, K);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < K; ++k) {
                if (data.treatment(i, k) != g(i, k)) break;
                adh(i, k) = 1;
            }
        g_pts.push_back(std::move(g));
        adh_pts.push_back(std::move(adh));
    }

    PosteriorMatrix pm;
    if (run.kind == EstimatorKind::Msm) {
        pm.column_labels.push_back("intercept");
        for (const auto& t : run.msm_model.terms) pm.column_labels.push_back(t.text());
    } else {
        for (const auto& psi : run.grid)
            pm.column_labels.push_back(detail::grid_label(family.psi_names, psi));
    }
    pm.values.setConstant(B, pm.column_labels.size(),
                          std::numeric_limits<double>::quiet_NaN());

    std::vector<std::vector<std::string>> thread_failures(std::max(1u, run.threads));

    auto do_draw = [&](int b, std::vector<std::string>& fail_log) {
        Eigen::VectorXd pi;
        long draw_id;
        if (run.bayes) {
            DirichletDraw d = dirichlet_draw(n, run.base_seed + static_cast<std::uint64_t>(b));
            pi = d.pi;
            draw_id = b;
        } else {
            pi = Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
            draw_id = -1;
        }
        try {
            PropensityFit pf = fit_propensities(data, run.treat_models, pi);
            switch (run.kind) {
                case EstimatorKind::Msm: {
                    MsmSpec spec;
                    spec.model = run.msm_model;
                    spec.grid = run.grid;
                    spec.grid_names = family.psi_names;
                    spec = msm_fit(data, family, spec, pf, pi);
                    for (Eigen::Index j = 0; j < spec.beta.size(); ++j)
                        pm.values(b - 1, j) = spec.beta(j);
                    break;
                }
                case EstimatorKind::GridIpw: {
                    for (std::size_t j = 0; j < run.grid.size(); ++j) {
                        try {
                            WeightVector wv =
                                weights_from_adherence(adh_pts[j], run.grid[j], pf,
                                                       run.normalized, pi,
                                                       run.truncate_quantile);
                            pm.values(b - 1, j) = value_ipw(data, wv, pi).value;
                        } catch (const PositivityError& e) {
                            fail_log.push_back("draw " + std::to_string(b) + ": " + e.what());
                        }
                    }
                    break;
                }
                case EstimatorKind::GridDr: {
                    DrEngine engine(data, family, run.outcome_models, pi);
                    for (std::size_t j = 0; j < run.grid.size(); ++j) {
                        try {
                            WeightVector wv =
                                weights_from_adherence(adh_pts[j], run.grid[j], pf,
                                                       /*normalized=*/false, pi,
                                                       run.truncate_quantile);
                            DrRecursion dr = engine.fit_with(g_pts[j]);
                            pm.values(b - 1, j) =
                                value_dr(data, wv, dr, pi, run.normalized).value;
                        } catch (const PositivityError& e) {
                            fail_log.push_back("draw " + std::to_string(b) + ": " + e.what());
                        }
                    }
                    break;
                }
            }
        } catch (const Error& e) {
            fail_log.push_back("draw " + std::to_string(b) + ": " + e.what());
        }
    };

    unsigned n_threads = std::max(1u, run.threads);
    if (n_threads == 1 || B == 1) {
        for (int b = 1; b <= B; ++b) do_draw(b, thread_failures[0]);
    } else {
        std::vector<std::thread> workers;
        for (unsigned t = 0; t < n_threads; ++t) {
            workers.emplace_back([&, t]() {
                for (int b = 1 + static_cast<int>(t); b <= B;
                     b += static_cast<int>(n_threads))
                    do_draw(b, thread_failures[t]);
            });
        }
        for (auto& w : workers) w.join();
    }
    for (auto& fl : thread_failures)
        for (auto& f : fl) pm.failures.push_back(std::move(f));
    std::sort(pm.failures.begin(), pm.failures.end());

    for (Eigen::Index j = 0; j < pm.values.cols(); ++j)
        if (pm.values.col(j).array().isNaN().all())
            throw PositivityError("column '" + pm.column_labels[j] +
                                  "' failed in every posterior draw");
    return pm;
}

// ---------------------------------------------------------------------------
// Posterior optima and individualized inference
// ---------------------------------------------------------------------------

struct DrawOptimum {
    std::vector<double> psi;
    double value = 0.0;
};

/// Per-draw optimum. Grid modes: argmax over columns, ties to the lowest grid
/// index. MSM mode: analytic/grid maximization of the fitted model per draw.
inline std::vector<DrawOptimum> posterior_optimum(const PosteriorMatrix& pm,
                                                  const BayesRun& run,
                                                  const RegimeFamily& family) {
    std::vector<DrawOptimum> out;
    out.reserve(pm.values.rows());
    for (Eigen::Index b = 0; b < pm.values.rows(); ++b) {
        DrawOptimum opt;
        if (run.kind == EstimatorKind::Msm) {
            MsmSpec spec;
            spec.model = run.msm_model;
            spec.beta = pm.values.row(b).transpose();
            auto [psi, value] = msm_argmax(spec, family);
            opt.psi = psi;
            opt.value = value;
        } else {
            double best = -std::numeric_limits<double>::infinity();
            long best_j = -1;
            for (Eigen::Index j = 0; j < pm.values.cols(); ++j) {
                double v = pm.values(b, j);
                if (!std::isnan(v) && v > best) {
                    best = v;
                    best_j = j;
                }
            }
            if (best_j < 0) continue;  // wholly failed draw, skip
            opt.psi = run.grid[static_cast<std::size_t>(best_j)];
            opt.value = best;
        }
        out.push_back(std::move(opt));
    }
    return out;
}

/// Fraction of posterior draws under which the stage-k rule assigns treatment
/// to a patient with covariates x_new.
inline double individualized_prob(const std::vector<DrawOptimum>& optima,
                                  const RegimeFamily& family, std::size_t stage,
                                  const std::unordered_map<std::string, double>& x_new) {
    if (stage >= family.stages()) throw ConfigError("stage out of range");
    if (optima.empty()) throw ConfigError("empty posterior optimum sample");
    const RuleExpr& rule = family.rules[stage];
    double count = 0.0;
    for (const auto& opt : optima) {
        auto psi_map = family.psi_map(opt.psi);
        count += eval_rule(rule, x_new, psi_map);
    }
    return count / static_cast<double>(optima.size());
}

// ---------------------------------------------------------------------------
// CSV emission
// ---------------------------------------------------------------------------

inline void write_posterior_csv(const PosteriorMatrix& pm, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open file for writing: " + path);
    for (std::size_t j = 0; j < pm.column_labels.size(); ++j)
        out << (j ? "," : "") << pm.column_labels[j];
    out << '\n';
    char buf[64];
    for (Eigen::Index b = 0; b < pm.values.rows(); ++b) {
        for (Eigen::Index j = 0; j < pm.values.cols(); ++j) {
            if (j) out << ',';
            if (std::isnan(pm.values(b, j))) {
                out << "NA";
            } else {
                std::snprintf(buf, sizeof buf, "%.17g", pm.values(b, j));
                out << buf;
            }
        }
        out << '\n';
    }
}

/// Per-column {median, 2.5%, 97.5%} quantiles over non-failed draws.
inline void write_summary_csv(const PosteriorMatrix& pm, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open file for writing: " + path);
    out << "column,median,q2.5,q97.5\n";
    auto quantile = [](std::vector<double>& v, double q) {
        std::sort(v.begin(), v.end());
        double pos = q * static_cast<double>(v.size() - 1);
        std::size_t lo = static_cast<std::size_t>(pos);
        std::size_t hi = std::min(lo + 1, v.size() - 1);
        double frac = pos - static_cast<double>(lo);
        return v[lo] * (1.0 - frac) + v[hi] * frac;
    };
    char buf[64];
    for (Eigen::Index j = 0; j < pm.values.cols(); ++j) {
        std::vector<double> col;
        for (Eigen::Index b = 0; b < pm.values.rows(); ++b)
            if (!std::isnan(pm.values(b, j))) col.push_back(pm.values(b, j));
        out << pm.column_labels[j];
        for (double q : {0.5, 0.025, 0.975}) {
            std::vector<double> tmp = col;
            std::snprintf(buf, sizeof buf, "%.10g", quantile(tmp, q));
            out << ',' << buf;
        }
        out << '\n';
    }
}

}  // namespace dtropt
