#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dtropt/dsl.hpp"
#include "dtropt/errors.hpp"
#include "dtropt/regress.hpp"
#include "dtropt/tabular.hpp"

namespace dtropt {

// ---------------------------------------------------------------------------
// Adherence
// ---------------------------------------------------------------------------

/// Per-patient name->value maps, built once and reused across psi points.
class RowBindings {
public:
    explicit RowBindings(const Dataset& data) {
        maps_.reserve(data.n());
        for (std::size_t i = 0; i < data.n(); ++i) {
            std::unordered_map<std::string, double> m;
            for (const auto& name : data.column_names()) m[name] = data.value(name, i);
            maps_.push_back(std::move(m));
        }
    }
    const std::unordered_map<std::string, double>& operator[](std::size_t i) const {
        return maps_[i];
    }
    std::size_t size() const { return maps_.size(); }

private:
    std::vector<std::unordered_map<std::string, double>> maps_;
};

/// Enforced treatments g_k(x_i; psi): n x K matrix of {0,1}.
inline Eigen::MatrixXi enforced_treatments(const Dataset& data, const RegimeFamily& family,
                                           const std::vector<double>& psi,
                                           const RowBindings& rows) {
    const std::size_t n = data.n(), K = family.stages();
    auto psi_map = family.psi_map(psi);
    Eigen::MatrixXi g(n, K);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < K; ++k)
            g(i, k) = eval_rule(family.rules[k], rows[i], psi_map);
    return g;
}

inline Eigen::MatrixXi enforced_treatments(const Dataset& data, const RegimeFamily& family,
                                           const std::vector<double>& psi) {
    return enforced_treatments(data, family, psi, RowBindings(data));
}

/// True iff patient i's observed treatments match the regime through stage k
/// (0-based, inclusive).
inline bool adheres(const Dataset& data, const RegimeFamily& family,
                    const std::vector<double>& psi, std::size_t i, std::size_t k) {
    auto psi_map = family.psi_map(psi);
    std::unordered_map<std::string, double> row;
    for (const auto& name : data.column_names()) row[name] = data.value(name, i);
    for (std::size_t j = 0; j <= k; ++j)
        if (data.treatment(i, j) != eval_rule(family.rules[j], row, psi_map)) return false;
    return true;
}

/// n x K matrix: entry (i,k) = 1 iff patient i is adherent through stage k.
inline Eigen::MatrixXi adherence_through(const Dataset& data, const RegimeFamily& family,
                                         const std::vector<double>& psi,
                                         const RowBindings& rows) {
    const std::size_t n = data.n(), K = family.stages();
    Eigen::MatrixXi g = enforced_treatments(data, family, psi, rows);
    Eigen::MatrixXi adh = Eigen::MatrixXi::Zero(n, K);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < K; ++k) {
            if (data.treatment(i, k) != g(i, k)) break;
            adh(i, k) = 1;
        }
    }
    return adh;
}

// ---------------------------------------------------------------------------
// Compiled designs: formula columns resolved to raw arrays once, so design
// matrices can be rebuilt per psi without per-entry name lookups.
// ---------------------------------------------------------------------------

class CompiledDesign {
public:
    CompiledDesign(const ModelFormula& formula, const Dataset& data)
        : formula_(formula), n_(data.n()) {
        for (const auto& t : formula.terms) {
            terms_.push_back({t.kind, resolve(data, t.a),
                              t.kind == FormulaTerm::Kind::Interaction ? resolve(data, t.b)
                                                                       : Var{}});
        }
    }

    std::size_t cols() const { return terms_.size() + 1; }

    /// Builds the design matrix. Treatment columns for stages with
    /// enforce[stage] set are replaced by the enforced values in g.
    Eigen::MatrixXd build(const Eigen::MatrixXi* g, const std::vector<bool>& enforce) const {
        Eigen::MatrixXd X(n_, cols());
        X.col(0).setOnes();
        for (std::size_t j = 0; j < terms_.size(); ++j) {
            const auto& t = terms_[j];
            for (std::size_t i = 0; i < n_; ++i) {
                double a = fetch(t.a, i, g, enforce);
                double v;
                switch (t.kind) {
                    case FormulaTerm::Kind::Main: v = a; break;
                    case FormulaTerm::Kind::Interaction:
                        v = a * fetch(t.b, i, g, enforce);
                        break;
                    default: v = a * a;
                }
                X(i, j + 1) = v;
            }
        }
        return X;
    }

    Eigen::MatrixXd build_observed() const { return build(nullptr, {}); }

private:
    struct Var {
        const std::vector<double>* col = nullptr;
        int treat_stage = -1;  // >= 0 if the variable is a treatment column
    };
    struct Term {
        FormulaTerm::Kind kind;
        Var a, b;
    };

    static Var resolve(const Dataset& data, const std::string& name) {
        Var v;
        v.col = &data.column(name);
        for (std::size_t k = 0; k < data.treat_cols().size(); ++k)
            if (data.treat_cols()[k] == name) v.treat_stage = static_cast<int>(k);
        return v;
    }

    double fetch(const Var& v, std::size_t i, const Eigen::MatrixXi* g,
                 const std::vector<bool>& enforce) const {
        if (g && v.treat_stage >= 0 && static_cast<std::size_t>(v.treat_stage) < enforce.size() &&
            enforce[v.treat_stage])
            return static_cast<double>((*g)(i, v.treat_stage));
        return (*v.col)[i];
    }

    ModelFormula formula_;
    std::size_t n_;
    std::vector<Term> terms_;
};

// ---------------------------------------------------------------------------
// Propensities and IPW weights
// ---------------------------------------------------------------------------

struct PropensityFit {
    std::vector<ModelFormula> formulas;         // one per stage
    std::vector<Eigen::VectorXd> coefficients;  // gamma_k
    Eigen::MatrixXd prob_received;              // n x K, P(treatment actually received)
};

/// Fits one weighted logistic regression per stage on the full sample. The
/// response of formula k must be the stage-k treatment column.
inline PropensityFit fit_propensities(const Dataset& data,
                                      const std::vector<ModelFormula>& formulas,
                                      const Eigen::VectorXd& pi) {
    const std::size_t n = data.n(), K = data.stages();
    if (formulas.size() != K)
        throw ConfigError("expected " + std::to_string(K) + " treatment model formulas, got " +
                          std::to_string(formulas.size()));
    PropensityFit pf;
    pf.formulas = formulas;
    pf.prob_received.resize(n, K);
    for (std::size_t k = 0; k < K; ++k) {
        if (formulas[k].response != data.treat_cols()[k])
            throw ConfigError("treatment model " + std::to_string(k + 1) + " has response '" +
                              formulas[k].response + "', expected '" + data.treat_cols()[k] + "'");
        auto [X, z] = design_matrix(formulas[k], data);
        FitResult fit = logistic_irls(X, z, pi);
        pf.coefficients.push_back(fit.coefficients);
        for (std::size_t i = 0; i < n; ++i) {
            double mu = fit.fitted(i);
            pf.prob_received(i, k) = data.treatment(i, k) == 1 ? mu : 1.0 - mu;
        }
    }
    return pf;
}

enum class WeightKind { Raw, Normalized };

struct WeightVector {
    std::vector<double> psi;
    WeightKind kind = WeightKind::Raw;
    Eigen::MatrixXd stage;  // n x K cumulative weights w_ik (normalized ones fold pi in)
    Eigen::VectorXd final;  // last column of `stage`
};

namespace detail {

inline std::string psi_text(const std::vector<double>& psi) {
    std::string s = "(";
    for (std::size_t d = 0; d < psi.size(); ++d) s += (d ? "," : "") + std::to_string(psi[d]);
    return s + ")";
}

}  // namespace detail

/// Weights from a precomputed adherence mask (adherent-through-k indicators).
inline WeightVector weights_from_adherence(const Eigen::MatrixXi& adh,
                                           const std::vector<double>& psi,
                                           const PropensityFit& pf, bool normalized,
                                           const Eigen::VectorXd& pi,
                                           std::optional<double> truncate_quantile =
                                               std::nullopt) {
    const std::size_t n = adh.rows(), K = adh.cols();
    WeightVector wv;
    wv.psi = psi;
    wv.kind = normalized ? WeightKind::Normalized : WeightKind::Raw;
    wv.stage.setZero(n, K);
    for (std::size_t i = 0; i < n; ++i) {
        double cum = 1.0;
        for (std::size_t k = 0; k < K; ++k) {
            if (!adh(i, k)) break;
            cum /= pf.prob_received(i, k);
            wv.stage(i, k) = cum;
        }
    }
    if (truncate_quantile) {
        for (std::size_t k = 0; k < K; ++k) {
            std::vector<double> pos;
            for (std::size_t i = 0; i < n; ++i)
                if (wv.stage(i, k) > 0.0) pos.push_back(wv.stage(i, k));
            if (pos.empty()) continue;
            std::sort(pos.begin(), pos.end());
            std::size_t idx = std::min(
                pos.size() - 1,
                static_cast<std::size_t>(*truncate_quantile * (pos.size() - 1) + 0.5));
            double cap = pos[idx];
            for (std::size_t i = 0; i < n; ++i)
                wv.stage(i, k) = std::min(wv.stage(i, k), cap);
        }
    }
    for (std::size_t k = 0; k < K; ++k) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += pi(i) * wv.stage(i, k);
        if (s <= 0.0)
            throw PositivityError("no adherent patients at psi=" + detail::psi_text(psi) +
                                  ", stage " + std::to_string(k + 1));
        if (normalized)
            for (std::size_t i = 0; i < n; ++i) wv.stage(i, k) = pi(i) * wv.stage(i, k) / s;
    }
    wv.final = wv.stage.col(K - 1);
    return wv;
}

/// IPW weights at psi. Raw: w_ik = adherent-through-k ? 1/prod_{j<=k} p_ij : 0.
/// Normalized (Hajek): \bar w_ik = pi_i raw_ik / sum_j pi_j raw_jk, per stage.
inline WeightVector ipw_weights(const Dataset& data, const RegimeFamily& family,
                                const std::vector<double>& psi, const PropensityFit& pf,
                                bool normalized, const Eigen::VectorXd& pi,
                                std::optional<double> truncate_quantile = std::nullopt) {
    RowBindings rows(data);
    Eigen::MatrixXi adh = adherence_through(data, family, psi, rows);
    return weights_from_adherence(adh, psi, pf, normalized, pi, truncate_quantile);
}

struct ValueEstimate {
    double value = 0.0;
    std::string estimator;
    std::vector<double> psi;
    long draw_id = -1;  // -1 for frequentist
};

/// IPW value estimate. Raw: sum_i pi_i w_iK y_i; normalized weights already
/// fold pi in, so the estimate is sum_i \bar w_iK y_i.
inline ValueEstimate value_ipw(const Dataset& data, const WeightVector& wv,
                               const Eigen::VectorXd& pi) {
    double v = 0.0;
    for (std::size_t i = 0; i < data.n(); ++i) {
        double w = wv.final(i);
        if (wv.kind == WeightKind::Raw) w *= pi(i);
        v += w * data.outcome(i);
    }
    ValueEstimate e;
    e.value = v;
    e.estimator = wv.kind == WeightKind::Raw ? "ipw-raw" : "ipw-normalized";
    e.psi = wv.psi;
    return e;
}

// ---------------------------------------------------------------------------
// Doubly robust recursion
// ---------------------------------------------------------------------------

struct DrRecursion {
    std::vector<Eigen::VectorXd> tau;  // per-stage Q-model coefficients
    Eigen::MatrixXd pseudo;            // n x K pseudo-outcomes Delta_ik
    Eigen::MatrixXd phi;               // n x K regime-enforced predictions phi_ik
};

/// Backward Q-model recursion for the DR estimator. Stage designs do not
/// depend on psi, so their weighted QR factorizations are computed once and
/// reused across grid points; only responses and enforced-treatment
/// predictions change with psi.
class DrEngine {
public:
    DrEngine(const Dataset& data, const RegimeFamily& family,
             const std::vector<ModelFormula>& outcome_formulas, const Eigen::VectorXd& pi)
        : data_(data), family_(family), formulas_(outcome_formulas), pi_(pi), rows_(data) {
        const std::size_t K = data.stages();
        if (formulas_.size() != K)
            throw ConfigError("expected " + std::to_string(K) + " outcome model formulas, got " +
                              std::to_string(formulas_.size()));
        if (formulas_[K - 1].response != data.outcome_col())
            throw ConfigError("final outcome model must have response '" + data.outcome_col() +
                              "', got '" + formulas_[K - 1].response + "'");
        for (std::size_t k = 0; k + 1 < K; ++k)
            if (formulas_[k].response != kPseudoOutcome)
                throw ConfigError("outcome model " + std::to_string(k + 1) +
                                  " must have response '" + kPseudoOutcome + "', got '" +
                                  formulas_[k].response + "'");
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t j = k + 1; j < K; ++j)
                if (formulas_[k].references(data.treat_cols()[j]))
                    throw ConfigError("outcome model " + std::to_string(k + 1) +
                                      " references future treatment " + data.treat_cols()[j]);

        sqrt_pi_ = pi_.array().max(0.0).sqrt();
        for (std::size_t k = 0; k < K; ++k) {
            designs_.emplace_back(formulas_[k], data_);
            Eigen::MatrixXd Xw = sqrt_pi_.asDiagonal() * designs_.back().build_observed();
            qr_.emplace_back(Xw);
            qr_.back().setThreshold(1e-10);
            detail::check_rank(qr_.back(), Xw.cols());
        }
        outcome_.resize(data_.n());
        for (std::size_t i = 0; i < data_.n(); ++i) outcome_(i) = data_.outcome(i);
    }

    DrRecursion fit(const std::vector<double>& psi) const {
        return fit_with(enforced_treatments(data_, family_, psi, rows_));
    }

    /// Same as fit() with a precomputed enforced-treatment matrix.
    DrRecursion fit_with(const Eigen::MatrixXi& g) const {
        const std::size_t n = data_.n(), K = data_.stages();
        DrRecursion dr;
        dr.tau.resize(K);
        dr.pseudo.resize(n, K);
        dr.phi.resize(n, K);

        Eigen::VectorXd response = outcome_;
        for (std::size_t k = K; k-- > 0;) {
            dr.tau[k] = qr_[k].solve((sqrt_pi_.array() * response.array()).matrix());
            // pseudo-outcome: only stage k's treatment enforced
            std::vector<bool> only_k(K, false);
            only_k[k] = true;
            dr.pseudo.col(k) = designs_[k].build(&g, only_k) * dr.tau[k];
            response = dr.pseudo.col(k);  // becomes the stage k-1 response
        }
        for (std::size_t k = 0; k < K; ++k) {
            // phi: all treatments through stage k enforced
            std::vector<bool> through(K, false);
            for (std::size_t j = 0; j <= k; ++j) through[j] = true;
            dr.phi.col(k) = designs_[k].build(&g, through) * dr.tau[k];
        }
        return dr;
    }

    const RowBindings& rows() const { return rows_; }

private:
    const Dataset& data_;
    const RegimeFamily& family_;
    std::vector<ModelFormula> formulas_;
    Eigen::VectorXd pi_;
    Eigen::VectorXd sqrt_pi_;
    Eigen::VectorXd outcome_;
    RowBindings rows_;
    std::vector<CompiledDesign> designs_;
    std::vector<Eigen::ColPivHouseholderQR<Eigen::MatrixXd>> qr_;
};

inline DrRecursion fit_dr_recursion(const Dataset& data, const RegimeFamily& family,
                                    const std::vector<double>& psi,
                                    const std::vector<ModelFormula>& outcome_formulas,
                                    const Eigen::VectorXd& pi) {
    return DrEngine(data, family, outcome_formulas, pi).fit(psi);
}

/// Doubly robust value estimate:
///   sum_i pi_i [phi_1 + sum_{k=2}^K w_{k-1}(phi_k - phi_{k-1}) + w_K(y - phi_K)].
/// `wv_raw` must carry raw stage-cumulative weights. With `normalized`,
/// pi_i w_ik is replaced by the Hajek-normalized weight.
inline ValueEstimate value_dr(const Dataset& data, const WeightVector& wv_raw,
                              const DrRecursion& dr, const Eigen::VectorXd& pi,
                              bool normalized = false) {
    const std::size_t n = data.n(), K = data.stages();
    if (wv_raw.kind != WeightKind::Raw)
        throw ConfigError("value_dr expects raw stage-cumulative weights");

    Eigen::MatrixXd w = wv_raw.stage;
    for (std::size_t k = 0; k < K; ++k) {
        if (normalized) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += pi(i) * w(i, k);
            if (s <= 0.0)
                throw PositivityError("no adherent patients at stage " + std::to_string(k + 1));
            for (std::size_t i = 0; i < n; ++i) w(i, k) = pi(i) * w(i, k) / s;
        } else {
            for (std::size_t i = 0; i < n; ++i) w(i, k) *= pi(i);
        }
    }

    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double term = pi(i) * dr.phi(i, 0);
        for (std::size_t k = 1; k < K; ++k)
            term += w(i, k - 1) * (dr.phi(i, k) - dr.phi(i, k - 1));
        term += w(i, K - 1) * (data.outcome(i) - dr.phi(i, K - 1));
        v += term;
    }
    ValueEstimate e;
    e.value = v;
    e.estimator = normalized ? "dr-normalized" : "dr";
    e.psi = wv_raw.psi;
    return e;
}

// ---------------------------------------------------------------------------
// Dynamic MSM
// ---------------------------------------------------------------------------

struct MsmSpec {
    ModelFormula model;                     // h(beta, psi), response = outcome
    std::vector<std::vector<double>> grid;  // augmentation grid over psi
    std::vector<std::string> grid_names;    // psi column labels of the grid
    Eigen::VectorXd beta;                   // filled by msm_fit
};

/// Fits h(beta, psi) by WLS on the regime-augmented dataset: one row per
/// (adherent patient, grid point) with weight pi_i * w_i^psi (raw weights).
inline MsmSpec msm_fit(const Dataset& data, const RegimeFamily& family, MsmSpec spec,
                       const PropensityFit& pf, const Eigen::VectorXd& pi) {
    if (spec.grid.empty()) throw ConfigError("MSM grid is empty");
    if (spec.grid_names != family.psi_names)
        throw ConfigError("MSM grid psi column names do not match the regime family");
    for (const auto& var : spec.model.variables())
        if (std::find(family.psi_names.begin(), family.psi_names.end(), var) ==
            family.psi_names.end())
            throw ConfigError("MSM model term '" + var + "' is not a psi coordinate");

    const std::size_t n = data.n(), K = data.stages();
    RowBindings rows(data);
    std::vector<double> aug_w, aug_y;
    std::vector<const std::vector<double>*> aug_psi;
    for (const auto& psi : spec.grid) {
        Eigen::MatrixXi adh = adherence_through(data, family, psi, rows);
        for (std::size_t i = 0; i < n; ++i) {
            if (!adh(i, K - 1)) continue;
            double cum = 1.0;
            for (std::size_t k = 0; k < K; ++k) cum /= pf.prob_received(i, k);
            aug_w.push_back(pi(i) * cum);
            aug_y.push_back(data.outcome(i));
            aug_psi.push_back(&psi);
        }
    }
    if (aug_w.empty())
        throw PositivityError("no patient adheres to any regime on the MSM grid");

    const std::size_t m = aug_w.size();
    RowGetter getter = [&](const std::string& name, std::size_t r) -> double {
        for (std::size_t d = 0; d < family.psi_names.size(); ++d)
            if (name == family.psi_names[d]) return (*aug_psi[r])[d];
        throw EvalError("unbound identifier in MSM design: " + name);
    };
    auto [X, ignored] = design_matrix(spec.model, getter, m, /*with_response=*/false);
    Eigen::VectorXd y = Eigen::Map<Eigen::VectorXd>(aug_y.data(), m);
    Eigen::VectorXd w = Eigen::Map<Eigen::VectorXd>(aug_w.data(), m);
    FitResult fit = wls(X, y, w);
    spec.beta = fit.coefficients;
    return spec;
}

/// Evaluates the fitted MSM at a psi point.
inline double msm_eval(const MsmSpec& spec, const RegimeFamily& family,
                       const std::vector<double>& psi) {
    RowGetter getter = [&](const std::string& name, std::size_t) -> double {
        for (std::size_t d = 0; d < family.psi_names.size(); ++d)
            if (name == family.psi_names[d]) return psi[d];
        throw EvalError("unbound identifier: " + name);
    };
    auto [X, ignored] = design_matrix(spec.model, getter, 1, /*with_response=*/false);
    return (X * spec.beta)(0);
}

/// Maximizes the fitted MSM over the domain box. Pure quadratics with a
/// negative-definite quadratic part are solved analytically (stationary point
/// clipped to the box); everything else falls back to a dense grid at 1/500
/// resolution per side, ties toward the lexicographically smallest psi.
inline std::pair<std::vector<double>, double> msm_argmax(const MsmSpec& spec,
                                                         const RegimeFamily& family) {
    const std::size_t D = family.dim();
    const auto& dom = family.domain;

    // Try to assemble h(psi) = c + b'psi + psi'Q psi from the terms.
    Eigen::VectorXd b = Eigen::VectorXd::Zero(D);
    Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(D, D);
    bool quadratic = true;
    auto coord = [&](const std::string& name) -> long {
        for (std::size_t d = 0; d < D; ++d)
            if (family.psi_names[d] == name) return static_cast<long>(d);
        return -1;
    };
    for (std::size_t j = 0; j < spec.model.terms.size(); ++j) {
        const auto& t = spec.model.terms[j];
        double beta = spec.beta(j + 1);
        if (t.kind == FormulaTerm::Kind::Main) {
            long d = coord(t.a);
            if (d < 0) { quadratic = false; break; }
            b(d) += beta;
        } else if (t.kind == FormulaTerm::Kind::Square) {
            long d = coord(t.a);
            if (d < 0) { quadratic = false; break; }
            Q(d, d) += beta;
        } else {
            long d1 = coord(t.a), d2 = coord(t.b);
            if (d1 < 0 || d2 < 0) { quadratic = false; break; }
            Q(d1, d2) += beta / 2.0;
            Q(d2, d1) += beta / 2.0;
        }
    }
    if (quadratic) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Q);
        if (es.eigenvalues().maxCoeff() < 0.0) {
            Eigen::VectorXd psi_star = -0.5 * Q.ldlt().solve(b);
            std::vector<double> psi(D);
            for (std::size_t d = 0; d < D; ++d)
                psi[d] = std::clamp(psi_star(d), dom[d].first, dom[d].second);
            return {psi, msm_eval(spec, family, psi)};
        }
    }

    // Dense grid fallback (also covers convex fits, whose maximum sits on the
    // box boundary). Iterates in lexicographic order with strict improvement,
    // so ties resolve to the smallest psi.
    const std::size_t steps = 500;
    std::vector<double> best;
    double best_val = -std::numeric_limits<double>::infinity();
    std::vector<std::size_t> idx(D, 0);
    std::vector<double> psi(D);
    bool done = false;
    while (!done) {
        for (std::size_t d = 0; d < D; ++d) {
            double lo = dom[d].first, hi = dom[d].second;
            psi[d] = lo + (hi - lo) * static_cast<double>(idx[d]) / steps;
        }
        double v = msm_eval(spec, family, psi);
        if (v > best_val) {
            best_val = v;
            best = psi;
        }
        done = true;
        for (std::size_t d = D; d-- > 0;) {
            if (++idx[d] <= steps) {
                done = false;
                break;
            }
            idx[d] = 0;
        }
    }
    return {best, best_val};
}

}  // namespace dtropt
