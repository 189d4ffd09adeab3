#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "dtropt/errors.hpp"
#include "dtropt/rng.hpp"

namespace dtropt {

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

enum class KernelKind { Matern32, Matern52 };

struct KernelSpec {
    KernelKind kind = KernelKind::Matern52;
    Eigen::VectorXd theta;  // per-dimension lengthscales, all > 0
    double sigma2_f = 1.0;
};

/// Product-form Matern correlation (sigma2 = 1).
inline double correlation(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                          KernelKind kind, const Eigen::VectorXd& theta) {
    double r = 1.0;
    for (Eigen::Index d = 0; d < a.size(); ++d) {
        double h = std::abs(a(d) - b(d)) / theta(d);
        if (kind == KernelKind::Matern32) {
            double s = std::sqrt(3.0) * h;
            r *= (1.0 + s) * std::exp(-s);
        } else {
            double s = std::sqrt(5.0) * h;
            r *= (1.0 + s + 5.0 * h * h / 3.0) * std::exp(-s);
        }
    }
    return r;
}

inline double kernel_eval(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                          const KernelSpec& spec) {
    return spec.sigma2_f * correlation(a, b, spec.kind, spec.theta);
}

inline Eigen::MatrixXd correlation_matrix(const Eigen::MatrixXd& design, KernelKind kind,
                                          const Eigen::VectorXd& theta) {
    const Eigen::Index m = design.rows();
    Eigen::MatrixXd R(m, m);
    for (Eigen::Index i = 0; i < m; ++i) {
        R(i, i) = 1.0;
        for (Eigen::Index j = i + 1; j < m; ++j) {
            double r = correlation(design.row(i), design.row(j), kind, theta);
            R(i, j) = r;
            R(j, i) = r;
        }
    }
    return R;
}

// ---------------------------------------------------------------------------
// Cholesky with jitter escalation
// ---------------------------------------------------------------------------

namespace gpdetail {

/// Relative jitter 1e-8 * trace(C)/m, escalated x10 up to 1e-4, then error.
inline std::pair<Eigen::LLT<Eigen::MatrixXd>, double> chol_with_jitter(Eigen::MatrixXd C) {
    const Eigen::Index m = C.rows();
    double scale = C.trace() / static_cast<double>(m);
    for (double rel = 1e-8; rel <= 1e-4 * 1.0000001; rel *= 10.0) {
        Eigen::MatrixXd Cj = C;
        Cj.diagonal().array() += rel * scale;
        Eigen::LLT<Eigen::MatrixXd> llt(Cj);
        if (llt.info() == Eigen::Success) return {llt, rel * scale};
    }
    throw ConditioningError(
        "covariance factorization failed after jitter escalation (nearly duplicate points?)");
}

inline double log_det(const Eigen::LLT<Eigen::MatrixXd>& llt) {
    return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

}  // namespace gpdetail

// ---------------------------------------------------------------------------
// Concentrated (penalized) likelihood
// ---------------------------------------------------------------------------

/// Independent log-normal priors on the lengthscales.
struct PriorSpec {
    std::vector<std::pair<double, double>> lognormal;  // (mu_d, sigma_d), sigma_d > 0
};

/// Negative concentrated log-likelihood in (theta, alpha), with mu0 and the
/// total variance v profiled out analytically:
///   C = alpha R + (1-alpha) I,
///   mu0 = (1'C^-1 y)/(1'C^-1 1),  v = (y-mu0)'C^-1(y-mu0)/m,
///   nll = (m/2) log v + (1/2) log det C  [- log prior(theta) if supplied].
inline double concentrated_nll(const Eigen::VectorXd& theta, double alpha,
                               const Eigen::MatrixXd& design, const Eigen::VectorXd& responses,
                               KernelKind kind, const PriorSpec* prior = nullptr) {
    const Eigen::Index m = design.rows();
    if (m < 2) throw ConfigError("GP requires at least 2 design points");
    Eigen::MatrixXd C = alpha * correlation_matrix(design, kind, theta);
    C.diagonal().array() += 1.0 - alpha;
    auto [llt, jitter] = gpdetail::chol_with_jitter(std::move(C));

    Eigen::VectorXd ones = Eigen::VectorXd::Ones(m);
    Eigen::VectorXd Ci1 = llt.solve(ones);
    Eigen::VectorXd Ciy = llt.solve(responses);
    double mu0 = responses.dot(Ci1) / ones.dot(Ci1);
    Eigen::VectorXd resid = responses.array() - mu0;
    double v = resid.dot(Ciy - mu0 * Ci1) / static_cast<double>(m);
    v = std::max(v, 1e-300);

    double nll = 0.5 * static_cast<double>(m) * std::log(v) + 0.5 * gpdetail::log_det(llt);
    if (prior) {
        for (std::size_t d = 0; d < prior->lognormal.size(); ++d) {
            auto [mu_d, sd_d] = prior->lognormal[d];
            double lt = std::log(theta(static_cast<Eigen::Index>(d)));
            double logp = -(lt - mu_d) * (lt - mu_d) / (2.0 * sd_d * sd_d) -
                          std::log(theta(static_cast<Eigen::Index>(d)) * sd_d *
                                   std::sqrt(2.0 * 3.14159265358979323846));
            nll -= logp;
        }
    }
    return nll;
}

// ---------------------------------------------------------------------------
// Nelder-Mead (box-clamped), used for hyperparameter search and EI polish
// ---------------------------------------------------------------------------

namespace gpdetail {

inline Eigen::VectorXd clamp_to(const Eigen::VectorXd& x, const Eigen::VectorXd& lo,
                                const Eigen::VectorXd& hi) {
    return x.cwiseMax(lo).cwiseMin(hi);
}

inline std::pair<Eigen::VectorXd, double> nelder_mead(
    const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x0,
    const Eigen::VectorXd& lo, const Eigen::VectorXd& hi, int max_iter) {
    const Eigen::Index D = x0.size();
    std::vector<Eigen::VectorXd> pts;
    std::vector<double> vals;
    pts.push_back(clamp_to(x0, lo, hi));
    vals.push_back(f(pts[0]));
    for (Eigen::Index d = 0; d < D; ++d) {
        Eigen::VectorXd p = pts[0];
        double step = 0.1 * (hi(d) - lo(d));
        if (step == 0.0) step = 0.05;
        p(d) = (p(d) + step <= hi(d)) ? p(d) + step : p(d) - step;
        pts.push_back(clamp_to(p, lo, hi));
        vals.push_back(f(pts.back()));
    }
    auto order = [&]() {
        for (std::size_t i = 1; i < pts.size(); ++i)
            for (std::size_t j = i; j > 0 && vals[j] < vals[j - 1]; --j) {
                std::swap(vals[j], vals[j - 1]);
                std::swap(pts[j], pts[j - 1]);
            }
    };
    order();
    for (int it = 0; it < max_iter; ++it) {
        if (std::abs(vals.back() - vals.front()) <=
            1e-12 * (std::abs(vals.front()) + 1e-12))
            break;
        Eigen::VectorXd centroid = Eigen::VectorXd::Zero(D);
        for (std::size_t i = 0; i + 1 < pts.size(); ++i) centroid += pts[i];
        centroid /= static_cast<double>(D);
        Eigen::VectorXd worst = pts.back();
        Eigen::VectorXd refl = clamp_to(centroid + (centroid - worst), lo, hi);
        double f_refl = f(refl);
        if (f_refl < vals.front()) {
            Eigen::VectorXd exp_pt = clamp_to(centroid + 2.0 * (centroid - worst), lo, hi);
            double f_exp = f(exp_pt);
            if (f_exp < f_refl) {
                pts.back() = exp_pt;
                vals.back() = f_exp;
            } else {
                pts.back() = refl;
                vals.back() = f_refl;
            }
        } else if (f_refl < vals[vals.size() - 2]) {
            pts.back() = refl;
            vals.back() = f_refl;
        } else {
            Eigen::VectorXd contr = clamp_to(centroid + 0.5 * (worst - centroid), lo, hi);
            double f_contr = f(contr);
            if (f_contr < vals.back()) {
                pts.back() = contr;
                vals.back() = f_contr;
            } else {
                for (std::size_t i = 1; i < pts.size(); ++i) {
                    pts[i] = clamp_to(pts[0] + 0.5 * (pts[i] - pts[0]), lo, hi);
                    vals[i] = f(pts[i]);
                }
            }
        }
        order();
    }
    return {pts.front(), vals.front()};
}

}  // namespace gpdetail

// ---------------------------------------------------------------------------
// GP fit
// ---------------------------------------------------------------------------

struct GpOptions {
    KernelKind kind = KernelKind::Matern52;
    Eigen::VectorXd theta_lower;  // per-dimension bounds, positive
    Eigen::VectorXd theta_upper;
    int n_starts = 5;
    std::optional<PriorSpec> prior;
    std::uint64_t seed = 1;
};

struct GPFit {
    Eigen::MatrixXd design;     // m x D
    Eigen::VectorXd responses;  // m
    KernelKind kind = KernelKind::Matern52;
    Eigen::VectorXd theta;
    double alpha = 1.0;  // sigma2_f / (sigma2_f + gamma2)
    double v = 1.0;      // sigma2_f + gamma2
    double mu0 = 0.0;
    bool noise_free = false;
    double jitter = 0.0;
    GpOptions options;

    Eigen::LLT<Eigen::MatrixXd> llt;  // of C = alpha R + (1-alpha) I + jitter
    Eigen::VectorXd cweights;         // C^-1 (responses - mu0)

    double sigma2_f() const { return v * alpha; }
    double gamma2() const { return noise_free ? 0.0 : v * (1.0 - alpha); }

    std::size_t m() const { return static_cast<std::size_t>(design.rows()); }
    std::size_t dim() const { return static_cast<std::size_t>(design.cols()); }
};

namespace gpdetail {

inline void finalize_fit(GPFit& fit) {
    Eigen::MatrixXd C =
        fit.alpha * correlation_matrix(fit.design, fit.kind, fit.theta);
    C.diagonal().array() += 1.0 - fit.alpha;
    auto [llt, jitter] = chol_with_jitter(std::move(C));
    fit.llt = llt;
    fit.jitter = jitter;
    const Eigen::Index m = fit.design.rows();
    Eigen::VectorXd ones = Eigen::VectorXd::Ones(m);
    Eigen::VectorXd Ci1 = fit.llt.solve(ones);
    Eigen::VectorXd Ciy = fit.llt.solve(fit.responses);
    fit.mu0 = fit.responses.dot(Ci1) / ones.dot(Ci1);
    Eigen::VectorXd resid = fit.responses.array() - fit.mu0;
    fit.v = std::max(resid.dot(Ciy - fit.mu0 * Ci1) / static_cast<double>(m), 1e-300);
    fit.cweights = fit.llt.solve(resid);
}

}  // namespace gpdetail

/// Multi-start maximum (penalized) likelihood over (theta, alpha). Search runs
/// in log-theta coordinates; alpha may be pinned (re-interpolation uses 1).
/// The winner is selected by (objective, start index), so the result does not
/// depend on evaluation order.
inline GPFit fit_hyperparams(const Eigen::MatrixXd& design, const Eigen::VectorXd& responses,
                             const GpOptions& options,
                             std::optional<double> fixed_alpha = std::nullopt) {
    const Eigen::Index m = design.rows(), D = design.cols();
    if (m < 2) throw ConfigError("GP requires at least 2 design points");
    if (options.theta_lower.size() != D || options.theta_upper.size() != D)
        throw ConfigError("lengthscale bounds dimension mismatch");
    for (Eigen::Index d = 0; d < D; ++d)
        if (!(options.theta_lower(d) > 0.0 && options.theta_lower(d) < options.theta_upper(d)))
            throw ConfigError("lengthscale bounds must satisfy 0 < lower < upper");
    if (options.n_starts < 1) throw ConfigError("n_starts must be >= 1");

    const bool opt_alpha = !fixed_alpha.has_value();
    const Eigen::Index P = D + (opt_alpha ? 1 : 0);
    Eigen::VectorXd lo(P), hi(P);
    for (Eigen::Index d = 0; d < D; ++d) {
        lo(d) = std::log(options.theta_lower(d));
        hi(d) = std::log(options.theta_upper(d));
    }
    if (opt_alpha) {
        lo(D) = 0.0;
        hi(D) = 1.0;
    }
    const PriorSpec* prior = options.prior ? &*options.prior : nullptr;

    auto objective = [&](const Eigen::VectorXd& x) -> double {
        Eigen::VectorXd theta = x.head(D).array().exp();
        double alpha = opt_alpha ? x(D) : *fixed_alpha;
        try {
            return concentrated_nll(theta, alpha, design, responses, options.kind, prior);
        } catch (const ConditioningError&) {
            return std::numeric_limits<double>::infinity();
        }
    };

    double best_val = std::numeric_limits<double>::infinity();
    Eigen::VectorXd best_x;
    for (int s = 0; s < options.n_starts; ++s) {
        Eigen::VectorXd x0(P);
        if (s == 0) {
            x0.head(D) = 0.5 * (lo.head(D) + hi.head(D));
            if (opt_alpha) x0(D) = 0.5;
        } else {
            Rng rng(options.seed, static_cast<std::uint64_t>(s));
            for (Eigen::Index d = 0; d < D; ++d) x0(d) = rng.uniform(lo(d), hi(d));
            if (opt_alpha) x0(D) = rng.uniform();
        }
        auto [x, val] = gpdetail::nelder_mead(objective, x0, lo, hi, 300 * static_cast<int>(P));
        if (val < best_val) {
            best_val = val;
            best_x = x;
        }
    }
    if (!std::isfinite(best_val))
        throw ConditioningError("all hyperparameter starts failed to factorize");

    GPFit fit;
    fit.design = design;
    fit.responses = responses;
    fit.kind = options.kind;
    fit.options = options;
    fit.theta = best_x.head(D).array().exp();
    fit.alpha = opt_alpha ? best_x(D) : *fixed_alpha;
    fit.noise_free = fixed_alpha.has_value() && *fixed_alpha == 1.0;
    gpdetail::finalize_fit(fit);
    return fit;
}

// ---------------------------------------------------------------------------
// Prediction, re-interpolation, EI, sample paths
// ---------------------------------------------------------------------------

struct GpPrediction {
    double mean = 0.0;
    double var_f = 0.0;  // value-surface variance
    double var_v = 0.0;  // noisy-observation variance (var_f + gamma2)
};

inline GpPrediction posterior_predict(const GPFit& fit, const Eigen::VectorXd& x) {
    const Eigen::Index m = fit.design.rows();
    Eigen::VectorXd r(m);
    for (Eigen::Index i = 0; i < m; ++i)
        r(i) = correlation(x, fit.design.row(i), fit.kind, fit.theta);
    GpPrediction p;
    p.mean = fit.mu0 + fit.alpha * r.dot(fit.cweights);
    double quad = fit.alpha * fit.alpha * r.dot(fit.llt.solve(r));
    p.var_f = std::max(fit.v * (fit.alpha - quad), 0.0);
    p.var_v = p.var_f + fit.gamma2();
    return p;
}

/// Replaces responses with the posterior means at the design points and
/// refits with alpha pinned to 1 (noise-free). Already noise-free fits pass
/// through unchanged.
inline GPFit reinterpolate(const GPFit& fit) {
    if (fit.noise_free) return fit;
    const Eigen::Index m = fit.design.rows();
    Eigen::VectorXd smoothed(m);
    for (Eigen::Index i = 0; i < m; ++i)
        smoothed(i) = posterior_predict(fit, fit.design.row(i)).mean;
    return fit_hyperparams(fit.design, smoothed, fit.options, /*fixed_alpha=*/1.0);
}

/// EI formula in (mu, sigma): (mu - best) Phi(u) + sigma phi(u), u = (mu-best)/sigma;
/// 0 when sigma == 0.
inline double expected_improvement_value(double mu, double sigma, double v_max) {
    if (sigma <= 0.0) return 0.0;
    double u = (mu - v_max) / sigma;
    double pdf = std::exp(-0.5 * u * u) / std::sqrt(2.0 * 3.14159265358979323846);
    double cdf = 0.5 * std::erfc(-u / std::sqrt(2.0));
    return std::max((mu - v_max) * cdf + sigma * pdf, 0.0);
}

/// EI of the fit at x against the incumbent v_max. Variance at the jitter
/// floor is treated as zero so visited points of a re-interpolated fit score
/// exactly 0.
inline double expected_improvement(const GPFit& fit, const Eigen::VectorXd& x, double v_max) {
    GpPrediction p = posterior_predict(fit, x);
    double floor = 10.0 * fit.v * std::max(fit.jitter, 1e-8);
    if (p.var_v <= floor) return 0.0;
    return expected_improvement_value(p.mean, std::sqrt(p.var_v), v_max);
}

/// Global EI search: seeded differential evolution (population 10 D, best/1
/// mutation, crossover 0.9) followed by a Nelder-Mead polish. Deterministic
/// given the seed; the result never leaves the box.
inline std::pair<Eigen::VectorXd, double> maximize_ei(
    const GPFit& fit, const std::vector<std::pair<double, double>>& domain, int budget,
    std::uint64_t seed) {
    const Eigen::Index D = static_cast<Eigen::Index>(domain.size());
    Eigen::VectorXd lo(D), hi(D);
    for (Eigen::Index d = 0; d < D; ++d) {
        lo(d) = domain[d].first;
        hi(d) = domain[d].second;
    }
    double v_max = fit.responses.maxCoeff();
    auto ei = [&](const Eigen::VectorXd& x) { return expected_improvement(fit, x, v_max); };

    Rng rng(seed);
    const int pop_size = 10 * static_cast<int>(D);
    std::vector<Eigen::VectorXd> pop(pop_size);
    std::vector<double> score(pop_size);
    for (int i = 0; i < pop_size; ++i) {
        pop[i].resize(D);
        for (Eigen::Index d = 0; d < D; ++d) pop[i](d) = rng.uniform(lo(d), hi(d));
        score[i] = ei(pop[i]);
    }
    int evals = pop_size;
    const double F = 0.8, CR = 0.9;
    while (evals + pop_size <= budget) {
        int best_i = static_cast<int>(
            std::max_element(score.begin(), score.end()) - score.begin());
        for (int i = 0; i < pop_size; ++i) {
            int r1 = static_cast<int>(rng.uniform_int(pop_size));
            int r2 = static_cast<int>(rng.uniform_int(pop_size));
            Eigen::VectorXd trial = pop[i];
            Eigen::Index forced = static_cast<Eigen::Index>(rng.uniform_int(D));
            for (Eigen::Index d = 0; d < D; ++d) {
                if (d == forced || rng.uniform() < CR) {
                    double v = pop[best_i](d) + F * (pop[r1](d) - pop[r2](d));
                    trial(d) = std::clamp(v, lo(d), hi(d));
                }
            }
            double s = ei(trial);
            ++evals;
            if (s >= score[i]) {
                pop[i] = trial;
                score[i] = s;
            }
        }
    }
    int best_i =
        static_cast<int>(std::max_element(score.begin(), score.end()) - score.begin());
    auto [x, neg] = gpdetail::nelder_mead(
        [&](const Eigen::VectorXd& x) { return -ei(x); }, pop[best_i], lo, hi, 100);
    Eigen::VectorXd best_x = pop[best_i];
    double best_s = score[best_i];
    if (-neg > best_s) {
        best_x = x;
        best_s = -neg;
    }
    return {best_x, best_s};
}

/// N joint posterior sample paths of the value surface on a grid of q points.
/// Deterministic given the seed.
inline Eigen::MatrixXd sample_paths(const GPFit& fit, const Eigen::MatrixXd& grid, int n_paths,
                                    std::uint64_t seed) {
    const Eigen::Index q = grid.rows(), m = fit.design.rows();
    if (q < 1) throw ConfigError("sample_paths: empty grid");
    if (q > 2000)
        throw ConditioningError(
            "sample_paths: grid too fine for dense factorization (max 2000 points)");
    Eigen::MatrixXd Rgx(q, m);
    for (Eigen::Index i = 0; i < q; ++i)
        for (Eigen::Index j = 0; j < m; ++j)
            Rgx(i, j) = correlation(grid.row(i), fit.design.row(j), fit.kind, fit.theta);
    Eigen::MatrixXd Rgg = correlation_matrix(grid, fit.kind, fit.theta);

    Eigen::VectorXd mean = fit.mu0 + (fit.alpha * Rgx * fit.cweights).array();
    // cov = v alpha Rgg - v alpha^2 Rgx C^-1 Rgx'
    Eigen::MatrixXd CiRt = fit.llt.solve(Rgx.transpose());
    Eigen::MatrixXd cov =
        fit.v * fit.alpha * Rgg - fit.v * fit.alpha * fit.alpha * (Rgx * CiRt);
    cov = 0.5 * (cov + cov.transpose());
    Eigen::LLT<Eigen::MatrixXd> llt;
    double scale = std::max(cov.trace() / static_cast<double>(q), 1e-12 * fit.v);
    bool ok = false;
    for (double rel = 1e-10; rel <= 1e-4 * 1.0000001; rel *= 10.0) {
        Eigen::MatrixXd covj = cov;
        covj.diagonal().array() += rel * scale;
        llt.compute(covj);
        if (llt.info() == Eigen::Success) {
            ok = true;
            break;
        }
    }
    if (!ok)
        throw ConditioningError(
            "sample_paths: posterior covariance not factorizable; use a coarser grid");
    Eigen::MatrixXd L = llt.matrixL();

    Rng rng(seed);
    Eigen::MatrixXd paths(n_paths, q);
    Eigen::VectorXd z(q);
    for (int p = 0; p < n_paths; ++p) {
        for (Eigen::Index i = 0; i < q; ++i) z(i) = rng.normal();
        paths.row(p) = (mean + L * z).transpose();
    }
    return paths;
}

/// Log-normal prior elicitation: picks (mu, sigma) so the 5th/95th
/// percentiles of theta map a step of 10% of the range to correlations
/// 0.95/0.05.
inline std::pair<double, double> elicit_lognormal_prior(double range, KernelKind kind) {
    double step = 0.1 * range;
    auto corr_at = [&](double theta) {
        Eigen::VectorXd a(1), b(1), t(1);
        a << 0.0;
        b << step;
        t << theta;
        return correlation(a, b, kind, t);
    };
    auto solve_theta = [&](double target) {
        double lo = 1e-8 * range, hi = 1e4 * range;
        for (int it = 0; it < 200; ++it) {
            double mid = std::sqrt(lo * hi);
            if (corr_at(mid) < target)
                lo = mid;
            else
                hi = mid;
        }
        return std::sqrt(lo * hi);
    };
    double theta_lo = solve_theta(0.05);   // 5th percentile
    double theta_hi = solve_theta(0.95);   // 95th percentile
    double mu = 0.5 * (std::log(theta_lo) + std::log(theta_hi));
    double z95 = 1.6448536269514722;
    double sigma = (std::log(theta_hi) - std::log(theta_lo)) / (2.0 * z95);
    return {mu, sigma};
}

}  // namespace dtropt
