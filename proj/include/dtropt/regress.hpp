#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dtropt/errors.hpp"

namespace dtropt {

struct FitResult {
    Eigen::VectorXd coefficients;
    Eigen::VectorXd fitted;  // probabilities for logistic, means for linear
    bool converged = true;
    int iterations = 0;
};

namespace detail {

inline void check_rank(const Eigen::ColPivHouseholderQR<Eigen::MatrixXd>& qr,
                       Eigen::Index p) {
    if (qr.rank() < p) {
        // First column (in permuted order) beyond the numerical rank is the
        // one that is linearly dependent on the others.
        Eigen::Index dep = qr.colsPermutation().indices()(qr.rank());
        throw FitError("rank-deficient weighted design: column " + std::to_string(dep) +
                       (dep == 0 ? " (intercept)" : "") + " is linearly dependent");
    }
}

}  // namespace detail

/// Weighted least squares: minimizes sum_i w_i (y_i - x_i' beta)^2 via QR of
/// diag(sqrt(w)) X.
inline FitResult wls(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                     const Eigen::VectorXd& w) {
    const Eigen::Index n = X.rows(), p = X.cols();
    if (n < p) throw FitError("wls: fewer rows than columns");
    if (y.size() != n || w.size() != n) throw FitError("wls: dimension mismatch");
    double wsum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (w(i) < 0.0) throw FitError("wls: negative weight");
        wsum += w(i);
    }
    if (wsum <= 0.0) throw FitError("wls: all weights are zero");

    Eigen::VectorXd sw = w.array().sqrt();
    Eigen::MatrixXd Xw = sw.asDiagonal() * X;
    Eigen::VectorXd yw = sw.array() * y.array();
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Xw);
    qr.setThreshold(1e-10);
    detail::check_rank(qr, p);

    FitResult fit;
    fit.coefficients = qr.solve(yw);
    fit.fitted = X * fit.coefficients;
    fit.converged = true;
    fit.iterations = 1;
    return fit;
}

/// Weighted logistic regression by IRLS. Maximizes
/// sum_i w_i [z_i log mu_i + (1-z_i) log(1-mu_i)], mu = logistic(X gamma).
/// Converges when max |delta gamma| <= 1e-8; capped at 50 iterations.
/// Coefficients exceeding 30 in magnitude during iteration are treated as
/// quasi-complete separation.
inline FitResult logistic_irls(const Eigen::MatrixXd& X, const Eigen::VectorXd& z,
                               const Eigen::VectorXd& w) {
    const Eigen::Index n = X.rows(), p = X.cols();
    if (n < p) throw FitError("logistic_irls: fewer rows than columns");
    if (z.size() != n || w.size() != n) throw FitError("logistic_irls: dimension mismatch");

    bool has0 = false, has1 = false;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (z(i) != 0.0 && z(i) != 1.0)
            throw FitError("logistic_irls: response must be {0,1}");
        if (w(i) > 0.0) (z(i) == 1.0 ? has1 : has0) = true;
    }
    if (!has0 || !has1)
        throw FitError("logistic_irls: only one response class present among positive weights");

    constexpr double kTol = 1e-8;
    constexpr int kMaxIter = 50;
    constexpr double kSeparationBound = 30.0;

    Eigen::VectorXd gamma = Eigen::VectorXd::Zero(p);
    Eigen::VectorXd mu(n), irls_w(n), zadj(n);
    FitResult fit;
    for (int iter = 1; iter <= kMaxIter; ++iter) {
        Eigen::VectorXd eta = X * gamma;
        for (Eigen::Index i = 0; i < n; ++i) {
            double m = 1.0 / (1.0 + std::exp(-eta(i)));
            m = std::min(std::max(m, 1e-12), 1.0 - 1e-12);
            mu(i) = m;
            double v = m * (1.0 - m);
            irls_w(i) = w(i) * v;
            zadj(i) = eta(i) + (z(i) - m) / v;
        }
        Eigen::VectorXd sw = irls_w.array().sqrt();
        Eigen::MatrixXd Xw = sw.asDiagonal() * X;
        Eigen::VectorXd yw = sw.array() * zadj.array();
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Xw);
        qr.setThreshold(1e-10);
        detail::check_rank(qr, p);
        Eigen::VectorXd gamma_new = qr.solve(yw);

        if (gamma_new.array().abs().maxCoeff() > kSeparationBound)
            throw FitError("logistic_irls: quasi-complete separation (coefficient exceeded " +
                           std::to_string(kSeparationBound) + " on the logit scale)");

        double delta = (gamma_new - gamma).array().abs().maxCoeff();
        gamma = gamma_new;
        fit.iterations = iter;
        if (delta <= kTol) {
            fit.converged = true;
            Eigen::VectorXd eta_fin = X * gamma;
            fit.fitted = (1.0 / (1.0 + (-eta_fin.array()).exp())).matrix();
            fit.coefficients = gamma;
            return fit;
        }
    }
    throw FitError("logistic_irls: did not converge in " + std::to_string(kMaxIter) +
                   " iterations");
}

}  // namespace dtropt
