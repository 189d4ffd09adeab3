#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "dtropt/regress.hpp"
#include "dtropt/rng.hpp"

using namespace dtropt;

namespace {

Eigen::MatrixXd random_design(Rng& rng, int n, int p) {
    Eigen::MatrixXd X(n, p);
    X.col(0).setOnes();
    for (int j = 1; j < p; ++j)
        for (int i = 0; i < n; ++i) X(i, j) = rng.uniform(-2.0, 2.0);
    return X;
}

double logistic_loglik(const Eigen::MatrixXd& X, const Eigen::VectorXd& z,
                       const Eigen::VectorXd& w, const Eigen::VectorXd& gamma) {
    Eigen::VectorXd eta = X * gamma;
    double ll = 0.0;
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        double mu = 1.0 / (1.0 + std::exp(-eta(i)));
        mu = std::min(std::max(mu, 1e-14), 1.0 - 1e-14);
        ll += w(i) * (z(i) * std::log(mu) + (1.0 - z(i)) * std::log(1.0 - mu));
    }
    return ll;
}

/// Independent likelihood maximizer: coarse grid then a tiny Nelder-Mead.
Eigen::VectorXd logistic_oracle(const Eigen::MatrixXd& X, const Eigen::VectorXd& z,
                                const Eigen::VectorXd& w) {
    const int p = static_cast<int>(X.cols());
    auto neg = [&](const Eigen::VectorXd& g) { return -logistic_loglik(X, z, w, g); };

    Eigen::VectorXd best = Eigen::VectorXd::Zero(p);
    double best_val = neg(best);
    std::function<void(Eigen::VectorXd&, int)> scan = [&](Eigen::VectorXd& g, int d) {
        if (d == p) {
            double v = neg(g);
            if (v < best_val) {
                best_val = v;
                best = g;
            }
            return;
        }
        for (double c = -3.0; c <= 3.0001; c += 0.5) {
            g(d) = c;
            scan(g, d + 1);
        }
    };
    Eigen::VectorXd g0 = Eigen::VectorXd::Zero(p);
    scan(g0, 0);

    // Nelder-Mead polish from the best grid point
    std::vector<Eigen::VectorXd> pts;
    std::vector<double> vals;
    pts.push_back(best);
    vals.push_back(best_val);
    for (int d = 0; d < p; ++d) {
        Eigen::VectorXd q = best;
        q(d) += 0.25;
        pts.push_back(q);
        vals.push_back(neg(q));
    }
    auto order = [&]() {
        for (std::size_t i = 1; i < pts.size(); ++i)
            for (std::size_t j = i; j > 0 && vals[j] < vals[j - 1]; --j) {
                std::swap(vals[j], vals[j - 1]);
                std::swap(pts[j], pts[j - 1]);
            }
    };
    order();
    for (int it = 0; it < 4000; ++it) {
        Eigen::VectorXd centroid = Eigen::VectorXd::Zero(p);
        for (std::size_t i = 0; i + 1 < pts.size(); ++i) centroid += pts[i];
        centroid /= static_cast<double>(p);
        Eigen::VectorXd refl = centroid + (centroid - pts.back());
        double fr = neg(refl);
        if (fr < vals.front()) {
            Eigen::VectorXd ex = centroid + 2.0 * (centroid - pts.back());
            double fe = neg(ex);
            if (fe < fr) {
                pts.back() = ex;
                vals.back() = fe;
            } else {
                pts.back() = refl;
                vals.back() = fr;
            }
        } else if (fr < vals[vals.size() - 2]) {
            pts.back() = refl;
            vals.back() = fr;
        } else {
            Eigen::VectorXd co = centroid + 0.5 * (pts.back() - centroid);
            double fc = neg(co);
            if (fc < vals.back()) {
                pts.back() = co;
                vals.back() = fc;
            } else {
                for (std::size_t i = 1; i < pts.size(); ++i) {
                    pts[i] = pts[0] + 0.5 * (pts[i] - pts[0]);
                    vals[i] = neg(pts[i]);
                }
            }
        }
        order();
        if (std::abs(vals.back() - vals.front()) < 1e-14) break;
    }
    return pts.front();
}

}  // namespace

TEST_CASE("wls weighted-mean hand examples") {
    Eigen::MatrixXd X(2, 1);
    X << 1, 1;
    Eigen::VectorXd y(2), w(2);
    y << 2, 4;
    w << 1, 1;
    CHECK(wls(X, y, w).coefficients(0) == doctest::Approx(3.0));
    w << 3, 1;
    CHECK(wls(X, y, w).coefficients(0) == doctest::Approx(2.5));
}

TEST_CASE("wls matches the normal-equations oracle on random problems") {
    Rng rng(42);
    for (int trial = 0; trial < 20; ++trial) {
        Eigen::MatrixXd X = random_design(rng, 20, 3);
        Eigen::VectorXd y(20), w(20);
        for (int i = 0; i < 20; ++i) {
            y(i) = rng.uniform(-5.0, 5.0);
            w(i) = rng.uniform(0.1, 2.0);
        }
        Eigen::MatrixXd W = w.asDiagonal();
        Eigen::VectorXd oracle = (X.transpose() * W * X).ldlt().solve(X.transpose() * W * y);
        Eigen::VectorXd beta = wls(X, y, w).coefficients;
        CHECK((beta - oracle).lpNorm<Eigen::Infinity>() < 1e-8);

        // residuals are w-orthogonal to every column
        Eigen::VectorXd r = y - X * beta;
        for (int j = 0; j < 3; ++j)
            CHECK(std::abs((w.array() * r.array() * X.col(j).array()).sum()) < 1e-8 * 20);
    }
}

TEST_CASE("wls errors") {
    Eigen::MatrixXd X(3, 2);
    X << 1, 2, 1, 4, 1, 6;  // column 1 = 2 * values, collinear with nothing yet
    Eigen::VectorXd y(3), w(3);
    y << 1, 2, 3;
    SUBCASE("rank deficiency names the dependent column") {
        Eigen::MatrixXd Xd(3, 3);
        Xd << 1, 2, 4, 1, 4, 8, 1, 6, 12;  // col2 = 2*col1
        w << 1, 1, 1;
        try {
            wls(Xd, y, w);
            FAIL("expected FitError");
        } catch (const FitError& e) {
            CHECK(std::string(e.what()).find("column") != std::string::npos);
        }
    }
    SUBCASE("all-zero weights") {
        w << 0, 0, 0;
        CHECK_THROWS_AS(wls(X, y, w), FitError);
    }
    SUBCASE("negative weight") {
        w << 1, -1, 1;
        CHECK_THROWS_AS(wls(X, y, w), FitError);
    }
    SUBCASE("fewer rows than columns") {
        Eigen::MatrixXd Xs(1, 2);
        Xs << 1, 2;
        Eigen::VectorXd ys(1), ws(1);
        ys << 1;
        ws << 1;
        CHECK_THROWS_AS(wls(Xs, ys, ws), FitError);
    }
}

TEST_CASE("logistic intercept-only recovers the sample proportion") {
    Eigen::MatrixXd X = Eigen::MatrixXd::Ones(10, 1);
    Eigen::VectorXd z(10), w = Eigen::VectorXd::Ones(10);
    z << 1, 1, 1, 1, 1, 1, 0, 0, 0, 0;
    FitResult fit = logistic_irls(X, z, w);
    CHECK(fit.coefficients(0) == doctest::Approx(std::log(0.6 / 0.4)).epsilon(1e-6));
    CHECK(fit.fitted(0) == doctest::Approx(0.6).epsilon(1e-6));
}

TEST_CASE("logistic detects perfect separation") {
    Eigen::MatrixXd X(8, 2);
    Eigen::VectorXd z(8), w = Eigen::VectorXd::Ones(8);
    for (int i = 0; i < 8; ++i) {
        double x = i - 3.5;
        X(i, 0) = 1.0;
        X(i, 1) = x;
        z(i) = x > 0 ? 1.0 : 0.0;
    }
    CHECK_THROWS_AS(logistic_irls(X, z, w), FitError);
}

TEST_CASE("logistic rejects single-class responses") {
    Eigen::MatrixXd X = Eigen::MatrixXd::Ones(5, 1);
    Eigen::VectorXd z = Eigen::VectorXd::Ones(5), w = Eigen::VectorXd::Ones(5);
    CHECK_THROWS_AS(logistic_irls(X, z, w), FitError);
    // both classes exist but only one among positive weights
    z(0) = 0.0;
    w(0) = 0.0;
    CHECK_THROWS_AS(logistic_irls(X, z, w), FitError);
}

TEST_CASE("logistic matches an independent likelihood-maximization oracle") {
    Rng rng(7);
    for (int trial = 0; trial < 5; ++trial) {
        Eigen::MatrixXd X = random_design(rng, 12, 3);
        Eigen::VectorXd z(12), w(12);
        for (int i = 0; i < 12; ++i) {
            double p = 1.0 / (1.0 + std::exp(-(0.3 + 0.8 * X(i, 1) - 0.5 * X(i, 2))));
            z(i) = rng.bernoulli(p) ? 1.0 : 0.0;
            w(i) = rng.uniform(0.5, 1.5);
        }
        if (z.sum() < 2 || z.sum() > 10) continue;
        FitResult fit;
        try {
            fit = logistic_irls(X, z, w);
        } catch (const FitError&) {
            continue;  // separation in a tiny sample, not the target here
        }
        Eigen::VectorXd oracle = logistic_oracle(X, z, w);
        CHECK((fit.coefficients - oracle).lpNorm<Eigen::Infinity>() < 1e-5);

        // score equations hold at the reported optimum
        for (int j = 0; j < 3; ++j) {
            double score = 0.0;
            for (int i = 0; i < 12; ++i) score += w(i) * (z(i) - fit.fitted(i)) * X(i, j);
            CHECK(std::abs(score) < 1e-6 * w.sum());
        }
    }
}

TEST_CASE("scaling the weights leaves both fits unchanged") {
    Rng rng(15);
    Eigen::MatrixXd X = random_design(rng, 30, 2);
    Eigen::VectorXd y(30), z(30), w(30);
    for (int i = 0; i < 30; ++i) {
        y(i) = 1.0 + 2.0 * X(i, 1) + rng.normal();
        z(i) = rng.bernoulli(0.5) ? 1.0 : 0.0;
        w(i) = rng.uniform(0.2, 1.0);
    }
    Eigen::VectorXd b1 = wls(X, y, w).coefficients;
    Eigen::VectorXd b2 = wls(X, y, 7.5 * w).coefficients;
    CHECK((b1 - b2).lpNorm<Eigen::Infinity>() < 1e-10);
    Eigen::VectorXd g1 = logistic_irls(X, z, w).coefficients;
    Eigen::VectorXd g2 = logistic_irls(X, z, 7.5 * w).coefficients;
    CHECK((g1 - g2).lpNorm<Eigen::Infinity>() < 1e-7);
}
