#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dtropt/errors.hpp"
#include "dtropt/rng.hpp"
#include "dtropt/tabular.hpp"

namespace dtropt {

// ---------------------------------------------------------------------------
// Plasmode simulator
// ---------------------------------------------------------------------------

struct SimConfig {
    std::size_t n = 1000;
    std::uint64_t seed = 1;
    bool confounded = false;   // off: P(z_k=1) = 0.5
    double conf_intercept = -3.5;  // on: P(z_k=1) = logistic(a + b * cd4_k)
    double conf_slope = 0.01;
};

/// Deterministic outcome law:
///   y = max(0, 0.2 (5 cd4.0 + 6 sex + (-3000 + 9 cd4.0) z1 + (-3000 + 9 cd4.20) z2))
inline double sim_outcome(double cd40, double sex, int z1, double cd420, int z2) {
    double y = 0.2 * (5.0 * cd40 + 6.0 * sex + (-3000.0 + 9.0 * cd40) * z1 +
                      (-3000.0 + 9.0 * cd420) * z2);
    return std::max(0.0, y);
}

inline double sim_clamp_cd4(double v) { return std::min(std::max(v, 200.0), 500.0); }

/// Synthetic two-stage trial. cd4.0 ~ Uniform(200,500); cd4.20 drifts by +20
/// under first-stage treatment with Normal(0,15) noise, clamped to the
/// enrollment range. The auxiliary covariates (karnof, race, gender, symptom,
/// str2, wtkg) feed the treatment and outcome model formulas but never enter
/// the outcome law.
inline Dataset simulate_dataset(const SimConfig& cfg) {
    if (cfg.n < 2) throw ConfigError("simulate: n must be >= 2");
    Rng rng(cfg.seed);

    std::vector<std::string> names = {"karnof", "race",  "gender", "symptom", "str2",
                                      "wtkg",   "sex",   "cd4.0",  "z1",      "cd4.20",
                                      "z2",     "cd4.outcome"};
    std::vector<std::vector<double>> cols(names.size(), std::vector<double>(cfg.n));
    std::vector<std::string> ids(cfg.n);

    for (std::size_t i = 0; i < cfg.n; ++i) {
        ids[i] = std::to_string(100000 + i);
        double u_karnof = rng.uniform();
        double karnof = u_karnof < 0.05 ? 70.0 : u_karnof < 0.20 ? 80.0
                                              : u_karnof < 0.50 ? 90.0
                                                                : 100.0;
        double race = rng.bernoulli(0.3) ? 1.0 : 0.0;
        double gender = rng.bernoulli(0.8) ? 1.0 : 0.0;
        double symptom = rng.bernoulli(0.17) ? 1.0 : 0.0;
        double str2 = rng.bernoulli(0.6) ? 1.0 : 0.0;
        double wtkg = 75.0 + 13.0 * rng.normal();
        double sex = rng.bernoulli(0.5) ? 1.0 : 0.0;
        double cd40 = rng.uniform(200.0, 500.0);

        double p1 = cfg.confounded
                        ? 1.0 / (1.0 + std::exp(-(cfg.conf_intercept + cfg.conf_slope * cd40)))
                        : 0.5;
        int z1 = rng.bernoulli(p1) ? 1 : 0;
        double cd420 = sim_clamp_cd4(cd40 + 20.0 * z1 + 15.0 * rng.normal());
        double p2 = cfg.confounded
                        ? 1.0 / (1.0 + std::exp(-(cfg.conf_intercept + cfg.conf_slope * cd420)))
                        : 0.5;
        int z2 = rng.bernoulli(p2) ? 1 : 0;

        cols[0][i] = karnof;
        cols[1][i] = race;
        cols[2][i] = gender;
        cols[3][i] = symptom;
        cols[4][i] = str2;
        cols[5][i] = wtkg;
        cols[6][i] = sex;
        cols[7][i] = cd40;
        cols[8][i] = z1;
        cols[9][i] = cd420;
        cols[10][i] = z2;
        cols[11][i] = sim_outcome(cd40, sex, z1, cd420, z2);
    }
    return Dataset("pidnum", names, std::move(ids), std::move(cols), {"z1", "z2"},
                   "cd4.outcome");
}

// ---------------------------------------------------------------------------
// Monte Carlo oracle for the true value surface
// ---------------------------------------------------------------------------

struct OracleSurface {
    std::vector<double> psi1;    // grid coordinates, ascending
    std::vector<double> psi2;
    std::vector<std::vector<double>> value;  // value[i][j] at (psi1[i], psi2[j])
    double opt_psi1 = 0.0;
    double opt_psi2 = 0.0;
    double opt_value = 0.0;
};

/// True value surface of the threshold regime (z1 = 1{cd4.0 >= psi1},
/// z2 = 1{cd4.20 >= psi2}): enforced treatments are plugged into the outcome
/// law over a large randomized synthetic population, with the CD4 history
/// kept as observed. This keeps both optimal thresholds at 3000/9 = 333.3
/// regardless of the covariate law. Confounding does not enter. Runs in
/// O(n_mc + |grid|^2) via a 2-D histogram of (cd4.0, cd4.20) with prefix
/// sums over the four treatment combinations.
inline OracleSurface oracle_surface(double step, std::uint64_t seed = 424242,
                                    std::size_t n_mc = 1000000) {
    if (step <= 0.0) throw ConfigError("oracle: grid step must be > 0");
    std::vector<double> grid;
    for (double v = 200.0; v <= 500.0 + 1e-9; v += step) grid.push_back(std::min(v, 500.0));
    const std::size_t G = grid.size();

    auto bucket_of = [&](double cd4) {
        // number of grid thresholds <= cd4
        return static_cast<std::size_t>(
            std::upper_bound(grid.begin(), grid.end(), cd4) - grid.begin());
    };

    // sums[z1][z2] over (cd4.0 bucket, cd4.20 bucket) cells
    std::vector<std::vector<double>> sums[2][2];
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
            sums[a][b].assign(G + 1, std::vector<double>(G + 1, 0.0));

    Rng rng(seed);
    for (std::size_t i = 0; i < n_mc; ++i) {
        double cd40 = rng.uniform(200.0, 500.0);
        double sex = rng.bernoulli(0.5) ? 1.0 : 0.0;
        int z1_obs = rng.bernoulli(0.5) ? 1 : 0;
        double cd420 = sim_clamp_cd4(cd40 + 20.0 * z1_obs + 15.0 * rng.normal());
        std::size_t b1 = bucket_of(cd40), b2 = bucket_of(cd420);
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
                sums[a][b][b1][b2] += sim_outcome(cd40, sex, a, cd420, b);
    }
    // prefix[r][c] = sum over buckets (<=r, <=c); bucket k <= j means the
    // value is below threshold grid[j], i.e. untreated at psi = grid[j]
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) {
            auto& t = sums[a][b];
            for (std::size_t r = 0; r <= G; ++r)
                for (std::size_t c = 1; c <= G; ++c) t[r][c] += t[r][c - 1];
            for (std::size_t r = 1; r <= G; ++r)
                for (std::size_t c = 0; c <= G; ++c) t[r][c] += t[r - 1][c];
        }

    OracleSurface s;
    s.psi1 = grid;
    s.psi2 = grid;
    s.value.assign(G, std::vector<double>(G, 0.0));
    s.opt_value = -1.0;
    auto rect = [&](int a, int b, std::size_t r_lo, std::size_t r_hi, std::size_t c_lo,
                    std::size_t c_hi) {
        // sum over buckets in (r_lo, r_hi] x (c_lo, c_hi]
        const auto& t = sums[a][b];
        return t[r_hi][c_hi] - t[r_lo][c_hi] - t[r_hi][c_lo] + t[r_lo][c_lo];
    };
    for (std::size_t i = 0; i < G; ++i)
        for (std::size_t j = 0; j < G; ++j) {
            // treated at stage 1 iff cd4.0 bucket > i; stage 2 iff cd4.20 bucket > j
            double v = rect(0, 0, 0, i, 0, j) + rect(0, 1, 0, i, j, G) +
                       rect(1, 0, i, G, 0, j) + rect(1, 1, i, G, j, G);
            s.value[i][j] = v / static_cast<double>(n_mc);
            if (s.value[i][j] > s.opt_value) {
                s.opt_value = s.value[i][j];
                s.opt_psi1 = grid[i];
                s.opt_psi2 = grid[j];
            }
        }
    return s;
}

/// Interventional value of one regime: treatments enforced in the generative
/// model itself, so the first-stage decision propagates into cd4.20. This is
/// the estimand the IPW and DR estimators target on simulated data, and the
/// reference for their bias.
inline double interventional_value(double psi1, double psi2, std::uint64_t seed = 424242,
                                   std::size_t n_mc = 1000000) {
    Rng rng(seed);
    double total = 0.0;
    for (std::size_t i = 0; i < n_mc; ++i) {
        double cd40 = rng.uniform(200.0, 500.0);
        double sex = rng.bernoulli(0.5) ? 1.0 : 0.0;
        int z1 = cd40 >= psi1 ? 1 : 0;
        double cd420 = sim_clamp_cd4(cd40 + 20.0 * z1 + 15.0 * rng.normal());
        int z2 = cd420 >= psi2 ? 1 : 0;
        total += sim_outcome(cd40, sex, z1, cd420, z2);
    }
    return total / static_cast<double>(n_mc);
}

}  // namespace dtropt
