#include <doctest.h>

#include <cmath>
#include <vector>

#include "dtropt/simulate.hpp"

using namespace dtropt;

TEST_CASE("outcome law hand values") {
    // 0.2 (5*400 + 6*1 + (-3000 + 9*400)*1 + 0) = 0.2 * 2606 = 521.2
    CHECK(sim_outcome(400.0, 1.0, 1, 400.0, 0) == doctest::Approx(521.2));
    // untreated, cd4.0 = 0, sex = 0
    CHECK(sim_outcome(0.0, 0.0, 0, 0.0, 0) == doctest::Approx(0.0));
    // 0.2 (1500 + (-3000+2700) + (-3000+2700)) = 0.2 * 900 = 180
    CHECK(sim_outcome(300.0, 0.0, 1, 300.0, 1) == doctest::Approx(180.0));
    // negative branch clips at zero: cd4 = 200 treated twice
    CHECK(sim_outcome(200.0, 0.0, 1, 200.0, 1) == doctest::Approx(0.0));
    // treatment is beneficial above 3000/9 and harmful below
    CHECK(sim_outcome(340.0, 0.0, 1, 340.0, 0) > sim_outcome(340.0, 0.0, 0, 340.0, 0));
    CHECK(sim_outcome(320.0, 0.0, 1, 320.0, 0) < sim_outcome(320.0, 0.0, 0, 320.0, 0));
}

TEST_CASE("cd4 clamp") {
    CHECK(sim_clamp_cd4(100.0) == 200.0);
    CHECK(sim_clamp_cd4(350.0) == 350.0);
    CHECK(sim_clamp_cd4(700.0) == 500.0);
}

TEST_CASE("simulated dataset layout and ranges") {
    Dataset d = simulate_dataset({.n = 500, .seed = 2});
    CHECK(d.n() == 500);
    CHECK(d.stages() == 2);
    CHECK(d.treat_cols() == std::vector<std::string>{"z1", "z2"});
    CHECK(d.outcome_col() == "cd4.outcome");
    CHECK(d.ids()[0] == "100000");
    CHECK(d.ids()[499] == "100499");

    int z1_count = 0;
    for (std::size_t i = 0; i < d.n(); ++i) {
        CHECK(d.value("cd4.0", i) >= 200.0);
        CHECK(d.value("cd4.0", i) < 500.0);
        CHECK(d.value("cd4.20", i) >= 200.0);
        CHECK(d.value("cd4.20", i) <= 500.0);
        CHECK(d.outcome(i) >= 0.0);
        double k = d.value("karnof", i);
        CHECK((k == 70.0 || k == 80.0 || k == 90.0 || k == 100.0));
        z1_count += d.treatment(i, 0);
        // the outcome column obeys the deterministic law
        CHECK(d.outcome(i) ==
              doctest::Approx(sim_outcome(d.value("cd4.0", i), d.value("sex", i),
                                          d.treatment(i, 0), d.value("cd4.20", i),
                                          d.treatment(i, 1)))
                  .epsilon(1e-12));
    }
    // randomized arm close to half
    CHECK(z1_count > 200);
    CHECK(z1_count < 300);
}

TEST_CASE("simulation is deterministic in the seed") {
    Dataset a = simulate_dataset({.n = 50, .seed = 9});
    Dataset b = simulate_dataset({.n = 50, .seed = 9});
    Dataset c = simulate_dataset({.n = 50, .seed = 10});
    for (std::size_t i = 0; i < 50; ++i)
        CHECK(a.value("cd4.0", i) == b.value("cd4.0", i));
    bool any_diff = false;
    for (std::size_t i = 0; i < 50; ++i)
        if (a.value("cd4.0", i) != c.value("cd4.0", i)) any_diff = true;
    CHECK(any_diff);
    CHECK_THROWS_AS(simulate_dataset({.n = 1}), ConfigError);
}

TEST_CASE("confounding ties treatment probability to cd4") {
    Dataset d = simulate_dataset({.n = 4000, .seed = 6, .confounded = true});
    double low_treated = 0, low_n = 0, high_treated = 0, high_n = 0;
    for (std::size_t i = 0; i < d.n(); ++i) {
        if (d.value("cd4.0", i) < 300.0) {
            low_n += 1;
            low_treated += d.treatment(i, 0);
        } else if (d.value("cd4.0", i) > 400.0) {
            high_n += 1;
            high_treated += d.treatment(i, 0);
        }
    }
    // logistic(-3.5 + 0.01 cd4): about 0.38 at cd4=250 vs 0.73 at cd4=450
    CHECK(low_treated / low_n < 0.5);
    CHECK(high_treated / high_n > 0.6);
}

TEST_CASE("oracle surface peaks one grid step from 3000/9 in both coordinates") {
    OracleSurface s = oracle_surface(5.0, 424242, 200000);
    CHECK(std::abs(s.opt_psi1 - 3000.0 / 9.0) <= 5.0 + 1e-9);
    CHECK(std::abs(s.opt_psi2 - 3000.0 / 9.0) <= 5.0 + 1e-9);
    CHECK(s.psi1.front() == 200.0);
    CHECK(s.psi1.back() == 500.0);
    CHECK(s.value.size() == s.psi1.size());

    // the optimum dominates the corners clearly
    CHECK(s.opt_value > s.value.front().front());
    CHECK(s.opt_value > s.value.back().back());
    CHECK_THROWS_AS(oracle_surface(0.0), ConfigError);
}

TEST_CASE("oracle histogram matches a direct monte carlo evaluation") {
    // same seed and draw count: the surface entry must equal the brute-force
    // plug-in average over the identical synthetic population
    const std::size_t n_mc = 20000;
    OracleSurface s = oracle_surface(50.0, 7, n_mc);

    Rng rng(7);
    std::vector<std::vector<double>> direct(s.psi1.size(),
                                            std::vector<double>(s.psi2.size(), 0.0));
    for (std::size_t i = 0; i < n_mc; ++i) {
        double cd40 = rng.uniform(200.0, 500.0);
        double sex = rng.bernoulli(0.5) ? 1.0 : 0.0;
        int z1_obs = rng.bernoulli(0.5) ? 1 : 0;
        double cd420 = sim_clamp_cd4(cd40 + 20.0 * z1_obs + 15.0 * rng.normal());
        for (std::size_t a = 0; a < s.psi1.size(); ++a)
            for (std::size_t b = 0; b < s.psi2.size(); ++b) {
                int g1 = cd40 >= s.psi1[a] ? 1 : 0;
                int g2 = cd420 >= s.psi2[b] ? 1 : 0;
                direct[a][b] += sim_outcome(cd40, sex, g1, cd420, g2);
            }
    }
    for (std::size_t a = 0; a < s.psi1.size(); ++a)
        for (std::size_t b = 0; b < s.psi2.size(); ++b)
            CHECK(s.value[a][b] ==
                  doctest::Approx(direct[a][b] / n_mc).epsilon(1e-10));
}

TEST_CASE("interventional value is maximized near 3000/9 and beats bad regimes") {
    double at_opt = interventional_value(333.0, 333.0, 11, 200000);
    CHECK(at_opt > interventional_value(200.0, 200.0, 11, 200000));  // treat everyone
    CHECK(at_opt > interventional_value(500.0, 500.0, 11, 200000));  // treat no one
    CHECK(at_opt > interventional_value(260.0, 260.0, 11, 200000));
    CHECK(at_opt > interventional_value(420.0, 420.0, 11, 200000));
}
