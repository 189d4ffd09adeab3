#include <doctest.h>

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dtropt/emucontrol.hpp"
#include "dtropt/simulate.hpp"

using namespace dtropt;

namespace {

RegimeFamily cd4_family() {
    RegimeFamily fam;
    fam.rules = {parse_rule("cd4.0>=psi1"), parse_rule("cd4.20>=psi2")};
    fam.psi_names = {"psi1", "psi2"};
    fam.domain = {{200.0, 500.0}, {200.0, 500.0}};
    return fam;
}

EstimatorConfig ipw_config() {
    EstimatorConfig cfg;
    cfg.kind = EmuEstimator::IpwNormalized;
    cfg.treat_models = {parse_formula("z1~cd4.0"), parse_formula("z2~cd4.20+z1")};
    return cfg;
}

GpOptions gp_options_2d() {
    GpOptions opt;
    opt.kind = KernelKind::Matern52;
    opt.theta_lower = Eigen::VectorXd::Constant(2, 0.01);
    opt.theta_upper = Eigen::VectorXd::Constant(2, 600.0);
    opt.n_starts = 2;
    opt.seed = 3;
    return opt;
}

Eigen::MatrixXd square_design(int per_side) {
    Eigen::MatrixXd d(per_side * per_side, 2);
    int r = 0;
    for (int i = 0; i < per_side; ++i)
        for (int j = 0; j < per_side; ++j) {
            d(r, 0) = 200.0 + 300.0 * i / (per_side - 1);
            d(r, 1) = 200.0 + 300.0 * j / (per_side - 1);
            ++r;
        }
    return d;
}

}  // namespace

TEST_CASE("value evaluator agrees with the direct estimators") {
    Dataset d = simulate_dataset({.n = 200, .seed = 19});
    RegimeFamily fam = cd4_family();
    Eigen::VectorXd pi = Eigen::VectorXd::Constant(d.n(), 1.0 / d.n());
    std::vector<double> psi{320.0, 340.0};

    EstimatorConfig cfg = ipw_config();
    PropensityFit pf = fit_propensities(d, cfg.treat_models, pi);
    {
        ValueEvaluator eval(d, fam, cfg, pi);
        WeightVector wv = ipw_weights(d, fam, psi, pf, true, pi);
        CHECK(eval.at(psi) == doctest::Approx(value_ipw(d, wv, pi).value).epsilon(1e-12));
    }
    cfg.kind = EmuEstimator::Dr;
    cfg.outcome_models = {
        parse_formula("Pseudo_Outcome~cd4.0+z1+cd4.0:z1"),
        parse_formula("cd4.outcome~cd4.0+cd4.20+z1+cd4.0:z1+z2+cd4.20:z2")};
    {
        ValueEvaluator eval(d, fam, cfg, pi);
        WeightVector wv = ipw_weights(d, fam, psi, pf, false, pi);
        DrRecursion dr = fit_dr_recursion(d, fam, psi, cfg.outcome_models, pi);
        CHECK(eval.at(psi) == doctest::Approx(value_dr(d, wv, dr, pi).value).epsilon(1e-12));
    }
}

TEST_CASE("design_fit preconditions") {
    Dataset d = simulate_dataset({.n = 150, .seed = 23});
    RegimeFamily fam = cd4_family();
    GpOptions opt = gp_options_2d();

    Eigen::MatrixXd tiny(2, 2);
    tiny << 250, 250, 400, 400;
    CHECK_THROWS_AS(design_fit(d, fam, ipw_config(), tiny, opt), ConfigError);

    Eigen::MatrixXd wrong_dim(5, 1);
    wrong_dim << 250, 300, 350, 400, 450;
    CHECK_THROWS_AS(design_fit(d, fam, ipw_config(), wrong_dim, opt), ConfigError);

    Eigen::MatrixXd outside = square_design(2);
    outside.conservativeResize(5, 2);
    outside.row(4) << 150.0, 300.0;  // below the domain
    try {
        design_fit(d, fam, ipw_config(), outside, opt);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("5") != std::string::npos);
    }
}

TEST_CASE("design_fit evaluates the grid and tracks the incumbent") {
    Dataset d = simulate_dataset({.n = 250, .seed = 71});
    RegimeFamily fam = cd4_family();
    Eigen::MatrixXd design = square_design(4);
    EmulationState st = design_fit(d, fam, ipw_config(), design, gp_options_2d());
    CHECK(st.m() == 16);
    CHECK(st.design_size == 16);
    CHECK(st.seq_steps == 0);
    CHECK(st.ei_history.empty());
    CHECK(st.smooth.noise_free);

    // x_max is a design row holding the largest smoothed response
    Eigen::Index best = 0;
    st.smooth.responses.maxCoeff(&best);
    CHECK((st.x_max.transpose() - design.row(best)).norm() == 0.0);
    CHECK(st.y_max == st.smooth.responses(best));

    // values match a direct evaluator call
    Eigen::VectorXd pi = Eigen::VectorXd::Constant(d.n(), 1.0 / d.n());
    ValueEvaluator eval(d, fam, ipw_config(), pi);
    CHECK(st.values(5) == doctest::Approx(eval.at({design(5, 0), design(5, 1)})).epsilon(1e-12));

    // constant responses keep the first design point as incumbent
    Eigen::VectorXd flat = Eigen::VectorXd::Constant(16, 3.0);
    EmulationState st2 = st;
    st2.values = flat;
    emudetail::refit(st2);
    CHECK((st2.x_max.transpose() - design.row(0)).norm() == 0.0);
}

TEST_CASE("sequential phase composes across calls with the same seed") {
    Dataset d = simulate_dataset({.n = 250, .seed = 77});
    RegimeFamily fam = cd4_family();
    EmulationState base = design_fit(d, fam, ipw_config(), square_design(3), gp_options_2d());

    EmulationState whole = sequence_fit(d, fam, base, 4, 150, 42);
    EmulationState part = sequence_fit(d, fam, base, 2, 150, 42);
    part = sequence_fit(d, fam, part, 2, 150, 42);

    CHECK(whole.m() == 13);
    CHECK(part.m() == 13);
    CHECK((whole.points - part.points).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK((whole.values - part.values).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK(whole.seq_steps == 4);
    REQUIRE(whole.ei_history.size() == 4);
    for (double e : whole.ei_history) CHECK(e >= 0.0);

    // sequential points stay inside the box
    for (std::size_t i = 9; i < whole.m(); ++i) {
        CHECK(whole.points(i, 0) >= 200.0);
        CHECK(whole.points(i, 0) <= 500.0);
        CHECK(whole.points(i, 1) >= 200.0);
        CHECK(whole.points(i, 1) <= 500.0);
    }

    // a different seed on continuation is rejected
    CHECK_THROWS_AS(sequence_fit(d, fam, part, 1, 150, 43), ConfigError);
    CHECK_THROWS_AS(sequence_fit(d, fam, base, 0, 150, 42), ConfigError);
}

TEST_CASE("convergence report layout and csv") {
    Dataset d = simulate_dataset({.n = 250, .seed = 77});
    RegimeFamily fam = cd4_family();
    EmulationState st = design_fit(d, fam, ipw_config(), square_design(3), gp_options_2d());

    auto rows0 = convergence_report(st);
    REQUIRE(rows0.size() == 9);
    for (const auto& r : rows0) CHECK(!r.ei.has_value());

    st = sequence_fit(d, fam, st, 2, 150, 8);
    auto rows = convergence_report(st);
    REQUIRE(rows.size() == 11);
    CHECK(rows[0].step == 1);
    CHECK(rows[10].step == 11);
    CHECK(!rows[8].ei.has_value());
    CHECK(rows[9].ei.has_value());
    CHECK(*rows[9].ei == st.ei_history[0]);
    CHECK(rows[3].value == st.values(3));

    write_convergence_csv(st, fam.psi_names, "/tmp/dtropt_test_conv.csv");
    std::ifstream is("/tmp/dtropt_test_conv.csv");
    std::string line;
    std::getline(is, line);
    CHECK(line == "step,psi1,psi2,value,ei");
    int count = 0;
    std::string design_row;
    while (std::getline(is, line)) {
        ++count;
        if (count == 1) design_row = line;
    }
    CHECK(count == 11);
    CHECK(design_row.substr(design_row.size() - 1) == ",");  // empty EI cell
}

TEST_CASE("post_mean tracks the noisy fit") {
    Dataset d = simulate_dataset({.n = 250, .seed = 91});
    RegimeFamily fam = cd4_family();
    EmulationState st = design_fit(d, fam, ipw_config(), square_design(3), gp_options_2d());
    Eigen::VectorXd x(2);
    x << 330.0, 330.0;
    CHECK(post_mean(st, x) == doctest::Approx(posterior_predict(st.fit, x).mean));
    // at a design point the posterior mean shrinks toward mu0, staying between
    // the raw value and the prior mean ordering is not guaranteed; just check
    // it is finite and within the observed value range inflated a little
    double lo = st.values.minCoeff(), hi = st.values.maxCoeff(), pad = 0.5 * (hi - lo) + 1.0;
    Eigen::VectorXd x0 = st.points.row(0);
    double pm = post_mean(st, x0);
    CHECK(pm > lo - pad);
    CHECK(pm < hi + pad);
}

TEST_CASE("fit_infer: shape, bitwise subset reproduction, argmax on the grid") {
    Dataset d = simulate_dataset({.n = 200, .seed = 101});
    RegimeFamily fam = cd4_family();
    FitInferRun run;
    run.design = square_design(3);
    run.additional = 2;
    run.boot_start = 1;
    run.boot_end = 3;
    run.n_paths = 5;
    run.path_grid = square_design(5);
    run.base_seed = 2024;
    run.ei_budget = 150;

    OptimumPosterior op = fit_infer(d, fam, ipw_config(), gp_options_2d(), run);
    REQUIRE(op.rows.rows() == 15);
    REQUIRE(op.rows.cols() == 3);
    CHECK(op.psi_names == fam.psi_names);

    // every reported optimum is a path-grid point
    for (Eigen::Index i = 0; i < op.rows.rows(); ++i) {
        bool on_grid = false;
        for (Eigen::Index g = 0; g < run.path_grid.rows(); ++g)
            if ((op.rows.block(i, 0, 1, 2) - run.path_grid.row(g)).norm() == 0.0)
                on_grid = true;
        CHECK(on_grid);
    }

    // rerunning bootstrap 2 alone reproduces its block bitwise
    FitInferRun sub = run;
    sub.boot_start = 2;
    sub.boot_end = 2;
    OptimumPosterior op2 = fit_infer(d, fam, ipw_config(), gp_options_2d(), sub);
    REQUIRE(op2.rows.rows() == 5);
    CHECK((op2.rows - op.rows.block(5, 0, 5, 3)).lpNorm<Eigen::Infinity>() == 0.0);

    CHECK_THROWS_AS(fit_infer(d, fam, ipw_config(), gp_options_2d(),
                              [&] { FitInferRun r = run; r.boot_start = 5; r.boot_end = 4;
                                    return r; }()),
                    ConfigError);
    CHECK_THROWS_AS(fit_infer(d, fam, ipw_config(), gp_options_2d(),
                              [&] { FitInferRun r = run; r.path_grid(0, 0) = 100.0;
                                    return r; }()),
                    ConfigError);
}

TEST_CASE("state file round trip resumes identically") {
    Dataset d = simulate_dataset({.n = 250, .seed = 83});
    RegimeFamily fam = cd4_family();
    GpOptions opt = gp_options_2d();
    opt.prior = PriorSpec{{{3.64, 0.76}, {3.64, 0.76}}};
    EmulationState st = design_fit(d, fam, ipw_config(), square_design(3), opt);
    st = sequence_fit(d, fam, st, 2, 150, 55);

    const std::string path = "/tmp/dtropt_test_state.txt";
    save_state(st, path);
    EmulationState loaded = load_state(path, ipw_config());
    CHECK(loaded.m() == st.m());
    CHECK(loaded.design_size == st.design_size);
    CHECK(loaded.seq_steps == 2);
    CHECK(loaded.seq_seed == 55);
    CHECK((loaded.points - st.points).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK((loaded.values - st.values).lpNorm<Eigen::Infinity>() == 0.0);
    REQUIRE(loaded.gp_options.prior.has_value());
    CHECK(loaded.gp_options.prior->lognormal[0].first == 3.64);
    CHECK((loaded.fit.theta - st.fit.theta).lpNorm<Eigen::Infinity>() == 0.0);

    // continuing from the loaded state matches continuing from the original
    EmulationState a = sequence_fit(d, fam, st, 2, 150, 55);
    EmulationState b = sequence_fit(d, fam, loaded, 2, 150, 55);
    CHECK((a.points - b.points).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK((a.values - b.values).lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("state file rejects corruption and unknown versions") {
    Dataset d = simulate_dataset({.n = 150, .seed = 87});
    RegimeFamily fam = cd4_family();
    EmulationState st = design_fit(d, fam, ipw_config(), square_design(3), gp_options_2d());
    const std::string path = "/tmp/dtropt_test_state2.txt";
    save_state(st, path);

    // read whole file
    std::ifstream is(path);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    is.close();

    auto write = [&](const std::string& t) {
        std::ofstream os(path);
        os << t;
    };
    write("dtropt-state 2\n" + text.substr(text.find('\n') + 1));
    CHECK_THROWS_AS(load_state(path, ipw_config()), IoError);

    write("not-a-state-file\n");
    CHECK_THROWS_AS(load_state(path, ipw_config()), IoError);

    write(text.substr(0, text.size() / 2));  // truncated
    CHECK_THROWS_AS(load_state(path, ipw_config()), IoError);

    CHECK_THROWS_AS(load_state("/tmp/definitely_missing_state.txt", ipw_config()), IoError);
}
