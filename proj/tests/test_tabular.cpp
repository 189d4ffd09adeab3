#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "dtropt/simulate.hpp"
#include "dtropt/tabular.hpp"

using namespace dtropt;

namespace {

std::string temp_path(const char* tag) {
    return std::string("/tmp/dtropt_test_") + tag + ".csv";
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream os(path);
    os << text;
}

const char* kSmall =
    "pid,x,z1,z2,y\n"
    "a,1.5,0,1,10\n"
    "b,2.5,1,0,20\n"
    "c,3.5,1,1,30\n"
    "d,4.5,0,0,40\n";

}  // namespace

TEST_CASE("load_csv reads a small two-stage file") {
    auto path = temp_path("small");
    write_file(path, kSmall);
    Dataset d = load_csv(path, "pid", {"z1", "z2"}, "y");
    CHECK(d.n() == 4);
    CHECK(d.stages() == 2);
    CHECK(d.treatment(1, 0) == 1);
    CHECK(d.treatment(3, 1) == 0);
    CHECK(d.outcome(2) == doctest::Approx(30.0));
    CHECK(d.value("x", 0) == doctest::Approx(1.5));
    CHECK(d.ids()[0] == "a");
}

TEST_CASE("load_csv rejects a non-binary treatment with the row named") {
    auto path = temp_path("badz");
    write_file(path, "pid,z1,y\na,0,1\nb,1,2\nc,2,3\n");
    try {
        load_csv(path, "pid", {"z1"}, "y");
        FAIL("expected DataError");
    } catch (const DataError& e) {
        std::string msg = e.what();
        CHECK(msg.find("z1") != std::string::npos);
        CHECK(msg.find("3") != std::string::npos);
    }
}

TEST_CASE("load_csv error cases") {
    auto path = temp_path("errs");
    SUBCASE("missing column") {
        write_file(path, "pid,z1,y\na,0,1\nb,1,2\n");
        CHECK_THROWS_AS(load_csv(path, "pid", {"z1", "z2"}, "y"), DataError);
    }
    SUBCASE("duplicate id") {
        write_file(path, "pid,z1,y\na,0,1\na,1,2\n");
        CHECK_THROWS_AS(load_csv(path, "pid", {"z1"}, "y"), DataError);
    }
    SUBCASE("unparseable numeric") {
        write_file(path, "pid,z1,y\na,0,xyz\nb,1,2\n");
        CHECK_THROWS_AS(load_csv(path, "pid", {"z1"}, "y"), DataError);
    }
    SUBCASE("missing value") {
        write_file(path, "pid,z1,y\na,0,\nb,1,2\n");
        CHECK_THROWS_AS(load_csv(path, "pid", {"z1"}, "y"), DataError);
    }
    SUBCASE("single patient") {
        write_file(path, "pid,z1,y\na,0,1\n");
        CHECK_THROWS_AS(load_csv(path, "pid", {"z1"}, "y"), DataError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_csv("/tmp/definitely_not_there.csv", "pid", {"z1"}, "y"),
                        IoError);
    }
}

TEST_CASE("emit then load round-trips the simulator output exactly") {
    Dataset d = simulate_dataset({.n = 57, .seed = 11});
    auto path = temp_path("roundtrip");
    emit_csv(d, path);
    Dataset d2 = load_csv(path, d.id_col(), d.treat_cols(), d.outcome_col());
    REQUIRE(d2.n() == d.n());
    REQUIRE(d2.column_names() == d.column_names());
    CHECK(d2.ids() == d.ids());
    for (const auto& name : d.column_names())
        for (std::size_t i = 0; i < d.n(); ++i)
            CHECK(d2.value(name, i) == d.value(name, i));
}

TEST_CASE("column order in the emitted file equals ingestion order") {
    auto path = temp_path("order");
    write_file(path, kSmall);
    Dataset d = load_csv(path, "pid", {"z1", "z2"}, "y");
    auto out = temp_path("order_out");
    emit_csv(d, out);
    std::ifstream is(out);
    std::string header;
    std::getline(is, header);
    CHECK(header == "pid,x,z1,z2,y");
}

TEST_CASE("validation rejects single-field corruptions of a valid file") {
    Dataset d = simulate_dataset({.n = 10, .seed = 3});
    auto path = temp_path("corrupt_base");
    emit_csv(d, path);
    std::ifstream is(path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(is, line)) lines.push_back(line);

    Rng rng(99);
    int rejected = 0, attempts = 0;
    for (int trial = 0; trial < 60; ++trial) {
        auto corrupted = lines;
        std::size_t li = 1 + rng.uniform_int(corrupted.size() - 1);
        std::string& target = corrupted[li];
        switch (rng.uniform_int(3)) {
            case 0: {  // blank out one field
                auto comma = target.find(',', target.size() / 2);
                if (comma == std::string::npos) continue;
                auto next = target.find(',', comma + 1);
                target.erase(comma + 1, (next == std::string::npos ? target.size() : next) -
                                            comma - 1);
                break;
            }
            case 1:  // non-numeric garbage in the last field
                target = target.substr(0, target.rfind(',') + 1) + "???";
                break;
            default:  // drop the last field entirely
                target = target.substr(0, target.rfind(','));
                break;
        }
        auto cpath = temp_path("corrupt");
        std::ofstream os(cpath);
        for (const auto& l : corrupted) os << l << "\n";
        os.close();
        ++attempts;
        try {
            load_csv(cpath, d.id_col(), d.treat_cols(), d.outcome_col());
        } catch (const DataError&) {
            ++rejected;
        }
    }
    CHECK(attempts > 30);
    CHECK(rejected == attempts);
}
