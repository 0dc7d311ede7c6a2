#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "polyssm/data.hpp"
#include "support.hpp"

using namespace polyssm;
using namespace polyssm::data;
using testing_support::Gen;

namespace {

std::string write_temp(const std::string& name, const std::string& body) {
    const auto path = std::filesystem::temp_directory_path() / ("polyssm_data_" + name);
    std::ofstream(path) << body;
    return path.string();
}

SeriesTable random_table(Gen& gen, std::size_t T, std::size_t C) {
    SeriesTable t;
    for (std::size_t i = 0; i < T; ++i) t.timestamps.push_back(format_timestamp(1'600'000'000 + 900 * std::int64_t(i)));
    for (std::size_t c = 0; c < C; ++c) t.channel_names.push_back("c" + std::to_string(c));
    t.values = gen.tensor({T, C}, -50.0, 50.0);
    return t;
}

double correlation(const Tensor<double>& v, std::size_t a, std::size_t b) {
    const std::size_t T = v.shape()[0], C = v.shape()[1];
    double ma = 0, mb = 0;
    for (std::size_t t = 0; t < T; ++t) {
        ma += v[t * C + a];
        mb += v[t * C + b];
    }
    ma /= double(T);
    mb /= double(T);
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t t = 0; t < T; ++t) {
        const double x = v[t * C + a] - ma, y = v[t * C + b] - mb;
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST_CASE("timestamps") {
    CHECK(parse_timestamp("1970-01-01 00:00:00") == 0);
    CHECK(parse_timestamp("2016-07-01 01:00:00") == 1467334800);
    CHECK(parse_timestamp("2016-07-01T01:00") == 1467334800);
    CHECK(parse_timestamp("2016-07-01") == 1467331200);
    CHECK(format_timestamp(1467334800) == "2016-07-01 01:00:00");
    Gen gen(1);
    for (int i = 0; i < 200; ++i) {
        const auto s = std::int64_t(gen.real(0.0, 4e9));
        CHECK(parse_timestamp(format_timestamp(s)) == s);
    }
    CHECK_THROWS_AS(parse_timestamp("yesterday"), DataError);
}

TEST_CASE("load a well-formed file") {
    const auto path = write_temp("ok.csv",
                                 "date,a,b\n2020-01-01 00:00:00,1.5,-2\n2020-01-01 01:00:00,2.5,3e2\n"
                                 "2020-01-01 02:00:00,0,4\n");
    const SeriesTable t = load_csv(path);
    CHECK(t.rows() == 3);
    CHECK(t.channels() == 2);
    CHECK(t.channel_names == std::vector<std::string>{"a", "b"});
    CHECK(t.values.at({1, 1}) == 300.0);
    CHECK(t.timestamps[2] == "2020-01-01 02:00:00");
    std::filesystem::remove(path);
}

TEST_CASE("loader rejects malformed files") {
    auto fails_with = [](const std::string& name, const std::string& body, const std::string& needle) {
        const auto path = write_temp(name, body);
        CAPTURE(name);
        CHECK_THROWS_WITH_AS(load_csv(path), doctest::Contains(needle.c_str()), DataError);
        std::filesystem::remove(path);
    };
    fails_with("dup.csv", "date,a\n2020-01-01,1\n2020-01-02,2\n2020-01-02,3\n", "row 3");
    fails_with("back.csv", "date,a\n2020-01-02,1\n2020-01-01,2\n", "not after");
    fails_with("empty.csv", "", "no data rows");
    fails_with("header_only.csv", "date,a\n", "no data rows");
    fails_with("text.csv", "date,a\n2020-01-01,abc\n", "non-numeric");
    fails_with("missing.csv", "date,a,b\n2020-01-01,1,\n", "missing value");
    fails_with("nan.csv", "date,a\n2020-01-01,nan\n", "missing value");
    fails_with("short.csv", "date,a,b\n2020-01-01,1\n", "cells");
    fails_with("noname.csv", "time,a\n2020-01-01,1\n", "date");
    CHECK_THROWS_AS(load_csv("/nonexistent/file.csv"), DataError);
}

TEST_CASE("CSV round trip") {
    Gen gen(2);
    for (int trial = 0; trial < 10; ++trial) {
        const SeriesTable t = random_table(gen, gen.size(1, 50), gen.size(1, 5));
        const auto path = write_temp("rt.csv", "");
        write_csv(t, path);
        const SeriesTable back = load_csv(path);
        CHECK(back.timestamps == t.timestamps);
        CHECK(back.channel_names == t.channel_names);
        REQUIRE(back.values.shape() == t.values.shape());
        for (std::size_t i = 0; i < t.values.numel(); ++i) CHECK(std::abs(back.values[i] - t.values[i]) <= 1e-9);
        std::filesystem::remove(path);
    }
}

TEST_CASE("split example") {
    Gen gen(3);
    const SeriesTable t = random_table(gen, 1000, 2);
    const SplitSpec s = make_splits(t, SplitOptions{}, 96, 96);
    CHECK(s.windows(Split::train) == 509);
    CHECK(s.border2[0] == 700);
    CHECK(s.border1[1] == 700 - 96);
    CHECK(s.border2[1] == 800);
    CHECK(s.border1[2] == 800 - 96);
    CHECK(s.border2[2] == 1000);
    CHECK(s.windows(Split::val) == 100 - 96 + 1);
    CHECK(s.windows(Split::test) == 200 - 96 + 1);

    // train statistics only
    for (std::size_t c = 0; c < 2; ++c) {
        double m = 0;
        for (std::size_t i = 0; i < 700; ++i) m += t.values[i * 2 + c];
        CHECK(s.mean[c] == doctest::Approx(m / 700).epsilon(1e-12));
    }

    SplitOptions fixed;
    fixed.fixed_rows = std::array<std::size_t, 3>{600, 200, 200};
    const SplitSpec f = make_splits(t, fixed, 96, 24);
    CHECK(f.border2[0] == 600);
    CHECK(f.windows(Split::train) == 600 - 96 - 24 + 1);
}

TEST_CASE("split preconditions") {
    Gen gen(4);
    CHECK_THROWS_WITH_AS(make_splits(random_table(gen, 300, 2), SplitOptions{}, 96, 96),
                         doctest::Contains("minimum"), DataError);
    SeriesTable constant = random_table(gen, 1000, 3);
    for (std::size_t t = 0; t < 1000; ++t) constant.values[t * 3 + 1] = 4.0;
    CHECK_THROWS_WITH_AS(make_splits(constant, SplitOptions{}, 96, 96), doctest::Contains("drop"), DataError);
    SplitOptions too_many;
    too_many.fixed_rows = std::array<std::size_t, 3>{800, 200, 200};
    CHECK_THROWS_AS(make_splits(random_table(gen, 1000, 1), too_many, 96, 96), DataError);
}

TEST_CASE("window count matches enumeration") {
    Gen gen(5);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t b1 = gen.size(0, 50), b2 = b1 + gen.size(0, 200);
        const std::size_t L = gen.size(1, 60), H = gen.size(1, 60);
        std::size_t count = 0;
        for (std::size_t o = b1; o + L + H <= b2; ++o) ++count;
        CHECK(count_windows(b1, b2, L, H) == count);
    }
}

TEST_CASE("splits never leak targets") {
    Gen gen(6);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t L = gen.size(1, 64), H = gen.size(1, 64);
        const std::size_t T = 11 * (L + H) + gen.size(0, 500);
        const SeriesTable t = random_table(gen, T, 2);
        const ForecastTask task(t, SplitOptions{}, L, H);
        const SplitSpec& s = task.spec();
        std::size_t last_target[3] = {0, 0, 0};
        std::size_t first_target[3] = {T, T, T};
        for (Split sp : {Split::train, Split::val, Split::test}) {
            const auto k = std::size_t(sp);
            for (std::size_t i = 0; i < task.windows(sp); ++i) {
                const std::size_t o = task.origin(sp, i);
                first_target[k] = std::min(first_target[k], o + L);
                last_target[k] = std::max(last_target[k], o + L + H - 1);
                CHECK(o + L + H <= s.border2[k]);
            }
        }
        CHECK(last_target[0] < s.target_start(Split::val));
        CHECK(last_target[1] < s.target_start(Split::test));
        CHECK(first_target[1] >= s.border2[0]);
        CHECK(first_target[2] >= s.border2[1]);
    }
}

TEST_CASE("windows carry normalized values") {
    Gen gen(7);
    const SeriesTable t = random_table(gen, 600, 3);
    const ForecastTask task(t, SplitOptions{}, 24, 12);
    Tensor<double> x, y;
    task.window(Split::val, 5, x, y);
    CHECK(x.shape() == Shape{3, 24});
    CHECK(y.shape() == Shape{3, 12});
    const std::size_t o = task.origin(Split::val, 5);
    const SplitSpec& s = task.spec();
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(x.at({c, 0}) == doctest::Approx((t.values.at({o, c}) - s.mean[c]) / s.std[c]));
        CHECK(y.at({c, 11}) == doctest::Approx((t.values.at({o + 35, c}) - s.mean[c]) / s.std[c]));
    }
    Tensor<float> bx, by;
    task.batch(Split::val, {5, 0}, bx, by);
    CHECK(bx.shape() == Shape{2, 3, 24});
    CHECK(bx.at({0, 2, 7}) == float(x.at({2, 7})));
    CHECK_THROWS_AS(task.window(Split::test, task.windows(Split::test), x, y), std::out_of_range);
}

TEST_CASE("normalize and denormalize are inverse") {
    Gen gen(8);
    for (int trial = 0; trial < 20; ++trial) {
        const SeriesTable t = random_table(gen, 800, gen.size(1, 4));
        const SplitSpec s = make_splits(t, SplitOptions{}, 48, 48);
        const Tensor<double> back = denormalize(normalize(t.values, s), s);
        for (std::size_t i = 0; i < t.values.numel(); ++i) CHECK(std::abs(back[i] - t.values[i]) <= 1e-6);
    }
    // the train rows come out with zero mean and unit std
    const SeriesTable t = random_table(gen, 1000, 2);
    const SplitSpec s = make_splits(t, SplitOptions{}, 96, 96);
    const Tensor<double> z = normalize(t.values, s);
    for (std::size_t c = 0; c < 2; ++c) {
        double m = 0, v = 0;
        for (std::size_t i = 0; i < 700; ++i) m += z[i * 2 + c];
        m /= 700;
        for (std::size_t i = 0; i < 700; ++i) v += (z[i * 2 + c] - m) * (z[i * 2 + c] - m);
        CHECK(std::abs(m) <= 1e-12);
        CHECK(std::abs(v / 700 - 1.0) <= 1e-12);
    }
}

TEST_CASE("synthetic generator shape and metadata") {
    SynthOptions o;
    o.length = 500;
    o.channels = 4;
    const SynthResult r = synth_cdt(o);
    CHECK(r.table.rows() == 500);
    CHECK(r.table.channels() == 4);
    CHECK(r.table.channel_names[0] == "x0");
    for (std::size_t i = 1; i < r.table.rows(); ++i)
        CHECK(parse_timestamp(r.table.timestamps[i]) > parse_timestamp(r.table.timestamps[i - 1]));
    CHECK(r.meta.at("channels") == 4);
    CHECK(r.meta.at("coupled_channels").size() == 3);
    CHECK(r.meta.at("regime") == "switching");
    for (double v : r.table.values.storage()) CHECK(std::isfinite(v));
}

TEST_CASE("zero coupling leaves channels uncorrelated") {
    SynthOptions o;
    o.regime = Regime::linear;
    o.alpha = 0.0;
    o.channels = 5;
    o.length = 20000;
    const SynthResult r = synth_cdt(o);
    for (std::size_t a = 0; a < 5; ++a)
        for (std::size_t b = a + 1; b < 5; ++b) {
            CAPTURE(a);
            CAPTURE(b);
            CHECK(std::abs(correlation(r.table.values, a, b)) <= 0.05);
        }
}

TEST_CASE("unit coupling without lag or noise copies the base channel") {
    SynthOptions o;
    o.regime = Regime::linear;
    o.alpha = 1.0;
    o.tau = 0;
    o.noise = false;
    o.length = 3000;
    o.channels = 3;
    const SynthResult r = synth_cdt(o);
    for (std::size_t t = 0; t < o.length; ++t) {
        CHECK(r.table.values.at({t, 1}) == r.table.values.at({t, 0}));
        CHECK(r.table.values.at({t, 2}) == r.table.values.at({t, 0}));
    }
}

TEST_CASE("linear coupling follows the lagged base channel") {
    SynthOptions o;
    o.regime = Regime::linear;
    o.alpha = 0.5;
    o.tau = 7;
    o.noise = false;
    o.length = 400;
    const SynthResult r = synth_cdt(o);
    for (std::size_t t = 7; t < o.length; ++t)
        CHECK(r.table.values.at({t, 3}) == doctest::Approx(0.5 * r.table.values.at({t - 7, 0})).epsilon(1e-14));
}

TEST_CASE("switching alternates between the two laws") {
    SynthOptions o;
    o.channels = 3;
    o.length = 800;
    o.switch_interval = 200;
    o.noise = false;
    o.alpha = 1.0;
    o.tau = 0;
    const SynthResult r = synth_cdt(o);
    // channel 2 copies x0 on linear stretches and departs from it otherwise
    double linear_gap = 0, poly_gap = 0;
    for (std::size_t t = 0; t < o.length; ++t) {
        const double gap = std::abs(r.table.values.at({t, 2}) - r.table.values.at({t, 0}));
        ((t / 200) % 2 == 0 ? linear_gap : poly_gap) += gap;
    }
    CHECK(linear_gap == 0.0);
    CHECK(poly_gap > 1.0);
    // channel 1 stays linear throughout
    for (std::size_t t = 0; t < o.length; ++t) CHECK(r.table.values.at({t, 1}) == r.table.values.at({t, 0}));
}

TEST_CASE("generator is deterministic per seed") {
    SynthOptions o;
    o.length = 2000;
    const SynthResult a = synth_cdt(o), b = synth_cdt(o);
    CHECK(a.table.values.storage() == b.table.values.storage());
    CHECK(a.table.timestamps == b.table.timestamps);
    CHECK(a.meta == b.meta);
    o.seed = 8;
    CHECK(synth_cdt(o).table.values.storage() != a.table.values.storage());
}

TEST_CASE("generator preconditions") {
    SynthOptions o;
    o.channels = 1;
    CHECK_THROWS_AS(synth_cdt(o), DataError);
    CHECK_THROWS_AS(parse_regime("cubic"), std::invalid_argument);
    for (Regime r : {Regime::linear, Regime::polynomial, Regime::switching}) CHECK(parse_regime(to_string(r)) == r);
}
