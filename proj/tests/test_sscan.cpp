#include <doctest.h>

#include <cmath>

#include "polyssm/gradcheck.hpp"
#include "polyssm/sscan.hpp"
#include "support.hpp"

using namespace polyssm;
using namespace polyssm::sscan;
using testing_support::Gen;
using testing_support::jvp_rel_error;
using testing_support::weighted_sum;

namespace {

// Plain recurrence over a time-major [L, lanes] layout.
template <class T>
Tensor<T> naive_scan(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>* h0 = nullptr) {
    const std::size_t L = a.shape()[0], lanes = a.numel() / L;
    Tensor<T> h(a.shape());
    for (std::size_t i = 0; i < lanes; ++i) {
        T prev = h0 ? (*h0)[i] : T{0};
        for (std::size_t t = 0; t < L; ++t) {
            prev = a[t * lanes + i] * prev + b[t * lanes + i];
            h[t * lanes + i] = prev;
        }
    }
    return h;
}

template <class T>
DiscretizedSteps<T> random_steps(Gen& gen, const Shape& s) {
    return {gen.tensor<T>(s, 0.0, 1.0), gen.tensor<T>(s, -1.0, 1.0)};
}

Shape random_scan_shape(Gen& gen) {
    static const std::vector<std::size_t> lengths{1, 2, 3, 4, 5, 6, 7, 8, 9, 64, 1024};
    const std::size_t L = lengths[gen.size(0, lengths.size() - 1)];
    return {L, gen.size(1, 2), gen.size(1, 4), gen.size(1, 8), gen.size(1, 8)};
}

template <class T>
Tensor<T> run_selectivize_delta(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    Graph<T> g(false);
    const std::size_t D = x.shape().back(), N = 2;
    auto sel = selectivize(g.input(x), g.input(w), g.input(b), g.input(Tensor<T>({D, N})), g.input(Tensor<T>({D, N})));
    return sel.delta.value();
}

}  // namespace

TEST_CASE("scan mode names") {
    CHECK(parse_scan_mode("sequential") == ScanMode::sequential);
    CHECK(parse_scan_mode("par") == ScanMode::parallel);
    CHECK(to_string(ScanMode::parallel) == "parallel");
    CHECK_THROWS_AS(parse_scan_mode("chunked"), std::invalid_argument);
}

TEST_CASE("parameter initialization follows the LegS diagonal") {
    std::mt19937_64 rng(4);
    SelectiveParams<double> p(6, 5, rng);
    for (std::size_t d = 0; d < 6; ++d)
        for (std::size_t n = 0; n < 5; ++n) {
            CHECK(std::exp(p.a_log.value.at({d, n})) > 0.0);
            CHECK(-std::exp(p.a_log.value.at({d, n})) == doctest::Approx(-double(n + 1)).epsilon(1e-14));
        }
    for (double b : p.b_delta.value.storage()) {
        const double delta = std::log1p(std::exp(b));
        CHECK(delta >= 1e-3 * (1 - 1e-9));
        CHECK(delta <= 1e-1 * (1 + 1e-9));
    }
    CHECK(p.parameters().size() == 6);
}

TEST_CASE("selectivize examples") {
    const std::size_t D = 3, N = 3;
    const Tensor<double> bias = Tensor<double>::from({-1.0, 0.0, 2.0});
    const Tensor<double> delta = run_selectivize_delta(Tensor<double>({2, 4, D}), Tensor<double>({D, D}), bias);
    for (std::size_t i = 0; i < delta.numel(); ++i)
        CHECK(delta[i] == doctest::Approx(std::log1p(std::exp(bias[i % D]))).epsilon(1e-14));

    Gen gen(9);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor<double> d = run_selectivize_delta(gen.tensor({2, 3, D}, -20.0, 20.0), gen.tensor({D, D}, -3, 3),
                                                       gen.tensor({D}, -5, 5));
        for (double v : d.storage()) CHECK(v > 0.0);
    }

    Graph<double> g(false);
    const Tensor<double> wb = gen.tensor({D, N});
    Tensor<double> e1({1, D});
    e1[0] = 1.0;
    auto sel = selectivize(g.input(e1), g.input(Tensor<double>({D, D})), g.input(Tensor<double>({D})), g.input(wb),
                           g.input(Tensor<double>({D, N})));
    for (std::size_t n = 0; n < N; ++n) CHECK(sel.b.value()[n] == wb.at({0, n}));
}

TEST_CASE("discretize examples") {
    // A = -1 via a_log = 0, delta = ln 2
    auto one = discretize(Tensor<double>::from({std::log(2.0)}).reshaped({1, 1}), Tensor<double>({1, 1}),
                          Tensor<double>::from({1.0}).reshaped({1, 1}), Tensor<double>::from({1.0}).reshaped({1, 1}));
    CHECK(one.a_bar[0] == doctest::Approx(0.5).epsilon(1e-15));

    auto tiny = discretize(Tensor<double>::from({1e-12}).reshaped({1, 1}), Tensor<double>({1, 1}),
                           Tensor<double>::from({5.0}).reshaped({1, 1}), Tensor<double>::from({3.0}).reshaped({1, 1}));
    CHECK(tiny.a_bar[0] == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(std::abs(tiny.bx[0]) <= 1e-10);

    // A = -2, delta = 1, B = 3, x = 2
    auto direct = discretize(Tensor<double>::from({1.0}).reshaped({1, 1}),
                             Tensor<double>::from({std::log(2.0)}).reshaped({1, 1}),
                             Tensor<double>::from({3.0}).reshaped({1, 1}), Tensor<double>::from({2.0}).reshaped({1, 1}));
    CHECK(direct.a_bar[0] == doctest::Approx(std::exp(-2.0)).epsilon(1e-15));
    CHECK(direct.bx[0] == 6.0);

    CHECK_THROWS_AS(discretize(Tensor<double>::from({0.0}).reshaped({1, 1}), Tensor<double>({1, 1}),
                               Tensor<double>({1, 1}), Tensor<double>({1, 1})),
                    NumericError);
    CHECK_THROWS_AS(discretize(Tensor<double>::from({-0.5}).reshaped({1, 1}), Tensor<double>({1, 1}),
                               Tensor<double>({1, 1}), Tensor<double>({1, 1})),
                    NumericError);
}

TEST_CASE("discretized decay lies in (0, 1) for positive steps") {
    Gen gen(21);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t D = gen.size(1, 5), N = gen.size(1, 6);
        const auto s = discretize(gen.tensor({4, D}, 1e-4, 2.0), gen.tensor({D, N}, -2.0, 2.0), gen.tensor({4, N}),
                                  gen.tensor({4, D}));
        for (double a : s.a_bar.storage()) {
            CHECK(a > 0.0);
            CHECK(a < 1.0);
        }
    }
}

TEST_CASE("graph discretization matches the plain-tensor form") {
    Gen gen(22);
    const std::size_t D = 3, N = 4;
    const Tensor<double> delta = gen.tensor({2, 5, D}, 0.01, 1.0), a_log = gen.tensor({D, N}),
                         b = gen.tensor({2, 5, N}), x = gen.tensor({2, 5, D});
    Graph<double> g(false);
    const auto plain = discretize(delta, a_log, b, x);
    CHECK(discretize_decay(g.input(delta), g.input(a_log)).value() == plain.a_bar);
    CHECK(discretize_drive(g.input(delta), g.input(b), g.input(x)).value() == plain.bx);
}

TEST_CASE("sequential scan examples") {
    DiscretizedSteps<double> s{Tensor<double>::from({0.5, 0.5}), Tensor<double>::from({1.0, 1.0})};
    const Tensor<double> h = scan_sequential(s);
    CHECK(h == Tensor<double>::from({1.0, 1.5}));

    Gen gen(1);
    DiscretizedSteps<double> memoryless{Tensor<double>({5, 3}), gen.tensor({5, 3})};
    CHECK(scan_sequential(memoryless) == memoryless.bx);

    const Tensor<double> v = Tensor<double>::from({2.0, -1.0, 0.5});
    DiscretizedSteps<double> homog{gen.tensor({6, 3}, 0.1, 0.9), Tensor<double>({6, 3})};
    const Tensor<double> hh = scan_sequential(homog, &v);
    for (std::size_t i = 0; i < 3; ++i) {
        double prod = v[i];
        for (std::size_t t = 0; t < 6; ++t) {
            prod *= homog.a_bar[t * 3 + i];
            CHECK(hh[t * 3 + i] == doctest::Approx(prod).epsilon(1e-14));
        }
    }
}

TEST_CASE("sequential scan matches a plain loop") {
    Gen gen(2);
    for (int trial = 0; trial < 30; ++trial) {
        const Shape s = random_scan_shape(gen);
        const auto steps = random_steps<double>(gen, s);
        const Tensor<double> h0 = gen.tensor(Shape(s.begin() + 1, s.end()));
        CHECK(scan_sequential(steps) == naive_scan(steps.a_bar, steps.bx));
        CHECK(scan_sequential(steps, &h0) == naive_scan(steps.a_bar, steps.bx, &h0));
    }
}

TEST_CASE("parallel scan examples") {
    Gen gen(3);
    const auto single = random_steps<double>(gen, {1, 4});
    CHECK(scan_parallel(single) == scan_sequential(single));
    const auto seven = random_steps<double>(gen, {7, 3, 2});
    CHECK(max_abs_diff(scan_parallel(seven), scan_sequential(seven)) <= 1e-10);
    const auto long_run = random_steps<float>(gen, {1024, 8});
    CHECK(max_abs_diff(scan_parallel(long_run), scan_sequential(long_run)) <= 1e-5f);
}

TEST_CASE("parallel scan equals the sequential scan over random configurations") {
    Gen gen(4);
    for (int trial = 0; trial < 100; ++trial) {
        const Shape s = random_scan_shape(gen);
        CAPTURE(to_string(s));
        const auto f64 = random_steps<double>(gen, s);
        const Tensor<double> h0 = gen.tensor(Shape(s.begin() + 1, s.end()));
        CHECK(max_abs_diff(scan_parallel(f64), scan_sequential(f64)) <= 1e-10);
        CHECK(max_abs_diff(scan_parallel(f64, &h0), scan_sequential(f64, &h0)) <= 1e-10);
        DiscretizedSteps<float> f32{f64.a_bar.cast<float>(), f64.bx.cast<float>()};
        CHECK(max_abs_diff(scan_parallel(f32), scan_sequential(f32)) <= 1e-5f);
    }
}

TEST_CASE("parallel scan result does not depend on the worker count") {
    Gen gen(5);
    for (int trial = 0; trial < 10; ++trial) {
        const Shape s = random_scan_shape(gen);
        const auto steps = random_steps<float>(gen, s);
        const Tensor<float> one = scan_parallel(steps, static_cast<const Tensor<float>*>(nullptr), 1u);
        CHECK(scan_parallel(steps, static_cast<const Tensor<float>*>(nullptr), 2u) == one);
        CHECK(scan_parallel(steps, static_cast<const Tensor<float>*>(nullptr), 5u) == one);
    }
}

TEST_CASE("scan along an inner time axis") {
    Gen gen(6);
    const Tensor<double> a = gen.tensor({2, 9, 3, 2}, 0.0, 1.0), b = gen.tensor({2, 9, 3, 2});
    const Tensor<double> seq = scan(a, b, 1, ScanMode::sequential);
    const Tensor<double> par = scan(a, b, 1, ScanMode::parallel, 2);
    CHECK(max_abs_diff(seq, par) <= 1e-12);
    // reference: move time to the front, scan, move back
    const Tensor<double> ref =
        permuted(naive_scan(permuted(a, {1, 0, 2, 3}), permuted(b, {1, 0, 2, 3})), {1, 0, 2, 3});
    CHECK(max_abs_diff(seq, ref) <= 1e-15);
    CHECK_THROWS_AS(scan(a, b, 4, ScanMode::sequential), DimensionError);
    CHECK_THROWS_AS(scan(a, gen.tensor({2, 9, 3, 1}), 1, ScanMode::sequential), DimensionError);
}

TEST_CASE("states before a perturbed step are untouched") {
    Gen gen(7);
    for (int trial = 0; trial < 20; ++trial) {
        const Shape s = random_scan_shape(gen);
        const std::size_t L = s[0], lanes = numel(s) / L;
        auto steps = random_steps<double>(gen, s);
        const std::size_t tp = gen.size(0, L - 1);
        for (ScanMode mode : {ScanMode::sequential, ScanMode::parallel}) {
            const Tensor<double> before = scan(steps.a_bar, steps.bx, 0, mode);
            auto changed = steps;
            for (std::size_t i = 0; i < lanes; ++i) {
                changed.a_bar[tp * lanes + i] = gen.real(0.0, 1.0);
                changed.bx[tp * lanes + i] += 3.0;
            }
            const Tensor<double> after = scan(changed.a_bar, changed.bx, 0, mode);
            for (std::size_t k = 0; k < tp * lanes; ++k) CHECK(before[k] == after[k]);
        }
    }
}

TEST_CASE("states stay within the geometric bound") {
    Gen gen(8);
    for (int trial = 0; trial < 20; ++trial) {
        const Shape s = random_scan_shape(gen);
        const double m = gen.real(0.1, 5.0);
        const double amax = gen.real(0.1, 0.99);
        DiscretizedSteps<double> steps{gen.tensor(s, 0.0, amax), gen.tensor(s, -m, m)};
        const double bound = m / (1.0 - amax);
        for (ScanMode mode : {ScanMode::sequential, ScanMode::parallel})
            for (double v : scan(steps.a_bar, steps.bx, 0, mode).storage()) CHECK(std::abs(v) <= bound * (1 + 1e-12));
    }
}

TEST_CASE("readout examples") {
    Gen gen(10);
    const std::size_t B = 2, D = 3, N = 4;
    const Tensor<double> h = gen.tensor({B, D, N}), x = gen.tensor({B, D});
    Tensor<double> c0({B, N});
    for (std::size_t b = 0; b < B; ++b) c0.at({b, 0}) = 1.0;
    Graph<double> g(false);
    const Tensor<double> y =
        readout(g.input(h), g.input(c0), g.input(x), g.input(Tensor<double>({D}))).value();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t d = 0; d < D; ++d) CHECK(y.at({b, d}) == h.at({b, d, 0}));

    const Tensor<double> skip = gen.tensor({D});
    const Tensor<double> y2 = readout(g.input(Tensor<double>({B, D, N})), g.input(gen.tensor({B, N})), g.input(x),
                                      g.input(skip))
                                  .value();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t d = 0; d < D; ++d) CHECK(y2.at({b, d}) == skip[d] * x.at({b, d}));

    const Tensor<double> y3 = readout(g.input(Tensor<double>({B, D, N}, 1.0)), g.input(Tensor<double>({B, N}, 1.0)),
                                      g.input(x), g.input(Tensor<double>({D})))
                                  .value();
    for (double v : y3.storage()) CHECK(v == double(N));
}

TEST_CASE("scan gradients match central differences") {
    Gen gen(11);
    for (int trial = 0; trial < 12; ++trial) {
        const std::size_t L = gen.size(1, 9), lanes = gen.size(1, 3), inner = gen.size(1, 3);
        const long axis = trial % 2;
        const Shape s = axis == 0 ? Shape{L, lanes, inner} : Shape{lanes, L, inner};
        Parameter<double> a("a", gen.tensor(s, 0.05, 0.95));
        Parameter<double> b("b", gen.tensor(s));
        const Tensor<double> w = gen.tensor(s);
        for (ScanMode mode : {ScanMode::sequential, ScanMode::parallel}) {
            auto f = [&](Graph<double>& g) {
                return weighted_sum(selective_scan(g.param(a), g.param(b), axis, mode), w);
            };
            const auto report = finite_diff_check(f, {&a, &b});
            CHECK(report.pass);
            CHECK(jvp_rel_error(f, {&a, &b}, 100 + trial) <= 1e-6);
        }
    }
}

TEST_CASE("selective pieces have correct gradients") {
    Gen gen(12);
    for (int trial = 0; trial < 6; ++trial) {
        const std::size_t B = gen.size(1, 2), L = gen.size(2, 5), D = gen.size(1, 4), N = gen.size(1, 4);
        std::mt19937_64 rng(trial);
        SelectiveParams<double> p(D, N, rng);
        for (auto& v : p.a_log.value.storage()) v += gen.real(-0.3, 0.3);
        for (auto& v : p.d_skip.value.storage()) v = gen.real(-1.0, 1.0);
        Parameter<double> x("x", gen.tensor({B, L, D}));
        const Tensor<double> w = gen.tensor({B, L, D});
        auto f = [&](Graph<double>& g) {
            Var<double> xv = g.param(x);
            auto sel = selectivize(xv, g.param(p.w_delta), g.param(p.b_delta), g.param(p.w_b), g.param(p.w_c));
            Var<double> a_bar = discretize_decay(sel.delta, g.param(p.a_log));
            Var<double> bx = discretize_drive(sel.delta, sel.b, xv);
            // [B, L, D, N] states scanned along axis 1
            Var<double> h = selective_scan(a_bar, bx, 1, ScanMode::parallel);
            return weighted_sum(readout(h, sel.c, xv, g.param(p.d_skip)), w);
        };
        std::vector<Parameter<double>*> params = p.parameters();
        params.push_back(&x);
        const auto report = finite_diff_check(f, params);
        CHECK(report.pass);
        CHECK(jvp_rel_error(f, params, 7 + trial) <= 1e-6);
    }
}
