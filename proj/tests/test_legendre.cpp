#include <doctest.h>

#include <cmath>
#include <functional>

#include "polyssm/legendre.hpp"
#include "support.hpp"

using namespace polyssm;
using namespace polyssm::legendre;
using testing_support::Gen;

namespace {

double binom(unsigned n, unsigned k) {
    double r = 1.0;
    for (unsigned i = 1; i <= k; ++i) r = r * double(n - k + i) / double(i);
    return r;
}

// Explicit monomial expansion
// P_n(x) = 2^-n sum_k (-1)^k C(n, k) C(2n - 2k, n) x^(n - 2k).
double legendre_monomial(unsigned n, double x) {
    double s = 0.0;
    for (unsigned k = 0; 2 * k <= n; ++k) {
        s += (k % 2 == 0 ? 1.0 : -1.0) * binom(n, k) * binom(2 * n - 2 * k, n) * std::pow(x, double(n - 2 * k));
    }
    return s / std::pow(2.0, double(n));
}

// Counts every degree tuple in [0, n_deg]^C whose sum is at most n_deg.
std::uint64_t brute_count(std::size_t C, unsigned n_deg) {
    std::vector<unsigned> d(C, 0);
    std::uint64_t count = 0;
    for (;;) {
        unsigned total = 0;
        for (unsigned v : d) total += v;
        if (total <= n_deg) ++count;
        std::size_t i = 0;
        while (i < C && d[i] == n_deg) d[i++] = 0;
        if (i == C) break;
        ++d[i];
    }
    return count;
}

}  // namespace

TEST_CASE("univariate evaluation examples") {
    CHECK(eval_legendre(0, 0.3) == 1.0);
    CHECK(eval_legendre(1, -0.4) == -0.4);
    CHECK(eval_legendre(2, 0.5) == doctest::Approx(-0.125).epsilon(1e-15));
    CHECK_THROWS_AS(eval_legendre(2, 1.1), DomainError);
    CHECK_NOTHROW(eval_legendre(3, 1.0 + 1e-13));
}

TEST_CASE("Bonnet recurrence matches the monomial expansion") {
    Gen gen(17);
    for (int i = 0; i < 100; ++i) {
        const double x = gen.real(-1.0, 1.0);
        for (unsigned n = 0; n <= 6; ++n) {
            CHECK(std::abs(eval_legendre(n, x) - legendre_monomial(n, x)) <= 1e-12);
            CHECK(std::abs(eval_legendre(n, x)) <= 1.0 + 1e-15);
        }
    }
}

TEST_CASE("normalized basis examples") {
    for (double x : {-1.0, -0.2, 0.0, 0.7, 1.0}) CHECK(eval_normalized(0, x) == doctest::Approx(std::sqrt(0.5)));
    CHECK(eval_normalized(1, 1.0) == doctest::Approx(std::sqrt(1.5)).epsilon(1e-15));
    const QuadratureRule rule = gauss_legendre(16);
    double integral = 0.0;
    for (std::size_t i = 0; i < rule.order; ++i) {
        const double g = eval_normalized(2, rule.nodes[i]);
        integral += rule.weights[i] * g * g;
    }
    CHECK(std::abs(integral - 1.0) <= 1e-10);
}

TEST_CASE("multivariate evaluation examples") {
    const std::vector<double> ab{0.37, -0.81};
    CHECK(eval_multivariate({{0, 0}}, ab) == 1.0);
    const std::vector<double> p1{0.5, -0.5};
    CHECK(eval_multivariate({{1, 1}}, p1) == doctest::Approx(-0.25).epsilon(1e-15));
    const std::vector<double> p2{0.5, 0.9};
    CHECK(eval_multivariate({{2, 0}}, p2) == doctest::Approx(-0.125).epsilon(1e-15));
    const std::vector<double> outside{0.5, 1.5};
    CHECK_THROWS_AS(eval_multivariate({{1, 1}}, outside), DomainError);
    CHECK_THROWS_AS(eval_multivariate({{1, 1, 0}}, p1), DimensionError);
}

TEST_CASE("basis counting examples") {
    CHECK(count_degree(2, 2) == 6);
    for (unsigned n = 0; n < 8; ++n) CHECK(count_degree(1, n) == n + 1);
    CHECK(count_degree(3, 4) == 35);
    CHECK(count_total(2, 2) == 10);
    CHECK(count_total(1, 3) == 10);
    for (std::size_t c = 1; c <= 5; ++c) CHECK(count_total(c, 0) == 1);
}

TEST_CASE("count_degree matches exhaustive enumeration") {
    for (std::size_t C = 1; C <= 4; ++C)
        for (unsigned n = 0; n <= 5; ++n) {
            CAPTURE(C);
            CAPTURE(n);
            CHECK(count_degree(C, n) == brute_count(C, n));
            CHECK(enumerate_multi_indices(C, n).size() == brute_count(C, n));
            std::uint64_t total = 0;
            for (unsigned d = 0; d <= n; ++d) total += brute_count(C, d);
            CHECK(count_total(C, n) == total);
        }
}

TEST_CASE("multi-index enumeration is graded and complete") {
    const auto idx = enumerate_multi_indices(2, 2);
    const std::vector<std::vector<unsigned>> expect{{0, 0}, {1, 0}, {0, 1}, {2, 0}, {1, 1}, {0, 2}};
    REQUIRE(idx.size() == expect.size());
    for (std::size_t i = 0; i < idx.size(); ++i) CHECK(idx[i].degrees == expect[i]);
    const auto three = enumerate_multi_indices(3, 4);
    for (std::size_t i = 1; i < three.size(); ++i) CHECK(three[i - 1].total() <= three[i].total());
    for (std::size_t i = 0; i < three.size(); ++i)
        for (std::size_t j = i + 1; j < three.size(); ++j) CHECK_FALSE(three[i] == three[j]);
}

TEST_CASE("Gauss-Legendre rules") {
    for (std::size_t n = 1; n <= 20; ++n) {
        const QuadratureRule r = gauss_legendre(n);
        double wsum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            CHECK(r.weights[i] > 0.0);
            CHECK(std::abs(r.nodes[i]) <= 1.0);
            wsum += r.weights[i];
        }
        CHECK(std::abs(wsum - 2.0) <= 1e-12);
        // exact for x^k, k <= 2n - 1
        for (std::size_t k = 0; k <= 2 * n - 1; ++k) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += r.weights[i] * std::pow(r.nodes[i], double(k));
            const double exact = k % 2 == 1 ? 0.0 : 2.0 / double(k + 1);
            CHECK(std::abs(s - exact) <= 1e-12);
        }
    }
    CHECK_THROWS_AS(gauss_legendre(0), std::invalid_argument);
}

TEST_CASE("tensor-product integration") {
    const QuadratureRule r = gauss_legendre(4);
    // integral of x^2 y^2 over [-1, 1]^2 is 4/9
    const double v = integrate([](std::span<const double> p) { return p[0] * p[0] * p[1] * p[1]; }, 2, r);
    CHECK(v == doctest::Approx(4.0 / 9.0).epsilon(1e-13));
}

TEST_CASE("Gram matrix orthogonality") {
    const Tensor<double> g1 = gram_matrix(1, 1, gauss_legendre(2));
    CHECK(std::abs(g1.at({0, 0}) - 2.0) <= 1e-12);
    CHECK(std::abs(g1.at({1, 1}) - 2.0 / 3.0) <= 1e-12);
    CHECK(std::abs(g1.at({0, 1})) <= 1e-12);

    for (std::size_t C = 1; C <= 3; ++C)
        for (unsigned deg = 0; deg <= 3; ++deg) {
            const auto idx = enumerate_multi_indices(C, deg);
            const Tensor<double> g = gram_matrix(C, deg, gauss_legendre(deg + 1));
            const std::size_t n = idx.size();
            REQUIRE(g.shape() == Shape{n, n});
            CHECK(std::abs(g[0] - std::pow(2.0, double(C))) <= 1e-10);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    CHECK(std::abs(g[i * n + j] - g[j * n + i]) <= 1e-12);
                    if (i == j) {
                        double expect = 1.0;
                        for (unsigned d : idx[i].degrees) expect *= 2.0 / (2.0 * d + 1.0);
                        CHECK(std::abs(g[i * n + i] - expect) <= 1e-10);
                    } else {
                        CHECK(std::abs(g[i * n + j]) <= 1e-10);
                    }
                }
        }
    CHECK_THROWS_AS(gram_matrix(2, 3, gauss_legendre(3)), std::invalid_argument);
}

TEST_CASE("multivariate projection recovers polynomial coefficients") {
    // f = 3 + 2 P1(x) - P1(x) P1(y) + 0.5 P2(y)
    auto f = [](std::span<const double> p) {
        return 3.0 + 2.0 * p[0] - p[0] * p[1] + 0.5 * (1.5 * p[1] * p[1] - 0.5);
    };
    const auto c = project_multivariate(f, 2, 2, gauss_legendre(4));
    const std::vector<double> expect{3.0, 2.0, 0.0, 0.0, -1.0, 0.5};
    REQUIRE(c.size() == expect.size());
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(std::abs(c[i] - expect[i]) <= 1e-12);
}
