#include <doctest.h>

#include <cmath>
#include <functional>
#include <numbers>

#include "polyssm/hippo.hpp"
#include "polyssm/legendre.hpp"

using namespace polyssm;
using namespace polyssm::hippo;

namespace {

std::vector<Sample> sampled(const std::function<double(double)>& u, double t0, double t1, std::size_t n) {
    std::vector<Sample> s;
    for (std::size_t i = 0; i < n; ++i) {
        const double t = t0 + (t1 - t0) * double(i) / double(n - 1);
        s.push_back({t, u(t)});
    }
    return s;
}

std::vector<double> final_coeffs(const CoeffTrajectory& traj) {
    const std::size_t N = traj.coeffs.shape()[1];
    const auto all = traj.coeffs.data();
    return {all.end() - std::ptrdiff_t(N), all.end()};
}

// Classical RK4 on dc/dt = (A c + B u(t)) / t with the same starting
// convention, written out from the operator formula.
std::vector<double> rk4_reference(const std::function<double(double)>& u, double t0, double t1, std::size_t steps,
                                  std::size_t N) {
    auto a = [](std::size_t n, std::size_t k) {
        if (n > k) return -std::sqrt(double((2 * n + 1) * (2 * k + 1)));
        if (n == k) return -double(n + 1);
        return 0.0;
    };
    auto f = [&](double t, const std::vector<double>& c) {
        std::vector<double> out(N);
        for (std::size_t n = 0; n < N; ++n) {
            double acc = std::sqrt(2.0 * (2.0 * n + 1.0)) * u(t);
            for (std::size_t k = 0; k < N; ++k) acc += a(n, k) * c[k];
            out[n] = acc / t;
        }
        return out;
    };
    std::vector<double> c(N, 0.0);
    c[0] = u(t0) * std::sqrt(2.0);
    const double h = (t1 - t0) / double(steps);
    for (std::size_t s = 0; s < steps; ++s) {
        const double t = t0 + h * double(s);
        auto axpy = [&](const std::vector<double>& k, double w) {
            std::vector<double> r(N);
            for (std::size_t n = 0; n < N; ++n) r[n] = c[n] + w * k[n];
            return r;
        };
        const auto k1 = f(t, c);
        const auto k2 = f(t + h / 2, axpy(k1, h / 2));
        const auto k3 = f(t + h / 2, axpy(k2, h / 2));
        const auto k4 = f(t + h, axpy(k3, h));
        for (std::size_t n = 0; n < N; ++n) c[n] += h / 6.0 * (k1[n] + 2 * k2[n] + 2 * k3[n] + k4[n]);
    }
    return c;
}

double sine10(double t) { return std::sin(2.0 * std::numbers::pi * t / 10.0); }

}  // namespace

TEST_CASE("LegS operator entries") {
    const LegsOperator two = build_legs(2);
    CHECK(std::abs(two.A.at({0, 0}) + 1.0) <= 1e-12);
    CHECK(two.A.at({0, 1}) == 0.0);
    CHECK(std::abs(two.A.at({1, 0}) + std::sqrt(3.0)) <= 1e-12);
    CHECK(std::abs(two.A.at({1, 1}) + 2.0) <= 1e-12);
    CHECK(std::abs(two.B[0] - std::sqrt(2.0)) <= 1e-12);
    CHECK(std::abs(two.B[1] - std::sqrt(6.0)) <= 1e-12);

    const LegsOperator one = build_legs(1);
    CHECK(one.A[0] == -1.0);
    CHECK(std::abs(one.B[0] - std::sqrt(2.0)) <= 1e-15);

    const LegsOperator three = build_legs(3);
    CHECK(std::abs(three.A.at({2, 0}) + std::sqrt(5.0)) <= 1e-12);
    CHECK(std::abs(three.A.at({2, 1}) + std::sqrt(15.0)) <= 1e-12);
    CHECK(three.A.at({2, 2}) == -3.0);
    CHECK_THROWS_AS(build_legs(0), std::invalid_argument);
}

TEST_CASE("LegS leading blocks are the smaller operators") {
    const LegsOperator big = build_legs(12);
    for (std::size_t k = 1; k <= 12; ++k) {
        const LegsOperator small = build_legs(k);
        for (std::size_t i = 0; i < k; ++i) {
            CHECK(small.B[i] == big.B[i]);
            for (std::size_t j = 0; j < k; ++j) CHECK(small.A.at({i, j}) == big.A.at({i, j}));
        }
    }
}

TEST_CASE("zero input keeps a zero state") {
    const auto s = sampled([](double) { return 0.0; }, 1.0, 10.0, 500);
    const CoeffTrajectory traj = legs_online_approx(s, 8);
    for (double v : traj.coeffs.storage()) CHECK(v == 0.0);
    CHECK(traj.times.size() == s.size());
    for (std::size_t i = 1; i < traj.times.size(); ++i) CHECK(traj.times[i] > traj.times[i - 1]);
    CHECK(traj.times.front() > 0.0);
}

TEST_CASE("online approximation of a constant") {
    const auto u = [](double) { return 1.0; };
    const auto s = sampled(u, 1.0, 10.0, 2000);
    const CoeffTrajectory traj = legs_online_approx(s, 8);
    const auto c = final_coeffs(traj);
    const auto ref = rk4_reference(u, 1.0, 10.0, 20000, 8);
    for (std::size_t n = 0; n < 8; ++n) CHECK(std::abs(c[n] - ref[n]) <= 1e-6);
    CHECK(relative_l2_error(s, c, 10.0, 1.0) <= 1e-3);
}

TEST_CASE("online approximation of a sine") {
    const auto s = sampled(sine10, 1.0, 10.0, 2000);
    const CoeffTrajectory traj = legs_online_approx(s, 32);
    const auto c = final_coeffs(traj);
    const auto ref = rk4_reference(sine10, 1.0, 10.0, 20000, 32);
    double worst = 0.0;
    for (std::size_t n = 0; n < 32; ++n) worst = std::max(worst, std::abs(c[n] - ref[n]));
    CHECK(worst <= 1e-4);
    CHECK(relative_l2_error(s, c, 10.0, 1.0) <= 1e-2);
    // the reference coefficients reconstruct equally well
    CHECK(relative_l2_error(s, ref, 10.0, 1.0) <= 1e-2);
    // pointwise error away from the origin
    for (const Sample& p : s) {
        if (p.t < 1.5) continue;
        CHECK(std::abs(reconstruct(c, 10.0, p.t) - p.u) <= 5e-2);
    }
}

TEST_CASE("reconstruction error does not grow with the state size") {
    const auto s = sampled([](double t) { return std::sin(t); }, 1.0, 10.0, 4000);
    double prev = INFINITY;
    for (std::size_t N : {4, 8, 16, 32}) {
        const auto c = final_coeffs(legs_online_approx(s, N));
        const double err = relative_l2_error(s, c, 10.0, 1.0);
        CAPTURE(N);
        CHECK(err <= prev * 1.05);
        prev = err;
    }
    CHECK(prev <= 1e-2);
}

TEST_CASE("online approximation preconditions") {
    std::vector<Sample> bad{{1.0, 0.0}, {2.0, 1.0}, {2.0, 0.5}};
    CHECK_THROWS_AS(legs_online_approx(bad, 4), std::invalid_argument);
    std::vector<Sample> one{{1.0, 0.0}};
    CHECK_THROWS_AS(legs_online_approx(one, 4), std::invalid_argument);
    std::vector<Sample> at_zero{{0.0, 0.0}, {1.0, 0.0}};
    CHECK_THROWS_AS(legs_online_approx(at_zero, 4), std::invalid_argument);
    std::vector<Sample> huge{{1.0, 1e300}, {2.0, 1e308}, {3.0, 1e308}};
    try {
        legs_online_approx(huge, 4);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
}

TEST_CASE("start time is clamped away from the singularity") {
    const auto s = sampled(sine10, 1e-3, 10.0, 5000);
    const CoeffTrajectory traj = legs_online_approx(s, 16);
    CHECK(traj.clamped);
    CHECK(traj.first_sample == doctest::Approx(1e-3));
    CHECK(traj.start_time >= 0.1);
    CHECK(traj.times.front() == traj.start_time);
    const CoeffTrajectory late = legs_online_approx(sampled(sine10, 1.0, 10.0, 100), 4);
    CHECK_FALSE(late.clamped);
}

TEST_CASE("reconstruct examples") {
    const std::vector<double> zero(6, 0.0);
    const std::vector<double> e0{1.0, 0.0, 0.0, 0.0};
    for (double t : {0.0, 1.3, 5.0, 7.9}) {
        CHECK(reconstruct(zero, 7.9, t) == 0.0);
        CHECK(reconstruct(e0, 7.9, t) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-15));
    }
    CHECK_THROWS_AS(reconstruct(e0, 5.0, 5.5), DomainError);
    CHECK_THROWS_AS(reconstruct(e0, 5.0, -0.1), DomainError);
    // agrees with the normalized basis evaluated directly
    const std::vector<double> c{0.3, -1.2, 0.7, 0.05, -0.4};
    for (double t : {0.0, 0.9, 2.5, 4.0}) {
        double direct = 0.0;
        for (unsigned n = 0; n < c.size(); ++n) direct += c[n] * legendre::eval_normalized(n, 2.0 * t / 4.0 - 1.0);
        CHECK(reconstruct(c, 4.0, t) == doctest::Approx(direct).epsilon(1e-13));
    }
}

TEST_CASE("direct projection examples") {
    const double T = 10.0;
    const auto constant = sampled([](double) { return 2.5; }, 0.0, T, 200);
    const Tensor<double> c = project_coefficients(constant, T, 6);
    CHECK(std::abs(c[0] - 2.5 * std::sqrt(2.0)) <= 1e-10);
    for (std::size_t n = 1; n < 6; ++n) CHECK(std::abs(c[n]) <= 1e-10);

    const auto g1 = sampled([&](double t) { return legendre::eval_normalized(1, 2.0 * t / T - 1.0); }, 0.0, T, 200);
    const Tensor<double> e1 = project_coefficients(g1, T, 6);
    for (std::size_t n = 0; n < 6; ++n) CHECK(std::abs(e1[n] - (n == 1 ? 1.0 : 0.0)) <= 1e-8);

    CHECK_THROWS_AS(project_coefficients(sampled(sine10, 0.0, T, 20), T, 8), std::invalid_argument);
    CHECK_THROWS_AS(project_coefficients(sampled(sine10, 1.0, T, 200), T, 8), std::invalid_argument);
}

TEST_CASE("direct projection and the online ODE agree") {
    const double t0 = 1.0, T = 10.0;
    const auto online = sampled(sine10, t0, T, 4000);
    const auto c = final_coeffs(legs_online_approx(online, 32));
    // the online state treats the history before t0 as u(t0) held constant
    const auto grid = sampled([&](double t) { return sine10(std::max(t, t0)); }, 0.0, T, 8000);
    const Tensor<double> direct = project_coefficients(grid, T, 32);
    for (std::size_t n = 0; n < 32; ++n) {
        CAPTURE(n);
        CHECK(std::abs(direct[n] - c[n]) <= 2e-2);
    }
}
