#include "polyssm/hippo.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "polyssm/legendre.hpp"

namespace polyssm::hippo {

LegsOperator build_legs(std::size_t N) {
    if (N == 0) throw std::invalid_argument("build_legs: state size must be at least 1");
    LegsOperator op{Tensor<double>({N, N}), Tensor<double>({N}), N};
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t k = 0; k < n; ++k) {
            op.A[n * N + k] = -std::sqrt(double(2 * n + 1) * double(2 * k + 1));
        }
        op.A[n * N + n] = -double(n + 1);
        op.B[n] = std::sqrt(2.0 * double(2 * n + 1));
    }
    return op;
}

double interpolate(std::span<const Sample> signal, double t) {
    if (signal.empty()) throw std::invalid_argument("interpolate: empty signal");
    if (t <= signal.front().t) return signal.front().u;
    if (t >= signal.back().t) return signal.back().u;
    auto it = std::upper_bound(signal.begin(), signal.end(), t,
                               [](double v, const Sample& s) { return v < s.t; });
    const Sample& hi = *it;
    const Sample& lo = *(it - 1);
    const double w = (t - lo.t) / (hi.t - lo.t);
    return lo.u + w * (hi.u - lo.u);
}

CoeffTrajectory legs_online_approx(std::span<const Sample> signal, std::size_t N,
                                   const OnlineOptions& options) {
    if (signal.size() < 2) throw std::invalid_argument("legs_online_approx: need at least 2 samples");
    if (!(signal.front().t > 0.0)) {
        throw std::invalid_argument("legs_online_approx: first sample time must be positive");
    }
    for (std::size_t i = 1; i < signal.size(); ++i) {
        if (!(signal[i].t > signal[i - 1].t)) {
            throw std::invalid_argument("legs_online_approx: sample times not strictly increasing at index " +
                                        std::to_string(i));
        }
    }
    const LegsOperator op = build_legs(N);
    const double horizon = signal.back().t;
    const double floor_time = options.clamp_fraction * horizon;
    std::size_t first = 0;
    while (first + 1 < signal.size() && signal[first].t < floor_time) ++first;

    CoeffTrajectory traj;
    traj.first_sample = signal.front().t;
    traj.start_time = signal[first].t;
    traj.clamped = first > 0;
    const std::size_t steps = signal.size() - first;
    traj.coeffs = Tensor<double>({steps, N});

    std::vector<double> c(N, 0.0), k1(N), mid(N), k2(N);
    c[0] = signal[first].u * std::sqrt(2.0);

    auto rhs = [&](double t, const std::vector<double>& state, double u, std::vector<double>& out) {
        for (std::size_t n = 0; n < N; ++n) {
            double acc = op.B[n] * u;
            for (std::size_t k = 0; k <= n; ++k) acc += op.A[n * N + k] * state[k];
            out[n] = acc / t;
        }
    };

    for (std::size_t s = 0; s < steps; ++s) {
        const std::size_t i = first + s;
        if (s > 0) {
            const Sample& a = signal[i - 1];
            const Sample& b = signal[i];
            const double h = b.t - a.t;
            rhs(a.t, c, a.u, k1);
            for (std::size_t n = 0; n < N; ++n) mid[n] = c[n] + 0.5 * h * k1[n];
            rhs(a.t + 0.5 * h, mid, 0.5 * (a.u + b.u), k2);
            for (std::size_t n = 0; n < N; ++n) {
                c[n] += h * k2[n];
                if (!std::isfinite(c[n])) {
                    throw NumericError("legs_online_approx: non-finite state at step " + std::to_string(s) +
                                       " (t = " + std::to_string(b.t) + ")");
                }
            }
        }
        traj.times.push_back(signal[i].t);
        std::copy(c.begin(), c.end(), traj.coeffs.data().begin() + s * N);
    }
    return traj;
}

double reconstruct(std::span<const double> coeffs, double T, double t) {
    if (!(T > 0.0) || t < 0.0 || t > T) {
        throw DomainError("reconstruct: query time " + std::to_string(t) + " outside [0, " +
                          std::to_string(T) + "]");
    }
    const double s = std::clamp(2.0 * t / T - 1.0, -1.0, 1.0);
    double acc = 0.0;
    double prev = 1.0, cur = s;
    for (std::size_t n = 0; n < coeffs.size(); ++n) {
        double p;
        if (n == 0) {
            p = 1.0;
        } else if (n == 1) {
            p = s;
        } else {
            const double k = double(n - 1);
            const double next = ((2.0 * k + 1.0) * s * cur - k * prev) / (k + 1.0);
            prev = cur;
            cur = next;
            p = cur;
        }
        acc += coeffs[n] * std::sqrt((2.0 * n + 1.0) / 2.0) * p;
    }
    return acc;
}

Tensor<double> project_coefficients(std::span<const Sample> grid, double T, std::size_t N) {
    if (N == 0) throw std::invalid_argument("project_coefficients: state size must be at least 1");
    if (grid.size() < 4 * (N + 1)) {
        throw std::invalid_argument("project_coefficients: grid of " + std::to_string(grid.size()) +
                                    " points is too coarse for N = " + std::to_string(N) + " (need " +
                                    std::to_string(4 * (N + 1)) + ")");
    }
    const double slack = 1e-9 * T;
    if (grid.front().t > slack || grid.back().t < T - slack) {
        throw std::invalid_argument("project_coefficients: grid must cover [0, T]");
    }
    // linear u times a degree N-1 polynomial: exact with N/2 + 1 nodes per interval
    const auto rule = legendre::gauss_legendre(N / 2 + 2);
    Tensor<double> c({N});
    std::vector<double> p(N);
    for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
        const double a = std::max(grid[i].t, 0.0);
        const double b = std::min(grid[i + 1].t, T);
        if (b <= a) continue;
        const double half = 0.5 * (b - a);
        for (std::size_t q = 0; q < rule.nodes.size(); ++q) {
            const double t = a + half * (rule.nodes[q] + 1.0);
            const double u = interpolate(grid, t);
            const double s = std::clamp(2.0 * t / T - 1.0, -1.0, 1.0);
            p[0] = 1.0;
            if (N > 1) p[1] = s;
            for (std::size_t k = 1; k + 1 < N; ++k) {
                p[k + 1] = ((2.0 * k + 1.0) * s * p[k] - double(k) * p[k - 1]) / (k + 1.0);
            }
            // ds = (2 / T) dt
            const double w = rule.weights[q] * half * 2.0 / T * u;
            for (std::size_t n = 0; n < N; ++n) c[n] += w * std::sqrt((2.0 * n + 1.0) / 2.0) * p[n];
        }
    }
    return c;
}

double relative_l2_error(std::span<const Sample> signal, std::span<const double> coeffs, double T,
                         double t_from) {
    double num = 0.0, den = 0.0;
    for (const Sample& s : signal) {
        if (s.t < t_from || s.t > T) continue;
        const double e = reconstruct(coeffs, T, s.t) - s.u;
        num += e * e;
        den += s.u * s.u;
    }
    if (den == 0.0) return std::sqrt(num);
    return std::sqrt(num / den);
}

}  // namespace polyssm::hippo
