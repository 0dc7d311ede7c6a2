#pragma once

#include <span>
#include <vector>

#include "polyssm/tensor.hpp"

// HiPPO-LegS: online Legendre projection of a streamed signal under the
// uniformly scaled measure on [0, T].
namespace polyssm::hippo {

struct LegsOperator {
    Tensor<double> A;  // [N, N]
    Tensor<double> B;  // [N]
    std::size_t N = 0;
};

/// A_nk = -sqrt((2n+1)(2k+1)) for n > k, -(n+1) on the diagonal, 0 above;
/// B_n = sqrt(2(2n+1)).
LegsOperator build_legs(std::size_t N);

struct Sample {
    double t;
    double u;
};

struct OnlineOptions {
    /// Integration starts no earlier than this fraction of the final time.
    double clamp_fraction = 1e-2;
};

struct CoeffTrajectory {
    std::vector<double> times;
    Tensor<double> coeffs;  // [times.size(), N]
    double first_sample = 0.0;
    double start_time = 0.0;  // first integrated time after clamping
    bool clamped = false;
};

/// Integrates dc/dT = (A c + B u(T)) / T with the explicit midpoint rule,
/// one step per sample interval, u linearly interpolated at midpoints. The
/// history before the start time is taken as the first integrated sample
/// held constant, so c(start) = u(start) * sqrt(2) * e_0.
CoeffTrajectory legs_online_approx(std::span<const Sample> signal, std::size_t N,
                                   const OnlineOptions& options = {});

/// sum_n c_n g_n(2t/T - 1) for 0 <= t <= T.
double reconstruct(std::span<const double> coeffs, double T, double t);

/// Direct projection c_n = int_{-1}^{1} u((s+1)T/2) g_n(s) ds of the
/// piecewise-linear interpolant of `grid`, which must cover [0, T] with at
/// least 4 (N + 1) points.
Tensor<double> project_coefficients(std::span<const Sample> grid, double T, std::size_t N);

/// Piecewise-linear interpolation; constant beyond the end samples.
double interpolate(std::span<const Sample> signal, double t);

/// sqrt(sum (u_hat - u)^2 / sum u^2) over samples with t in [t_from, T].
double relative_l2_error(std::span<const Sample> signal, std::span<const double> coeffs, double T,
                         double t_from);

}  // namespace polyssm::hippo
