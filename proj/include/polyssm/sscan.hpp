#pragma once

#include <random>
#include <string>

#include "polyssm/graph.hpp"

// Selective state-space inner loop: input-dependent (delta, B, C),
// discretization of a diagonal continuous system, the linear recurrence
// h_t = a_t * h_{t-1} + b_t (sequential or work-efficient parallel scan),
// and the readout y = C h + D x.
namespace polyssm::sscan {

enum class ScanMode { sequential, parallel };

ScanMode parse_scan_mode(const std::string& name);
std::string to_string(ScanMode mode);

/// Per-step decay and drive stacked along a time axis, with identical shapes.
template <class T>
struct DiscretizedSteps {
    Tensor<T> a_bar;
    Tensor<T> bx;
};

/// Trainable arrays of the selective SSM at model width D and state size N.
template <class T>
struct SelectiveParams {
    SelectiveParams(std::size_t width, std::size_t state, std::mt19937_64& rng);

    std::size_t width;
    std::size_t state;
    Parameter<T> a_log;    // [D, N]; A = -exp(a_log)
    Parameter<T> w_delta;  // [D, D]
    Parameter<T> b_delta;  // [D]
    Parameter<T> w_b;      // [D, N]
    Parameter<T> w_c;      // [D, N]
    Parameter<T> d_skip;   // [D]

    std::vector<Parameter<T>*> parameters();
};

template <class T>
struct Selection {
    Var<T> delta;  // [..., D], strictly positive
    Var<T> b;      // [..., N]
    Var<T> c;      // [..., N]
};

/// delta = softplus(x W_delta + b_delta), B = x W_B, C = x W_C.
template <class T>
Selection<T> selectivize(Var<T> x, Var<T> w_delta, Var<T> b_delta, Var<T> w_b, Var<T> w_c);

/// a_bar[..., d, n] = exp(delta[..., d] * A[d, n]) with A = -exp(a_log).
template <class T>
Var<T> discretize_decay(Var<T> delta, Var<T> a_log);

/// bx[..., d, n] = delta[..., d] * B[..., n] * x[..., d].
template <class T>
Var<T> discretize_drive(Var<T> delta, Var<T> b, Var<T> x);

/// Plain-tensor discretization of one or more steps; throws NumericError
/// if any delta <= 0.
template <class T>
DiscretizedSteps<T> discretize(const Tensor<T>& delta, const Tensor<T>& a_log, const Tensor<T>& b,
                               const Tensor<T>& x);

/// States of h_t = a_t * h_{t-1} + b_t for every t. Inputs are time-major
/// [L, lanes...]; h0 has the lane shape (zero when omitted).
template <class T>
Tensor<T> scan_sequential(const DiscretizedSteps<T>& steps, const Tensor<T>* h0 = nullptr);

/// Same contract as scan_sequential, evaluated with an up-sweep/down-sweep
/// over (a, b) pairs under (a2, b2) o (a1, b1) = (a2 a1, a2 b1 + b2).
/// The combine tree depends only on L, so results do not depend on
/// `threads`.
template <class T>
Tensor<T> scan_parallel(const DiscretizedSteps<T>& steps, const Tensor<T>* h0 = nullptr,
                        unsigned threads = 1);

/// Either scan along an arbitrary time axis, zero initial state.
template <class T>
Tensor<T> scan(const Tensor<T>& a_bar, const Tensor<T>& bx, std::size_t time_axis, ScanMode mode,
               unsigned threads = 1);

/// Differentiable scan along `time_axis` from a zero state.
template <class T>
Var<T> selective_scan(Var<T> a_bar, Var<T> bx, long time_axis, ScanMode mode, unsigned threads = 1);

/// y[..., d] = sum_n c[..., n] h[..., d, n] + d_skip[d] x[..., d].
template <class T>
Var<T> readout(Var<T> h, Var<T> c, Var<T> x, Var<T> d_skip);

}  // namespace polyssm::sscan
