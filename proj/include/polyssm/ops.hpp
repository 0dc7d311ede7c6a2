#pragma once

#include <random>
#include <vector>

#include "polyssm/graph.hpp"

// Differentiable primitives over Graph nodes. Every op records its output
// and, when any operand requires a gradient, a backward rule.
namespace polyssm::ops {

template <class T> Var<T> add(Var<T> a, Var<T> b);
template <class T> Var<T> sub(Var<T> a, Var<T> b);
template <class T> Var<T> mul(Var<T> a, Var<T> b);

/// x + b where b's shape equals the trailing dims of x.
template <class T> Var<T> add_trailing(Var<T> x, Var<T> b);
/// x * b where b's shape equals the trailing dims of x.
template <class T> Var<T> mul_trailing(Var<T> x, Var<T> b);
/// x * s for a single-element s.
template <class T> Var<T> scale_by(Var<T> x, Var<T> s);
template <class T> Var<T> scale(Var<T> x, T c);

template <class T> Var<T> exp(Var<T> x);
template <class T> Var<T> square(Var<T> x);
template <class T> Var<T> tanh(Var<T> x);
template <class T> Var<T> sigmoid(Var<T> x);
template <class T> Var<T> softplus(Var<T> x);
template <class T> Var<T> silu(Var<T> x);

template <class T> Var<T> sum(Var<T> x);
template <class T> Var<T> mean(Var<T> x);
/// Reduces the last axis away.
template <class T> Var<T> sum_last(Var<T> x);

template <class T> Var<T> softmax(Var<T> x, long axis);

/// a[..., m, k] x b[..., k, n]. Leading extents must match, or one side
/// must be a plain matrix shared across the other's leading extents.
template <class T> Var<T> matmul(Var<T> a, Var<T> b);

template <class T> Var<T> reshape(Var<T> x, Shape shape);
template <class T> Var<T> permute(Var<T> x, const std::vector<std::size_t>& perm);
/// Elements [begin, end) along `axis`.
template <class T> Var<T> slice(Var<T> x, long axis, std::size_t begin, std::size_t end);
template <class T> Var<T> concat(const std::vector<Var<T>>& parts, long axis);

/// RMS normalization over the last axis with a learned scale.
template <class T> Var<T> rms_norm(Var<T> x, Var<T> weight, T eps = T(1e-5));

/// Depthwise causal convolution along `time_axis` of x[..., L, ..., D]
/// where D is the last axis: y[t, d] = b[d] + sum_k w[d, k] x[t - K + 1 + k, d].
template <class T> Var<T> causal_conv1d(Var<T> x, Var<T> weight, Var<T> bias, long time_axis);

/// Inverted dropout. Identity when rate == 0.
template <class T> Var<T> dropout(Var<T> x, double rate, std::mt19937_64& rng);

template <class T> Var<T> mse_loss(Var<T> pred, Var<T> target);

}  // namespace polyssm::ops

namespace polyssm {

/// Generic permutation of a plain tensor.
template <class T>
Tensor<T> permuted(const Tensor<T>& x, const std::vector<std::size_t>& perm);

}  // namespace polyssm
