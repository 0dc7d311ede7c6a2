#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "polyssm/graph.hpp"

// Channel-mixing transforms of the SSM coefficient state: LCM, MOPA and the
// gated order combination, plus the dense multivariate-basis projection
// they stand in for.
namespace polyssm::polyops {

/// Which state transform a block applies before readout.
enum class Variant { full, gate_only, no_lcm, no_mopa, vanilla };

Variant parse_variant(const std::string& name);
std::string to_string(Variant v);
const std::vector<Variant>& all_variants();

/// Trainable transform parameters. M has N - 2 columns, or N for gate_only.
template <class T>
struct PolyParams {
    PolyParams(std::size_t channels, std::size_t state, Variant variant = Variant::full);

    std::size_t channels;
    std::size_t state;
    Variant variant;
    Parameter<T> l_mat;  // [C, C], identity at init
    Parameter<T> m_mat;  // [C, N - 2] or [C, N], ones at init
    Parameter<T> p_l;    // [1]
    Parameter<T> p_m;    // [1]

    /// Parameters the variant actually uses.
    std::vector<Parameter<T>*> parameters();
};

/// out[..., :, n] = L h[..., :, n] for h laid out [..., C, N].
template <class T>
Var<T> lcm_apply(Var<T> h, Var<T> l_mat);

/// Hadamard product with M, broadcast over leading axes of h[..., C, K].
template <class T>
Var<T> mopa_apply(Var<T> h_high, Var<T> m_mat);

template <class T>
struct GateDecision {
    Var<T> g_l;
    Var<T> g_m;
};

template <class T>
struct GateOutput {
    Var<T> mix;
    GateDecision<T> decision;
};

/// Elementwise two-way softmax of (P_L lcm, P_M mopa) and the gated sum.
template <class T>
GateOutput<T> gate_combine(Var<T> lcm_high, Var<T> mopa_high, Var<T> p_l, Var<T> p_m);

/// Concat(lcm_full[..., 0:2], mix) along the order axis.
template <class T>
Var<T> order_combine(Var<T> lcm_full, Var<T> mix);

/// The transform on channel-major states h[..., D, C, N].
template <class T>
Var<T> transform_channel_major(Var<T> h, PolyParams<T>& p, Graph<T>& g);

/// The transform on h[..., C, D, N]; reshapes to channel-major and back.
template <class T>
Var<T> poly_state_transform(Var<T> h, PolyParams<T>& p, Graph<T>& g);

/// Same map as transform_channel_major, evaluated as a single node on
/// states laid out [..., C, ..., N] with the channel axis at `channel_axis`
/// and orders on the last axis, so no reshapes are materialized.
template <class T>
Var<T> fused_state_transform(Var<T> h, PolyParams<T>& p, Graph<T>& g, long channel_axis);

/// Mean gate weights per (channel, order) of the full variant over h[..., D, C, N].
/// Returns [C, N - 2] tensors of g_L and g_M.
template <class T>
std::pair<Tensor<T>, Tensor<T>> mean_gates(const Tensor<T>& h_channel_major, PolyParams<T>& p);

enum class Activation { identity, tanh };

/// Dense projection of multivariate-basis coefficients onto one value per
/// order: out_n = f(sum_i W[i, n] c_i + bias_n). Coefficients come as one
/// slice per order n = 0..max_deg, each laid out as
/// legendre::enumerate_multi_indices(C, n).
struct FullProjectionRef {
    std::size_t channels = 1;
    unsigned max_deg = 0;
    Tensor<double> w;     // [count_total, max_deg + 1]
    Tensor<double> bias;  // [max_deg + 1]
    Activation activation = Activation::identity;
};

/// A reference whose weights only connect each slice to its own order:
/// W[i, n(i)] = weights[i].
FullProjectionRef per_order_projection(std::size_t channels, unsigned max_deg, const std::vector<double>& weights,
                                       const std::vector<double>& bias, Activation activation);

/// Per-order weights that average each slice.
FullProjectionRef averaging_projection(std::size_t channels, unsigned max_deg);

std::vector<double> full_projection_reference(const std::vector<double>& coeffs, const FullProjectionRef& ref);

}  // namespace polyssm::polyops
