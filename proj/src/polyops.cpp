#include "polyssm/polyops.hpp"

#include <cmath>
#include <stdexcept>

#include "polyssm/legendre.hpp"
#include "polyssm/ops.hpp"

namespace polyssm::polyops {

using polyssm::to_string;

Variant parse_variant(const std::string& name) {
    for (Variant v : all_variants())
        if (to_string(v) == name) return v;
    throw std::invalid_argument("unknown ablation variant '" + name +
                                "' (expected full, gate_only, no_lcm, no_mopa or vanilla)");
}

std::string to_string(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::gate_only: return "gate_only";
        case Variant::no_lcm: return "no_lcm";
        case Variant::no_mopa: return "no_mopa";
        case Variant::vanilla: return "vanilla";
    }
    return "full";
}

const std::vector<Variant>& all_variants() {
    static const std::vector<Variant> v{Variant::full, Variant::gate_only, Variant::no_lcm, Variant::no_mopa,
                                        Variant::vanilla};
    return v;
}

namespace {

template <class T>
Tensor<T> identity(std::size_t n) {
    Tensor<T> t({n, n});
    for (std::size_t i = 0; i < n; ++i) t[i * n + i] = T{1};
    return t;
}

}  // namespace

template <class T>
PolyParams<T>::PolyParams(std::size_t channels_, std::size_t state_, Variant variant_)
    : channels(channels_),
      state(state_),
      variant(variant_),
      l_mat("l_mat", identity<T>(channels_)),
      m_mat("m_mat", Tensor<T>({channels_, variant_ == Variant::gate_only ? state_ : state_ - 2}, T{1})),
      p_l("p_l", Tensor<T>({1})),
      p_m("p_m", Tensor<T>({1})) {
    if (channels == 0) throw std::invalid_argument("PolyParams: at least one channel required");
    if (state < 3) {
        throw std::invalid_argument("PolyParams: state size " + std::to_string(state) +
                                    " < 3; order combining needs orders 0, 1 and at least one higher order");
    }
}

template <class T>
std::vector<Parameter<T>*> PolyParams<T>::parameters() {
    switch (variant) {
        case Variant::full:
        case Variant::gate_only: return {&l_mat, &m_mat, &p_l, &p_m};
        case Variant::no_lcm: return {&m_mat};
        case Variant::no_mopa: return {&l_mat};
        case Variant::vanilla: return {};
    }
    return {};
}

template <class T>
Var<T> lcm_apply(Var<T> h, Var<T> l_mat) {
    const Shape& hs = h.shape();
    const Shape& ls = l_mat.shape();
    if (hs.size() < 2 || ls.size() != 2 || ls[0] != ls[1] || ls[1] != hs[hs.size() - 2]) {
        throw DimensionError("lcm_apply: L " + to_string(ls) + " does not match channel axis of h " + to_string(hs));
    }
    return ops::matmul(l_mat, h);
}

template <class T>
Var<T> mopa_apply(Var<T> h_high, Var<T> m_mat) {
    const Shape& hs = h_high.shape();
    const Shape& ms = m_mat.shape();
    if (hs.size() < 2 || ms.size() != 2 || ms[0] != hs[hs.size() - 2] || ms[1] != hs.back()) {
        throw DimensionError("mopa_apply: M " + to_string(ms) + " does not match state slice " + to_string(hs));
    }
    return ops::mul_trailing(h_high, m_mat);
}

template <class T>
GateOutput<T> gate_combine(Var<T> lcm_high, Var<T> mopa_high, Var<T> p_l, Var<T> p_m) {
    if (lcm_high.shape() != mopa_high.shape()) {
        throw DimensionError("gate_combine: LCM slice " + to_string(lcm_high.shape()) + " vs MOPA slice " +
                             to_string(mopa_high.shape()));
    }
    // softmax over a pair reduces to the logistic of the logit difference
    Var<T> zl = ops::scale_by(lcm_high, p_l);
    Var<T> zm = ops::scale_by(mopa_high, p_m);
    GateOutput<T> out;
    out.decision.g_l = ops::sigmoid(ops::sub(zl, zm));
    out.decision.g_m = ops::sigmoid(ops::sub(zm, zl));
    out.mix = ops::add(mopa_high, ops::mul(out.decision.g_l, ops::sub(lcm_high, mopa_high)));
    return out;
}

template <class T>
Var<T> order_combine(Var<T> lcm_full, Var<T> mix) {
    const Shape& ls = lcm_full.shape();
    if (ls.empty() || ls.back() < 3) {
        throw std::invalid_argument("order_combine: state size must be at least 3, got shape " + to_string(ls));
    }
    Shape expect = ls;
    expect.back() -= 2;
    if (mix.shape() != expect) {
        throw DimensionError("order_combine: mix " + to_string(mix.shape()) + " does not match high orders " +
                             to_string(expect));
    }
    return ops::concat<T>({ops::slice(lcm_full, -1, 0, 2), mix}, -1);
}

template <class T>
Var<T> transform_channel_major(Var<T> h, PolyParams<T>& p, Graph<T>& g) {
    const Shape& hs = h.shape();
    if (hs.size() < 2 || hs.back() != p.state || hs[hs.size() - 2] != p.channels) {
        throw DimensionError("poly transform: state " + to_string(hs) + " vs C = " + std::to_string(p.channels) +
                             ", N = " + std::to_string(p.state));
    }
    const std::size_t N = p.state;
    switch (p.variant) {
        case Variant::vanilla: return h;
        case Variant::no_mopa: return lcm_apply(h, g.param(p.l_mat));
        case Variant::no_lcm: {
            Var<T> high = mopa_apply(ops::slice(h, -1, 2, N), g.param(p.m_mat));
            return ops::concat<T>({ops::slice(h, -1, 0, 2), high}, -1);
        }
        case Variant::gate_only: {
            Var<T> lcm = lcm_apply(h, g.param(p.l_mat));
            Var<T> mopa = mopa_apply(h, g.param(p.m_mat));
            return gate_combine(lcm, mopa, g.param(p.p_l), g.param(p.p_m)).mix;
        }
        case Variant::full: break;
    }
    Var<T> lcm = lcm_apply(h, g.param(p.l_mat));
    Var<T> mopa = mopa_apply(ops::slice(h, -1, 2, N), g.param(p.m_mat));
    Var<T> mix = gate_combine(ops::slice(lcm, -1, 2, N), mopa, g.param(p.p_l), g.param(p.p_m)).mix;
    return order_combine(lcm, mix);
}

template <class T>
Var<T> poly_state_transform(Var<T> h, PolyParams<T>& p, Graph<T>& g) {
    const std::size_t r = h.shape().size();
    if (r < 3) throw DimensionError("poly_state_transform: expected [..., C, D, N], got " + to_string(h.shape()));
    std::vector<std::size_t> perm(r);
    for (std::size_t i = 0; i < r; ++i) perm[i] = i;
    std::swap(perm[r - 3], perm[r - 2]);
    Var<T> cm = ops::permute(h, perm);
    return ops::permute(transform_channel_major(cm, p, g), perm);
}

namespace {

template <class T>
T logistic(T z) {
    if (z >= T{0}) return T{1} / (T{1} + std::exp(-z));
    const T e = std::exp(z);
    return e / (T{1} + e);
}

// out[c, i] = sum_c' L[c, c'] h[c', i] for one outer slice.
template <class T>
void lcm_rows(const T* h, const T* l, T* out, std::size_t C, std::size_t inner) {
    std::fill(out, out + C * inner, T{0});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t k = 0; k < C; ++k) {
            const T w = l[c * C + k];
            const T* src = h + k * inner;
            T* dst = out + c * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += w * src[i];
        }
}

}  // namespace

template <class T>
Var<T> fused_state_transform(Var<T> h, PolyParams<T>& p, Graph<T>& g, long channel_axis) {
    const Shape& hs = h.shape();
    const std::size_t ca = normalize_axis(channel_axis, hs.size());
    if (ca + 1 >= hs.size() || hs[ca] != p.channels || hs.back() != p.state) {
        throw DimensionError("fused_state_transform: state " + to_string(hs) + " with channel axis " +
                             std::to_string(ca) + " vs C = " + std::to_string(p.channels) +
                             ", N = " + std::to_string(p.state));
    }
    const Variant variant = p.variant;
    if (variant == Variant::vanilla) return h;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < ca; ++i) outer *= hs[i];
    for (std::size_t i = ca + 1; i < hs.size(); ++i) inner *= hs[i];
    const std::size_t C = p.channels, N = p.state;
    const bool uses_l = variant != Variant::no_lcm;
    const bool uses_m = variant != Variant::no_mopa;
    const bool gated = variant == Variant::full || variant == Variant::gate_only;
    const std::size_t low = variant == Variant::gate_only ? 0 : 2;  // orders below `low` bypass MOPA and gate
    const std::size_t mcols = p.m_mat.value.shape()[1];

    std::vector<Var<T>> inputs{h};
    Var<T> lv, mv, plv, pmv;
    if (uses_l) inputs.push_back(lv = g.param(p.l_mat));
    if (uses_m) inputs.push_back(mv = g.param(p.m_mat));
    if (gated) {
        inputs.push_back(plv = g.param(p.p_l));
        inputs.push_back(pmv = g.param(p.p_m));
    }
    const T* hv = h.value().data().data();
    const T* L = uses_l ? lv.value().data().data() : nullptr;
    const T* M = uses_m ? mv.value().data().data() : nullptr;
    const T pl = gated ? plv.value()[0] : T{0};
    const T pm = gated ? pmv.value()[0] : T{0};

    Tensor<T> out(hs);
    T* ov = out.data().data();
    const std::size_t slab = C * inner;
    for (std::size_t o = 0; o < outer; ++o) {
        const T* hs_ = hv + o * slab;
        T* os_ = ov + o * slab;
        if (uses_l) {
            lcm_rows(hs_, L, os_, C, inner);
        } else {
            std::copy(hs_, hs_ + slab, os_);
        }
        if (!uses_m) continue;
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t n = i % N;
                if (n < low) continue;
                const std::size_t k = c * inner + i;
                const T mopa = M[c * mcols + (n - low)] * hs_[k];
                if (!gated) {
                    os_[k] = mopa;
                    continue;
                }
                const T lcm = os_[k];
                const T gl = logistic(pl * lcm - pm * mopa);
                os_[k] = mopa + gl * (lcm - mopa);
            }
    }
    return g.record(
        "poly_transform", std::move(out), std::span<const Var<T>>(inputs),
        [h, lv, mv, plv, pmv, outer, inner, C, N, low, mcols, uses_l, uses_m, gated](Graph<T>& gr, const Tensor<T>& go) {
            const T* hv = h.value().data().data();
            const T* L = uses_l ? lv.value().data().data() : nullptr;
            const T* M = uses_m ? mv.value().data().data() : nullptr;
            const T pl = gated ? plv.value()[0] : T{0};
            const T pm = gated ? pmv.value()[0] : T{0};
            T* gh = gr.requires_grad(h) ? gr.grad(h).data().data() : nullptr;
            T* gL = uses_l && gr.requires_grad(lv) ? gr.grad(lv).data().data() : nullptr;
            T* gM = uses_m && gr.requires_grad(mv) ? gr.grad(mv).data().data() : nullptr;
            double gpl = 0.0, gpm = 0.0;
            const std::size_t slab = C * inner;
            std::vector<T> lcm(slab), dlcm(slab);
            for (std::size_t o = 0; o < outer; ++o) {
                const T* hs_ = hv + o * slab;
                const T* gos = go.data().data() + o * slab;
                T* ghs = gh ? gh + o * slab : nullptr;
                if (uses_l) lcm_rows(hs_, L, lcm.data(), C, inner);
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < inner; ++i) {
                        const std::size_t k = c * inner + i;
                        const std::size_t n = i % N;
                        T dl = gos[k];
                        if (uses_m && n >= low) {
                            const std::size_t mi = c * mcols + (n - low);
                            T dm;
                            if (gated) {
                                const T mopa = M[mi] * hs_[k];
                                const T diff = lcm[k] - mopa;
                                const T gl = logistic(pl * lcm[k] - pm * mopa);
                                const T gp = gl * (T{1} - gl);
                                dl = gos[k] * (gl + diff * gp * pl);
                                dm = gos[k] * (T{1} - gl - diff * gp * pm);
                                gpl += double(gos[k] * diff * gp * lcm[k]);
                                gpm -= double(gos[k] * diff * gp * mopa);
                            } else {
                                dm = gos[k];
                                dl = T{0};
                            }
                            if (gM) gM[mi] += dm * hs_[k];
                            if (ghs) ghs[k] += dm * M[mi];
                        }
                        dlcm[k] = dl;
                    }
                if (uses_l) {
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t kk = 0; kk < C; ++kk) {
                            const T w = L[c * C + kk];
                            const T* src = hs_ + kk * inner;
                            const T* d = dlcm.data() + c * inner;
                            T acc{0};
                            for (std::size_t i = 0; i < inner; ++i) acc += d[i] * src[i];
                            if (gL) gL[c * C + kk] += acc;
                            if (ghs) {
                                T* dst = ghs + kk * inner;
                                for (std::size_t i = 0; i < inner; ++i) dst[i] += w * d[i];
                            }
                        }
                } else if (ghs) {
                    for (std::size_t k = 0; k < slab; ++k) ghs[k] += dlcm[k];
                }
            }
            if (gated) {
                if (gr.requires_grad(plv)) gr.grad(plv)[0] += T(gpl);
                if (gr.requires_grad(pmv)) gr.grad(pmv)[0] += T(gpm);
            }
        });
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> mean_gates(const Tensor<T>& h, PolyParams<T>& p) {
    const std::size_t N = p.state, C = p.channels;
    if (h.rank() < 2 || h.shape().back() != N || h.shape()[h.rank() - 2] != C) {
        throw DimensionError("mean_gates: state " + to_string(h.shape()));
    }
    if (p.variant != Variant::full) throw std::invalid_argument("mean_gates: only defined for the full variant");
    Graph<T> g(false);
    Var<T> hv = g.input(h);
    Var<T> lcm = lcm_apply(hv, g.param(p.l_mat));
    Var<T> mopa = mopa_apply(ops::slice(hv, -1, 2, N), g.param(p.m_mat));
    GateOutput<T> out = gate_combine(ops::slice(lcm, -1, 2, N), mopa, g.param(p.p_l), g.param(p.p_m));
    const std::size_t K = N - 2;
    const std::size_t rows = h.numel() / (C * N);
    Tensor<T> ml({C, K}), mm({C, K});
    const auto& gl = out.decision.g_l.value();
    const auto& gm = out.decision.g_m.value();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < C * K; ++i) {
            ml[i] += gl[r * C * K + i];
            mm[i] += gm[r * C * K + i];
        }
    for (std::size_t i = 0; i < C * K; ++i) {
        ml[i] /= T(rows);
        mm[i] /= T(rows);
    }
    return {ml, mm};
}

namespace {

// Coefficients come in one slice per order n, each holding the
// count_degree(C, n) multi-indices of total degree at most n.
std::vector<std::size_t> slice_orders(std::size_t channels, unsigned max_deg) {
    std::vector<std::size_t> order;
    for (unsigned d = 0; d <= max_deg; ++d) order.insert(order.end(), legendre::count_degree(channels, d), d);
    return order;
}

}  // namespace

FullProjectionRef per_order_projection(std::size_t channels, unsigned max_deg, const std::vector<double>& weights,
                                       const std::vector<double>& bias, Activation activation) {
    const std::uint64_t total = legendre::count_total(channels, max_deg);
    if (weights.size() != total) {
        throw DimensionError("per_order_projection: " + std::to_string(weights.size()) +
                             " weights for count_total = " + std::to_string(total));
    }
    if (bias.size() != max_deg + 1) {
        throw DimensionError("per_order_projection: bias length must be " + std::to_string(max_deg + 1));
    }
    FullProjectionRef ref;
    ref.channels = channels;
    ref.max_deg = max_deg;
    ref.activation = activation;
    ref.w = Tensor<double>({total, std::size_t(max_deg) + 1});
    ref.bias = Tensor<double>({std::size_t(max_deg) + 1}, bias);
    const auto order = slice_orders(channels, max_deg);
    for (std::size_t i = 0; i < order.size(); ++i) ref.w[i * (max_deg + 1) + order[i]] = weights[i];
    return ref;
}

FullProjectionRef averaging_projection(std::size_t channels, unsigned max_deg) {
    const auto order = slice_orders(channels, max_deg);
    std::vector<double> w(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) w[i] = 1.0 / double(legendre::count_degree(channels, order[i]));
    return per_order_projection(channels, max_deg, w, std::vector<double>(max_deg + 1, 0.0), Activation::identity);
}

std::vector<double> full_projection_reference(const std::vector<double>& coeffs, const FullProjectionRef& ref) {
    const std::uint64_t total = legendre::count_total(ref.channels, ref.max_deg);
    if (coeffs.size() != total) {
        throw DimensionError("full_projection_reference: expected count_total(" + std::to_string(ref.channels) + ", " +
                             std::to_string(ref.max_deg) + ") = " + std::to_string(total) + " coefficients, got " +
                             std::to_string(coeffs.size()));
    }
    const std::size_t out_dim = std::size_t(ref.max_deg) + 1;
    if (ref.w.shape() != Shape{total, out_dim} || ref.bias.shape() != Shape{out_dim}) {
        throw DimensionError("full_projection_reference: W " + to_string(ref.w.shape()) + ", bias " +
                             to_string(ref.bias.shape()));
    }
    std::vector<double> out(out_dim);
    for (std::size_t n = 0; n < out_dim; ++n) {
        double acc = ref.bias[n];
        for (std::size_t i = 0; i < total; ++i) acc += ref.w[i * out_dim + n] * coeffs[i];
        out[n] = ref.activation == Activation::tanh ? std::tanh(acc) : acc;
    }
    return out;
}

#define POLYSSM_INSTANTIATE_POLYOPS(T)                                                         \
    template struct PolyParams<T>;                                                             \
    template Var<T> lcm_apply(Var<T>, Var<T>);                                                 \
    template Var<T> mopa_apply(Var<T>, Var<T>);                                                \
    template GateOutput<T> gate_combine(Var<T>, Var<T>, Var<T>, Var<T>);                       \
    template Var<T> order_combine(Var<T>, Var<T>);                                             \
    template Var<T> transform_channel_major(Var<T>, PolyParams<T>&, Graph<T>&);                \
    template Var<T> poly_state_transform(Var<T>, PolyParams<T>&, Graph<T>&);                   \
    template Var<T> fused_state_transform(Var<T>, PolyParams<T>&, Graph<T>&, long);            \
    template std::pair<Tensor<T>, Tensor<T>> mean_gates(const Tensor<T>&, PolyParams<T>&);

POLYSSM_INSTANTIATE_POLYOPS(float)
POLYSSM_INSTANTIATE_POLYOPS(double)

}  // namespace polyssm::polyops
