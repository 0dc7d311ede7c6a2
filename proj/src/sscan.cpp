#include "polyssm/sscan.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <thread>

#include "polyssm/ops.hpp"

namespace polyssm::sscan {

using polyssm::to_string;

ScanMode parse_scan_mode(const std::string& name) {
    if (name == "sequential" || name == "seq") return ScanMode::sequential;
    if (name == "parallel" || name == "par") return ScanMode::parallel;
    throw std::invalid_argument("unknown scan mode '" + name + "' (expected sequential or parallel)");
}

std::string to_string(ScanMode mode) {
    return mode == ScanMode::sequential ? "sequential" : "parallel";
}

namespace {

struct Layout {
    std::size_t outer;
    std::size_t steps;
    std::size_t inner;
};

Layout layout_of(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size()) throw DimensionError("scan: time axis out of range for " + to_string(shape));
    Layout l{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
    return l;
}

// h0 is [outer, inner] or null.
template <class T>
void sequential_kernel(const T* a, const T* b, const T* h0, T* h, const Layout& l) {
    for (std::size_t o = 0; o < l.outer; ++o) {
        const std::size_t base = o * l.steps * l.inner;
        for (std::size_t t = 0; t < l.steps; ++t) {
            const std::size_t row = base + t * l.inner;
            for (std::size_t i = 0; i < l.inner; ++i) {
                const T prev = t == 0 ? (h0 ? h0[o * l.inner + i] : T{0}) : h[row - l.inner + i];
                h[row + i] = a[row + i] * prev + b[row + i];
            }
        }
    }
}

template <class T>
void parallel_rows(const T* a, const T* b, const T* h0, T* h, const Layout& l, std::size_t o_begin,
                   std::size_t o_end) {
    std::size_t padded = 1;
    while (padded < l.steps) padded *= 2;
    const std::size_t w = l.inner;
    std::vector<T> A(padded * w), B(padded * w);
    for (std::size_t o = o_begin; o < o_end; ++o) {
        const std::size_t base = o * l.steps * w;
        std::copy(a + base, a + base + l.steps * w, A.begin());
        std::copy(b + base, b + base + l.steps * w, B.begin());
        std::fill(A.begin() + l.steps * w, A.end(), T{1});
        std::fill(B.begin() + l.steps * w, B.end(), T{0});

        // up-sweep: node k accumulates the total of its subtree
        for (std::size_t d = 1; d < padded; d *= 2) {
            for (std::size_t k = 2 * d - 1; k < padded; k += 2 * d) {
                T* ak = &A[k * w];
                T* bk = &B[k * w];
                const T* al = &A[(k - d) * w];
                const T* bl = &B[(k - d) * w];
                for (std::size_t i = 0; i < w; ++i) {
                    bk[i] = ak[i] * bl[i] + bk[i];
                    ak[i] = ak[i] * al[i];
                }
            }
        }
        // down-sweep: exclusive prefixes
        std::fill(A.begin() + (padded - 1) * w, A.begin() + padded * w, T{1});
        std::fill(B.begin() + (padded - 1) * w, B.begin() + padded * w, T{0});
        for (std::size_t d = padded / 2; d >= 1; d /= 2) {
            for (std::size_t k = 2 * d - 1; k < padded; k += 2 * d) {
                T* ak = &A[k * w];
                T* bk = &B[k * w];
                T* al = &A[(k - d) * w];
                T* bl = &B[(k - d) * w];
                for (std::size_t i = 0; i < w; ++i) {
                    const T ta = al[i], tb = bl[i];
                    al[i] = ak[i];
                    bl[i] = bk[i];
                    // left subtree total applied after the parent prefix
                    const T na = ta * ak[i];
                    const T nb = ta * bk[i] + tb;
                    ak[i] = na;
                    bk[i] = nb;
                }
            }
            if (d == 1) break;
        }
        for (std::size_t t = 0; t < l.steps; ++t) {
            const std::size_t row = base + t * w;
            for (std::size_t i = 0; i < w; ++i) {
                const T pa = a[row + i] * A[t * w + i];
                const T pb = a[row + i] * B[t * w + i] + b[row + i];
                const T start = h0 ? h0[o * w + i] : T{0};
                h[row + i] = pa * start + pb;
            }
        }
    }
}

template <class T>
void parallel_kernel(const T* a, const T* b, const T* h0, T* h, const Layout& l, unsigned threads) {
    const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(threads, l.outer));
    if (workers == 1) {
        parallel_rows(a, b, h0, h, l, 0, l.outer);
        return;
    }
    std::vector<std::thread> pool;
    const std::size_t chunk = (l.outer + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t begin = w * chunk;
        const std::size_t end = std::min(l.outer, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([=] { parallel_rows(a, b, h0, h, l, begin, end); });
    }
    for (auto& t : pool) t.join();
}

template <class T>
void run_scan(const T* a, const T* b, const T* h0, T* h, const Layout& l, ScanMode mode, unsigned threads) {
    if (l.steps == 0) return;
    if (mode == ScanMode::sequential) {
        sequential_kernel(a, b, h0, h, l);
    } else {
        parallel_kernel(a, b, h0, h, l, threads);
    }
}

template <class T>
void check_steps(const DiscretizedSteps<T>& steps, const Tensor<T>* h0) {
    if (steps.a_bar.shape() != steps.bx.shape()) {
        throw DimensionError("scan: decay shape " + to_string(steps.a_bar.shape()) +
                             " differs from drive shape " + to_string(steps.bx.shape()));
    }
    if (steps.a_bar.rank() == 0) throw DimensionError("scan: steps need a leading time axis");
    if (h0 != nullptr) {
        const Shape lanes(steps.a_bar.shape().begin() + 1, steps.a_bar.shape().end());
        if (h0->shape() != lanes) {
            throw DimensionError("scan: initial state " + to_string(h0->shape()) + " does not match lanes " +
                                 to_string(lanes));
        }
        if (!h0->all_finite()) throw NumericError("scan: non-finite initial state");
    }
}

template <class T>
T uniform(std::mt19937_64& rng, T bound) {
    std::uniform_real_distribution<double> u(-double(bound), double(bound));
    return T(u(rng));
}

}  // namespace

template <class T>
SelectiveParams<T>::SelectiveParams(std::size_t width_, std::size_t state_, std::mt19937_64& rng)
    : width(width_),
      state(state_),
      a_log("a_log", Tensor<T>({width_, state_})),
      w_delta("w_delta", Tensor<T>({width_, width_})),
      b_delta("b_delta", Tensor<T>({width_})),
      w_b("w_b", Tensor<T>({width_, state_})),
      w_c("w_c", Tensor<T>({width_, state_})),
      d_skip("d_skip", Tensor<T>({width_}, T{1})) {
    for (std::size_t d = 0; d < width; ++d)
        for (std::size_t n = 0; n < state; ++n) a_log.value[d * state + n] = T(std::log(double(n + 1)));
    const T bound = T(1.0 / std::sqrt(double(width)));
    for (auto& v : w_delta.value.storage()) v = uniform(rng, bound);
    for (auto& v : w_b.value.storage()) v = uniform(rng, bound);
    for (auto& v : w_c.value.storage()) v = uniform(rng, bound);
    // delta initialised log-uniformly in [1e-3, 1e-1] through the inverse softplus
    std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
    for (auto& v : b_delta.value.storage()) {
        const double dt = std::exp(u(rng));
        v = T(dt + std::log(-std::expm1(-dt)));
    }
}

template <class T>
std::vector<Parameter<T>*> SelectiveParams<T>::parameters() {
    return {&a_log, &w_delta, &b_delta, &w_b, &w_c, &d_skip};
}

template <class T>
Selection<T> selectivize(Var<T> x, Var<T> w_delta, Var<T> b_delta, Var<T> w_b, Var<T> w_c) {
    Selection<T> s;
    s.delta = ops::softplus(ops::add_trailing(ops::matmul(x, w_delta), b_delta));
    s.b = ops::matmul(x, w_b);
    s.c = ops::matmul(x, w_c);
    return s;
}

template <class T>
Var<T> discretize_decay(Var<T> delta, Var<T> a_log) {
    const Shape& ds = delta.shape();
    const Shape& as = a_log.shape();
    if (ds.empty() || as.size() != 2 || as[0] != ds.back()) {
        throw DimensionError("discretize_decay: delta " + to_string(ds) + " vs a_log " + to_string(as));
    }
    const std::size_t D = as[0], N = as[1];
    const std::size_t rows = delta.value().numel() / D;
    std::vector<T> A(D * N);
    for (std::size_t i = 0; i < D * N; ++i) A[i] = -std::exp(a_log.value()[i]);
    Shape os = ds;
    os.push_back(N);
    Tensor<T> out(os);
    const auto& dv = delta.value();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t d = 0; d < D; ++d) {
            const T dt = dv[r * D + d];
            if (!(dt > T{0})) throw NumericError("discretize: delta must be positive");
            for (std::size_t n = 0; n < N; ++n) out[(r * D + d) * N + n] = std::exp(dt * A[d * N + n]);
        }
    Graph<T>& g = delta.graph();
    Var<T> self(&g, g.size());
    return g.record("discretize_decay", std::move(out), {delta, a_log},
                    [delta, a_log, self, A, D, N, rows](Graph<T>& gr, const Tensor<T>& go) {
                        const auto& dv = delta.value();
                        const auto& y = self.value();
                        const bool nd = gr.requires_grad(delta), na = gr.requires_grad(a_log);
                        T* gd = nd ? gr.grad(delta).data().data() : nullptr;
                        T* ga = na ? gr.grad(a_log).data().data() : nullptr;
                        for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t d = 0; d < D; ++d) {
                                const T dt = dv[r * D + d];
                                T acc{0};
                                for (std::size_t n = 0; n < N; ++n) {
                                    const std::size_t k = (r * D + d) * N + n;
                                    const T s = go[k] * y[k] * A[d * N + n];
                                    acc += s;
                                    if (na) ga[d * N + n] += s * dt;
                                }
                                if (nd) gd[r * D + d] += acc;
                            }
                    });
}

template <class T>
Var<T> discretize_drive(Var<T> delta, Var<T> b, Var<T> x) {
    const Shape& ds = delta.shape();
    const Shape& bs = b.shape();
    if (ds.empty() || x.shape() != ds || bs.empty() ||
        !std::equal(ds.begin(), ds.end() - 1, bs.begin(), bs.end() - 1) || bs.size() != ds.size()) {
        throw DimensionError("discretize_drive: delta " + to_string(ds) + ", B " + to_string(bs) + ", x " +
                             to_string(x.shape()));
    }
    const std::size_t D = ds.back(), N = bs.back();
    const std::size_t rows = delta.value().numel() / D;
    Shape os = ds;
    os.push_back(N);
    Tensor<T> out(os);
    const auto& dv = delta.value();
    const auto& bv = b.value();
    const auto& xv = x.value();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t d = 0; d < D; ++d) {
            const T dx = dv[r * D + d] * xv[r * D + d];
            for (std::size_t n = 0; n < N; ++n) out[(r * D + d) * N + n] = dx * bv[r * N + n];
        }
    return delta.graph().record(
        "discretize_drive", std::move(out), {delta, b, x}, [delta, b, x, D, N, rows](Graph<T>& g, const Tensor<T>& go) {
            const auto& dv = delta.value();
            const auto& bv = b.value();
            const auto& xv = x.value();
            const bool nd = g.requires_grad(delta), nb = g.requires_grad(b), nx = g.requires_grad(x);
            T* gd = nd ? g.grad(delta).data().data() : nullptr;
            T* gb = nb ? g.grad(b).data().data() : nullptr;
            T* gx = nx ? g.grad(x).data().data() : nullptr;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t d = 0; d < D; ++d) {
                    const T dt = dv[r * D + d];
                    const T xd = xv[r * D + d];
                    T gb_dot{0};
                    for (std::size_t n = 0; n < N; ++n) {
                        const T gk = go[(r * D + d) * N + n];
                        gb_dot += gk * bv[r * N + n];
                        if (nb) gb[r * N + n] += gk * dt * xd;
                    }
                    if (nd) gd[r * D + d] += gb_dot * xd;
                    if (nx) gx[r * D + d] += gb_dot * dt;
                }
        });
}

template <class T>
DiscretizedSteps<T> discretize(const Tensor<T>& delta, const Tensor<T>& a_log, const Tensor<T>& b,
                               const Tensor<T>& x) {
    Graph<T> g(false);
    Var<T> dv = g.input(delta);
    DiscretizedSteps<T> out;
    out.a_bar = discretize_decay(dv, g.input(a_log)).value();
    out.bx = discretize_drive(dv, g.input(b), g.input(x)).value();
    return out;
}

template <class T>
Tensor<T> scan_sequential(const DiscretizedSteps<T>& steps, const Tensor<T>* h0) {
    check_steps(steps, h0);
    Tensor<T> h(steps.a_bar.shape());
    const Layout l = layout_of(steps.a_bar.shape(), 0);
    sequential_kernel(steps.a_bar.data().data(), steps.bx.data().data(), h0 ? h0->data().data() : nullptr,
                      h.data().data(), l);
    return h;
}

template <class T>
Tensor<T> scan_parallel(const DiscretizedSteps<T>& steps, const Tensor<T>* h0, unsigned threads) {
    check_steps(steps, h0);
    Tensor<T> h(steps.a_bar.shape());
    const Layout l = layout_of(steps.a_bar.shape(), 0);
    if (l.steps > 0) {
        parallel_kernel(steps.a_bar.data().data(), steps.bx.data().data(), h0 ? h0->data().data() : nullptr,
                        h.data().data(), l, threads);
    }
    return h;
}

template <class T>
Tensor<T> scan(const Tensor<T>& a_bar, const Tensor<T>& bx, std::size_t time_axis, ScanMode mode,
               unsigned threads) {
    if (a_bar.shape() != bx.shape()) {
        throw DimensionError("scan: decay " + to_string(a_bar.shape()) + " vs drive " + to_string(bx.shape()));
    }
    Tensor<T> h(a_bar.shape());
    const Layout l = layout_of(a_bar.shape(), time_axis);
    run_scan(a_bar.data().data(), bx.data().data(), static_cast<const T*>(nullptr), h.data().data(), l, mode,
             threads);
    return h;
}

template <class T>
Var<T> selective_scan(Var<T> a_bar, Var<T> bx, long time_axis, ScanMode mode, unsigned threads) {
    const std::size_t axis = normalize_axis(time_axis, a_bar.value().rank());
    Tensor<T> h = scan(a_bar.value(), bx.value(), axis, mode, threads);
    Graph<T>& g = a_bar.graph();
    Var<T> self(&g, g.size());
    return g.record(
        "selective_scan", std::move(h), {a_bar, bx}, [a_bar, bx, self, axis, mode, threads](Graph<T>& gr, const Tensor<T>& go) {
            const Layout l = layout_of(go.shape(), axis);
            const auto& av = a_bar.value();
            const auto& hv = self.value();
            // adjoint: lam_t = go_t + a_{t+1} lam_{t+1}, run as a forward scan in reversed time
            Tensor<T> ra(go.shape()), rb(go.shape());
            for (std::size_t o = 0; o < l.outer; ++o)
                for (std::size_t s = 0; s < l.steps; ++s) {
                    const std::size_t t = l.steps - 1 - s;
                    const std::size_t dst = (o * l.steps + s) * l.inner;
                    const std::size_t src = (o * l.steps + t) * l.inner;
                    for (std::size_t i = 0; i < l.inner; ++i) {
                        ra[dst + i] = s == 0 ? T{0} : av[src + l.inner + i];
                        rb[dst + i] = go[src + i];
                    }
                }
            Tensor<T> rlam(go.shape());
            run_scan(ra.data().data(), rb.data().data(), static_cast<const T*>(nullptr), rlam.data().data(), l, mode,
                     threads);
            const bool na = gr.requires_grad(a_bar), nb = gr.requires_grad(bx);
            T* ga = na ? gr.grad(a_bar).data().data() : nullptr;
            T* gb = nb ? gr.grad(bx).data().data() : nullptr;
            for (std::size_t o = 0; o < l.outer; ++o)
                for (std::size_t t = 0; t < l.steps; ++t) {
                    const std::size_t s = l.steps - 1 - t;
                    const std::size_t at = (o * l.steps + t) * l.inner;
                    const std::size_t rs = (o * l.steps + s) * l.inner;
                    for (std::size_t i = 0; i < l.inner; ++i) {
                        const T lam = rlam[rs + i];
                        if (nb) gb[at + i] += lam;
                        if (na && t > 0) ga[at + i] += lam * hv[at - l.inner + i];
                    }
                }
        });
}

template <class T>
Var<T> readout(Var<T> h, Var<T> c, Var<T> x, Var<T> d_skip) {
    const Shape& hs = h.shape();
    const Shape& cs = c.shape();
    const Shape& xs = x.shape();
    if (hs.size() < 2 || xs.size() + 1 != hs.size() || !std::equal(xs.begin(), xs.end(), hs.begin()) ||
        cs.size() + 1 != hs.size() || !std::equal(cs.begin(), cs.end() - 1, hs.begin()) || cs.back() != hs.back() ||
        d_skip.shape() != Shape{xs.back()}) {
        throw DimensionError("readout: h " + to_string(hs) + ", C " + to_string(cs) + ", x " + to_string(xs) +
                             ", D " + to_string(d_skip.shape()));
    }
    const std::size_t D = xs.back(), N = hs.back();
    const std::size_t rows = x.value().numel() / D;
    Tensor<T> y(xs);
    const auto& hv = h.value();
    const auto& cv = c.value();
    const auto& xv = x.value();
    const auto& dv = d_skip.value();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t d = 0; d < D; ++d) {
            T acc{0};
            const T* hr = hv.data().data() + (r * D + d) * N;
            const T* cr = cv.data().data() + r * N;
            for (std::size_t n = 0; n < N; ++n) acc += cr[n] * hr[n];
            y[r * D + d] = acc + dv[d] * xv[r * D + d];
        }
    return h.graph().record(
        "readout", std::move(y), {h, c, x, d_skip}, [h, c, x, d_skip, D, N, rows](Graph<T>& g, const Tensor<T>& go) {
            const auto& hv = h.value();
            const auto& cv = c.value();
            const auto& xv = x.value();
            const auto& dv = d_skip.value();
            const bool nh = g.requires_grad(h), nc = g.requires_grad(c), nx = g.requires_grad(x),
                       nd = g.requires_grad(d_skip);
            T* gh = nh ? g.grad(h).data().data() : nullptr;
            T* gc = nc ? g.grad(c).data().data() : nullptr;
            T* gx = nx ? g.grad(x).data().data() : nullptr;
            T* gd = nd ? g.grad(d_skip).data().data() : nullptr;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t d = 0; d < D; ++d) {
                    const T gy = go[r * D + d];
                    const std::size_t hb = (r * D + d) * N;
                    for (std::size_t n = 0; n < N; ++n) {
                        if (nh) gh[hb + n] += gy * cv[r * N + n];
                        if (nc) gc[r * N + n] += gy * hv[hb + n];
                    }
                    if (nx) gx[r * D + d] += gy * dv[d];
                    if (nd) gd[d] += gy * xv[r * D + d];
                }
        });
}

#define POLYSSM_INSTANTIATE_SSCAN(T)                                                                   \
    template struct SelectiveParams<T>;                                                                \
    template Selection<T> selectivize(Var<T>, Var<T>, Var<T>, Var<T>, Var<T>);                         \
    template Var<T> discretize_decay(Var<T>, Var<T>);                                                  \
    template Var<T> discretize_drive(Var<T>, Var<T>, Var<T>);                                          \
    template DiscretizedSteps<T> discretize(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                            const Tensor<T>&);                                         \
    template Tensor<T> scan_sequential(const DiscretizedSteps<T>&, const Tensor<T>*);                  \
    template Tensor<T> scan_parallel(const DiscretizedSteps<T>&, const Tensor<T>*, unsigned);          \
    template Tensor<T> scan(const Tensor<T>&, const Tensor<T>&, std::size_t, ScanMode, unsigned);      \
    template Var<T> selective_scan(Var<T>, Var<T>, long, ScanMode, unsigned);                          \
    template Var<T> readout(Var<T>, Var<T>, Var<T>, Var<T>);

POLYSSM_INSTANTIATE_SSCAN(float)
POLYSSM_INSTANTIATE_SSCAN(double)

}  // namespace polyssm::sscan
