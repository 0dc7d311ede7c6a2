#include "polyssm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace polyssm {

namespace {

struct AxisSplit {
    std::size_t outer;
    std::size_t extent;
    std::size_t inner;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

template <class T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
    auto d = dst.data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

template <class T>
void require_same(const char* op, const Var<T>& a, const Var<T>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " +
                             to_string(b.shape()) + " differ");
    }
}

template <class T>
std::size_t trailing_extent(const char* op, const Var<T>& x, const Var<T>& b) {
    const Shape& xs = x.shape();
    const Shape& bs = b.shape();
    if (bs.size() > xs.size() || !std::equal(bs.begin(), bs.end(), xs.end() - bs.size())) {
        throw DimensionError(std::string(op) + ": shape " + to_string(bs) +
                             " is not a trailing block of " + to_string(xs));
    }
    return numel(bs);
}

// The node a record() call is about to create.
template <class T>
Var<T> next_node(Graph<T>& g) {
    return Var<T>(&g, g.size());
}

// C[m x n] += A[m x k] * B[k x n]
template <class T>
void mm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// dA[m x k] += G[m x n] * B[k x n]^T
template <class T>
void mm_acc_bt(const T* g, const T* b, T* da, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* grow = g + i * n;
        T* darow = da + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T* brow = b + p * n;
            T acc{0};
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            darow[p] += acc;
        }
    }
}

// dB[k x n] += A[m x k]^T * G[m x n]
template <class T>
void mm_acc_at(const T* a, const T* g, T* db, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* grow = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            T* dbrow = db + p * n;
            for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
        }
    }
}

template <class T>
T stable_sigmoid(T x) {
    if (x >= 0) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <class T, class F, class D>
Var<T> unary(const char* name, Var<T> x, F forward, D derivative) {
    const Tensor<T>& xv = x.value();
    Tensor<T> out(xv.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = forward(xv[i]);
    Graph<T>& g = x.graph();
    Var<T> self = next_node(g);
    return g.record(name, std::move(out), {x}, [x, self, derivative](Graph<T>& gr, const Tensor<T>& go) {
        const Tensor<T>& xv = x.value();
        const Tensor<T>& yv = self.value();
        Tensor<T>& gx = gr.grad(x);
        for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += go[i] * derivative(xv[i], yv[i]);
    });
}

}  // namespace

template <class T>
Tensor<T> permuted(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
    const std::size_t r = x.rank();
    if (perm.size() != r) {
        throw DimensionError("permute: permutation of length " + std::to_string(perm.size()) +
                             " for shape " + to_string(x.shape()));
    }
    std::vector<bool> seen(r, false);
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) {
        if (perm[i] >= r || seen[perm[i]]) throw DimensionError("permute: invalid permutation");
        seen[perm[i]] = true;
        out_shape[i] = x.shape()[perm[i]];
    }
    std::vector<std::size_t> in_strides(r, 1);
    for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.shape()[i];
    std::vector<std::size_t> strides(r);
    for (std::size_t i = 0; i < r; ++i) strides[i] = in_strides[perm[i]];

    Tensor<T> out(out_shape);
    if (out.numel() == 0) return out;
    std::vector<std::size_t> idx(r, 0);
    std::size_t src = 0;
    const std::size_t last = r == 0 ? 0 : r - 1;
    const std::size_t inner = r == 0 ? 1 : out_shape[last];
    const std::size_t inner_stride = r == 0 ? 0 : strides[last];
    for (std::size_t o = 0; o < out.numel(); o += inner) {
        for (std::size_t j = 0; j < inner; ++j) out[o + j] = x[src + j * inner_stride];
        // advance the odometer over all but the last axis
        for (std::size_t ax = last; ax-- > 0;) {
            ++idx[ax];
            src += strides[ax];
            if (idx[ax] < out_shape[ax]) break;
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    return out;
}

namespace ops {

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    require_same("add", a, b);
    Tensor<T> out(a.shape());
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
    return a.graph().record("add", std::move(out), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& go) {
        if (g.requires_grad(a)) accumulate(g.grad(a), go);
        if (g.requires_grad(b)) accumulate(g.grad(b), go);
    });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
    require_same("sub", a, b);
    Tensor<T> out(a.shape());
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] - bv[i];
    return a.graph().record("sub", std::move(out), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& go) {
        if (g.requires_grad(a)) accumulate(g.grad(a), go);
        if (g.requires_grad(b)) {
            Tensor<T>& gb = g.grad(b);
            for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] -= go[i];
        }
    });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    require_same("mul", a, b);
    Tensor<T> out(a.shape());
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
    return a.graph().record("mul", std::move(out), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& go) {
        const auto& av = a.value();
        const auto& bv = b.value();
        if (g.requires_grad(a)) {
            Tensor<T>& ga = g.grad(a);
            for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += go[i] * bv[i];
        }
        if (g.requires_grad(b)) {
            Tensor<T>& gb = g.grad(b);
            for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += go[i] * av[i];
        }
    });
}

template <class T>
Var<T> add_trailing(Var<T> x, Var<T> b) {
    const std::size_t inner = trailing_extent("add_trailing", x, b);
    const auto& xv = x.value();
    const auto& bv = b.value();
    Tensor<T> out(xv.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xv[i] + bv[i % inner];
    return x.graph().record("add_trailing", std::move(out), {x, b},
                            [x, b, inner](Graph<T>& g, const Tensor<T>& go) {
                                if (g.requires_grad(x)) accumulate(g.grad(x), go);
                                if (g.requires_grad(b)) {
                                    Tensor<T>& gb = g.grad(b);
                                    for (std::size_t i = 0; i < go.numel(); ++i) gb[i % inner] += go[i];
                                }
                            });
}

template <class T>
Var<T> mul_trailing(Var<T> x, Var<T> b) {
    const std::size_t inner = trailing_extent("mul_trailing", x, b);
    const auto& xv = x.value();
    const auto& bv = b.value();
    Tensor<T> out(xv.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xv[i] * bv[i % inner];
    return x.graph().record("mul_trailing", std::move(out), {x, b},
                            [x, b, inner](Graph<T>& g, const Tensor<T>& go) {
                                const auto& xv = x.value();
                                const auto& bv = b.value();
                                if (g.requires_grad(x)) {
                                    Tensor<T>& gx = g.grad(x);
                                    for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i] * bv[i % inner];
                                }
                                if (g.requires_grad(b)) {
                                    Tensor<T>& gb = g.grad(b);
                                    for (std::size_t i = 0; i < go.numel(); ++i) gb[i % inner] += go[i] * xv[i];
                                }
                            });
}

template <class T>
Var<T> scale_by(Var<T> x, Var<T> s) {
    if (s.value().numel() != 1) {
        throw DimensionError("scale_by: scale must have one element, got " + to_string(s.shape()));
    }
    const T sv = s.value()[0];
    const auto& xv = x.value();
    Tensor<T> out(xv.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = sv * xv[i];
    return x.graph().record("scale_by", std::move(out), {x, s}, [x, s](Graph<T>& g, const Tensor<T>& go) {
        const auto& xv = x.value();
        if (g.requires_grad(x)) {
            const T sv = s.value()[0];
            Tensor<T>& gx = g.grad(x);
            for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i] * sv;
        }
        if (g.requires_grad(s)) {
            T acc{0};
            for (std::size_t i = 0; i < go.numel(); ++i) acc += go[i] * xv[i];
            g.grad(s)[0] += acc;
        }
    });
}

template <class T>
Var<T> scale(Var<T> x, T c) {
    return unary<T>("scale", x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <class T>
Var<T> exp(Var<T> x) {
    return unary<T>("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Var<T> square(Var<T> x) {
    return unary<T>("square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
Var<T> tanh(Var<T> x) {
    return unary<T>("tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var<T> sigmoid(Var<T> x) {
    return unary<T>("sigmoid", x, [](T v) { return stable_sigmoid(v); },
                    [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> softplus(Var<T> x) {
    return unary<T>(
        "softplus", x, [](T v) { return v > T(20) ? v : std::log1p(std::exp(v)); },
        [](T v, T) { return stable_sigmoid(v); });
}

template <class T>
Var<T> silu(Var<T> x) {
    return unary<T>(
        "silu", x, [](T v) { return v * stable_sigmoid(v); },
        [](T v, T) {
            const T s = stable_sigmoid(v);
            return s + v * s * (T(1) - s);
        });
}

template <class T>
Var<T> sum(Var<T> x) {
    T acc{0};
    for (T v : x.value().data()) acc += v;
    return x.graph().record("sum", Tensor<T>::scalar(acc), {x}, [x](Graph<T>& g, const Tensor<T>& go) {
        Tensor<T>& gx = g.grad(x);
        const T s = go[0];
        for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += s;
    });
}

template <class T>
Var<T> mean(Var<T> x) {
    const std::size_t n = x.value().numel();
    if (n == 0) throw DimensionError("mean of an empty tensor");
    T acc{0};
    for (T v : x.value().data()) acc += v;
    return x.graph().record("mean", Tensor<T>::scalar(acc / T(n)), {x},
                            [x, n](Graph<T>& g, const Tensor<T>& go) {
                                Tensor<T>& gx = g.grad(x);
                                const T s = go[0] / T(n);
                                for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += s;
                            });
}

template <class T>
Var<T> sum_last(Var<T> x) {
    const Shape& xs = x.shape();
    if (xs.empty()) throw DimensionError("sum_last on a scalar");
    const std::size_t n = xs.back();
    Shape os(xs.begin(), xs.end() - 1);
    Tensor<T> out(os);
    const auto& xv = x.value();
    for (std::size_t o = 0; o < out.numel(); ++o) {
        T acc{0};
        for (std::size_t j = 0; j < n; ++j) acc += xv[o * n + j];
        out[o] = acc;
    }
    return x.graph().record("sum_last", std::move(out), {x}, [x, n](Graph<T>& g, const Tensor<T>& go) {
        Tensor<T>& gx = g.grad(x);
        for (std::size_t o = 0; o < go.numel(); ++o)
            for (std::size_t j = 0; j < n; ++j) gx[o * n + j] += go[o];
    });
}

template <class T>
Var<T> softmax(Var<T> x, long axis) {
    const std::size_t ax = normalize_axis(axis, x.value().rank());
    const AxisSplit s = split_at(x.shape(), ax);
    if (s.extent == 0) throw DimensionError("softmax over an empty axis");
    const auto& xv = x.value();
    Tensor<T> out(xv.shape());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.extent * s.inner + i;
            T mx = xv[base];
            for (std::size_t j = 1; j < s.extent; ++j) mx = std::max(mx, xv[base + j * s.inner]);
            T z{0};
            for (std::size_t j = 0; j < s.extent; ++j) {
                const T e = std::exp(xv[base + j * s.inner] - mx);
                out[base + j * s.inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < s.extent; ++j) out[base + j * s.inner] /= z;
        }
    }
    Graph<T>& g = x.graph();
    Var<T> self = next_node(g);
    return g.record("softmax", std::move(out), {x}, [x, self, s](Graph<T>& gr, const Tensor<T>& go) {
        const Tensor<T>& y = self.value();
        Tensor<T>& gx = gr.grad(x);
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t i = 0; i < s.inner; ++i) {
                const std::size_t base = o * s.extent * s.inner + i;
                T dot{0};
                for (std::size_t j = 0; j < s.extent; ++j) {
                    const std::size_t k = base + j * s.inner;
                    dot += go[k] * y[k];
                }
                for (std::size_t j = 0; j < s.extent; ++j) {
                    const std::size_t k = base + j * s.inner;
                    gx[k] += y[k] * (go[k] - dot);
                }
            }
        }
    });
}

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    auto mismatch = [&] {
        return DimensionError("matmul: cannot multiply " + to_string(as) + " by " + to_string(bs));
    };
    if (as.size() < 2 || bs.size() < 2) throw mismatch();
    const std::size_t m = as[as.size() - 2];
    const std::size_t k = as.back();
    const std::size_t n = bs.back();
    if (bs[bs.size() - 2] != k) throw mismatch();
    const Shape lead_a(as.begin(), as.end() - 2);
    const Shape lead_b(bs.begin(), bs.end() - 2);

    enum class Mode { batched, shared_b, shared_a };
    Mode mode;
    Shape lead;
    if (lead_a == lead_b) {
        mode = Mode::batched;
        lead = lead_a;
    } else if (lead_b.empty()) {
        mode = Mode::shared_b;
        lead = lead_a;
    } else if (lead_a.empty()) {
        mode = Mode::shared_a;
        lead = lead_b;
    } else {
        throw mismatch();
    }
    const std::size_t batch = numel(lead);
    Shape os = lead;
    os.push_back(m);
    os.push_back(n);
    Tensor<T> out(os);
    const T* ap = a.value().data().data();
    const T* bp = b.value().data().data();
    T* op = out.data().data();
    switch (mode) {
        case Mode::shared_b:
            mm_acc(ap, bp, op, batch * m, k, n);
            break;
        case Mode::batched:
            for (std::size_t i = 0; i < batch; ++i)
                mm_acc(ap + i * m * k, bp + i * k * n, op + i * m * n, m, k, n);
            break;
        case Mode::shared_a:
            for (std::size_t i = 0; i < batch; ++i) mm_acc(ap, bp + i * k * n, op + i * m * n, m, k, n);
            break;
    }
    return a.graph().record(
        "matmul", std::move(out), {a, b}, [a, b, mode, batch, m, k, n](Graph<T>& g, const Tensor<T>& go) {
            const T* ap = a.value().data().data();
            const T* bp = b.value().data().data();
            const T* gp = go.data().data();
            if (g.requires_grad(a)) {
                T* da = g.grad(a).data().data();
                switch (mode) {
                    case Mode::shared_b:
                        mm_acc_bt(gp, bp, da, batch * m, k, n);
                        break;
                    case Mode::batched:
                        for (std::size_t i = 0; i < batch; ++i)
                            mm_acc_bt(gp + i * m * n, bp + i * k * n, da + i * m * k, m, k, n);
                        break;
                    case Mode::shared_a:
                        for (std::size_t i = 0; i < batch; ++i)
                            mm_acc_bt(gp + i * m * n, bp + i * k * n, da, m, k, n);
                        break;
                }
            }
            if (g.requires_grad(b)) {
                T* db = g.grad(b).data().data();
                switch (mode) {
                    case Mode::shared_b:
                        mm_acc_at(ap, gp, db, batch * m, k, n);
                        break;
                    case Mode::batched:
                        for (std::size_t i = 0; i < batch; ++i)
                            mm_acc_at(ap + i * m * k, gp + i * m * n, db + i * k * n, m, k, n);
                        break;
                    case Mode::shared_a:
                        for (std::size_t i = 0; i < batch; ++i)
                            mm_acc_at(ap, gp + i * m * n, db + i * k * n, m, k, n);
                        break;
                }
            }
        });
}

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
    Tensor<T> out = x.value().reshaped(std::move(shape));
    return x.graph().record("reshape", std::move(out), {x}, [x](Graph<T>& g, const Tensor<T>& go) {
        accumulate(g.grad(x), go);
    });
}

template <class T>
Var<T> permute(Var<T> x, const std::vector<std::size_t>& perm) {
    Tensor<T> out = permuted(x.value(), perm);
    std::vector<std::size_t> inverse(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = i;
    return x.graph().record("permute", std::move(out), {x},
                            [x, inverse](Graph<T>& g, const Tensor<T>& go) {
                                accumulate(g.grad(x), permuted(go, inverse));
                            });
}

template <class T>
Var<T> slice(Var<T> x, long axis, std::size_t begin, std::size_t end) {
    const std::size_t ax = normalize_axis(axis, x.value().rank());
    const AxisSplit s = split_at(x.shape(), ax);
    if (begin > end || end > s.extent) {
        throw DimensionError("slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                             ") out of range for axis of extent " + std::to_string(s.extent));
    }
    const std::size_t len = end - begin;
    Shape os = x.shape();
    os[ax] = len;
    Tensor<T> out(os);
    const auto& xv = x.value();
    for (std::size_t o = 0; o < s.outer; ++o) {
        const T* src = xv.data().data() + (o * s.extent + begin) * s.inner;
        std::copy(src, src + len * s.inner, out.data().data() + o * len * s.inner);
    }
    return x.graph().record("slice", std::move(out), {x},
                            [x, s, begin, len](Graph<T>& g, const Tensor<T>& go) {
                                T* gx = g.grad(x).data().data();
                                for (std::size_t o = 0; o < s.outer; ++o) {
                                    T* dst = gx + (o * s.extent + begin) * s.inner;
                                    const T* src = go.data().data() + o * len * s.inner;
                                    for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
                                }
                            });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, long axis) {
    if (parts.empty()) throw DimensionError("concat of zero tensors");
    const Shape& first = parts.front().shape();
    const std::size_t ax = normalize_axis(axis, first.size());
    std::vector<std::size_t> extents;
    std::size_t total = 0;
    for (const Var<T>& p : parts) {
        Shape ps = p.shape();
        if (ps.size() != first.size()) throw DimensionError("concat: rank mismatch");
        for (std::size_t i = 0; i < ps.size(); ++i) {
            if (i != ax && ps[i] != first[i]) {
                throw DimensionError("concat: shapes " + to_string(first) + " and " +
                                     to_string(ps) + " differ off the concat axis");
            }
        }
        extents.push_back(ps[ax]);
        total += ps[ax];
    }
    Shape os = first;
    os[ax] = total;
    const AxisSplit s = split_at(os, ax);
    Tensor<T> out(os);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto& pv = parts[p].value();
        const std::size_t len = extents[p];
        for (std::size_t o = 0; o < s.outer; ++o) {
            const T* src = pv.data().data() + o * len * s.inner;
            std::copy(src, src + len * s.inner, out.data().data() + (o * total + offset) * s.inner);
        }
        offset += len;
    }
    return parts.front().graph().record(
        "concat", std::move(out), std::span<const Var<T>>(parts),
        [parts, extents, s, total](Graph<T>& g, const Tensor<T>& go) {
            std::size_t offset = 0;
            for (std::size_t p = 0; p < parts.size(); ++p) {
                const std::size_t len = extents[p];
                if (g.requires_grad(parts[p])) {
                    T* dst = g.grad(parts[p]).data().data();
                    for (std::size_t o = 0; o < s.outer; ++o) {
                        const T* src = go.data().data() + (o * total + offset) * s.inner;
                        for (std::size_t i = 0; i < len * s.inner; ++i) dst[o * len * s.inner + i] += src[i];
                    }
                }
                offset += len;
            }
        });
}

template <class T>
Var<T> rms_norm(Var<T> x, Var<T> weight, T eps) {
    const std::size_t d = trailing_extent("rms_norm", x, weight);
    if (weight.shape().size() != 1) throw DimensionError("rms_norm: weight must be a vector");
    const auto& xv = x.value();
    const auto& wv = weight.value();
    const std::size_t rows = xv.numel() / d;
    Tensor<T> out(xv.shape());
    std::vector<T> inv(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xv.data().data() + r * d;
        T ms{0};
        for (std::size_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
        inv[r] = T(1) / std::sqrt(ms / T(d) + eps);
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xr[j] * inv[r] * wv[j];
    }
    return x.graph().record(
        "rms_norm", std::move(out), {x, weight}, [x, weight, inv, d, rows](Graph<T>& g, const Tensor<T>& go) {
            const auto& xv = x.value();
            const auto& wv = weight.value();
            const bool need_x = g.requires_grad(x);
            const bool need_w = g.requires_grad(weight);
            T* gx = need_x ? g.grad(x).data().data() : nullptr;
            T* gw = need_w ? g.grad(weight).data().data() : nullptr;
            for (std::size_t r = 0; r < rows; ++r) {
                const T* xr = xv.data().data() + r * d;
                const T* gr = go.data().data() + r * d;
                T dot{0};
                for (std::size_t j = 0; j < d; ++j) {
                    const T xhat = xr[j] * inv[r];
                    if (need_w) gw[j] += gr[j] * xhat;
                    dot += gr[j] * wv[j] * xhat;
                }
                if (need_x) {
                    const T m = dot / T(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const T xhat = xr[j] * inv[r];
                        gx[r * d + j] += inv[r] * (gr[j] * wv[j] - xhat * m);
                    }
                }
            }
        });
}

template <class T>
Var<T> causal_conv1d(Var<T> x, Var<T> weight, Var<T> bias, long time_axis) {
    const Shape& xs = x.shape();
    const std::size_t ax = normalize_axis(time_axis, xs.size());
    if (ax + 1 >= xs.size()) throw DimensionError("causal_conv1d: time axis cannot be the channel axis");
    const std::size_t d = xs.back();
    const Shape& ws = weight.shape();
    if (ws.size() != 2 || ws[0] != d || bias.shape() != Shape{d}) {
        throw DimensionError("causal_conv1d: weight " + to_string(ws) + " / bias " +
                             to_string(bias.shape()) + " do not fit input " + to_string(xs));
    }
    const std::size_t width = ws[1];
    const AxisSplit s = split_at(xs, ax);
    const std::size_t len = s.extent;
    const std::size_t mid = s.inner / d;
    const auto& xv = x.value();
    const auto& wv = weight.value();
    const auto& bv = bias.value();
    Tensor<T> out(xs);
    auto at = [&](std::size_t o, std::size_t t, std::size_t m) { return ((o * len + t) * mid + m) * d; };
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t t = 0; t < len; ++t)
            for (std::size_t m = 0; m < mid; ++m) {
                T* y = out.data().data() + at(o, t, m);
                for (std::size_t c = 0; c < d; ++c) y[c] = bv[c];
                for (std::size_t k = 0; k < width; ++k) {
                    if (t + k + 1 < width) continue;
                    const std::size_t src_t = t + k + 1 - width;
                    const T* xr = xv.data().data() + at(o, src_t, m);
                    for (std::size_t c = 0; c < d; ++c) y[c] += wv[c * width + k] * xr[c];
                }
            }
    return x.graph().record(
        "causal_conv1d", std::move(out), {x, weight, bias},
        [x, weight, bias, s, len, mid, d, width](Graph<T>& g, const Tensor<T>& go) {
            const auto& xv = x.value();
            const auto& wv = weight.value();
            const bool nx = g.requires_grad(x), nw = g.requires_grad(weight), nb = g.requires_grad(bias);
            T* gx = nx ? g.grad(x).data().data() : nullptr;
            T* gw = nw ? g.grad(weight).data().data() : nullptr;
            T* gb = nb ? g.grad(bias).data().data() : nullptr;
            auto at = [&](std::size_t o, std::size_t t, std::size_t m) { return ((o * len + t) * mid + m) * d; };
            for (std::size_t o = 0; o < s.outer; ++o)
                for (std::size_t t = 0; t < len; ++t)
                    for (std::size_t m = 0; m < mid; ++m) {
                        const T* gy = go.data().data() + at(o, t, m);
                        if (nb)
                            for (std::size_t c = 0; c < d; ++c) gb[c] += gy[c];
                        for (std::size_t k = 0; k < width; ++k) {
                            if (t + k + 1 < width) continue;
                            const std::size_t src = at(o, t + k + 1 - width, m);
                            for (std::size_t c = 0; c < d; ++c) {
                                if (nx) gx[src + c] += wv[c * width + k] * gy[c];
                                if (nw) gw[c * width + k] += xv[src + c] * gy[c];
                            }
                        }
                    }
        });
}

template <class T>
Var<T> dropout(Var<T> x, double rate, std::mt19937_64& rng) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate must be in [0, 1)");
    if (rate == 0.0) return x;
    const T keep_scale = T(1.0 / (1.0 - rate));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto& xv = x.value();
    Tensor<T> mask(xv.shape());
    Tensor<T> out(xv.shape());
    for (std::size_t i = 0; i < xv.numel(); ++i) {
        mask[i] = u(rng) < rate ? T(0) : keep_scale;
        out[i] = xv[i] * mask[i];
    }
    return x.graph().record("dropout", std::move(out), {x}, [x, mask](Graph<T>& g, const Tensor<T>& go) {
        Tensor<T>& gx = g.grad(x);
        for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += go[i] * mask[i];
    });
}

template <class T>
Var<T> mse_loss(Var<T> pred, Var<T> target) {
    return mean(square(sub(pred, target)));
}

#define POLYSSM_INSTANTIATE_OPS(T)                                              \
    template Var<T> add(Var<T>, Var<T>);                                        \
    template Var<T> sub(Var<T>, Var<T>);                                        \
    template Var<T> mul(Var<T>, Var<T>);                                        \
    template Var<T> add_trailing(Var<T>, Var<T>);                               \
    template Var<T> mul_trailing(Var<T>, Var<T>);                               \
    template Var<T> scale_by(Var<T>, Var<T>);                                   \
    template Var<T> scale(Var<T>, T);                                           \
    template Var<T> exp(Var<T>);                                                \
    template Var<T> square(Var<T>);                                             \
    template Var<T> tanh(Var<T>);                                               \
    template Var<T> sigmoid(Var<T>);                                            \
    template Var<T> softplus(Var<T>);                                           \
    template Var<T> silu(Var<T>);                                               \
    template Var<T> sum(Var<T>);                                                \
    template Var<T> mean(Var<T>);                                               \
    template Var<T> sum_last(Var<T>);                                           \
    template Var<T> softmax(Var<T>, long);                                      \
    template Var<T> matmul(Var<T>, Var<T>);                                     \
    template Var<T> reshape(Var<T>, Shape);                                     \
    template Var<T> permute(Var<T>, const std::vector<std::size_t>&);           \
    template Var<T> slice(Var<T>, long, std::size_t, std::size_t);              \
    template Var<T> concat(const std::vector<Var<T>>&, long);                   \
    template Var<T> rms_norm(Var<T>, Var<T>, T);                                \
    template Var<T> causal_conv1d(Var<T>, Var<T>, Var<T>, long);                \
    template Var<T> dropout(Var<T>, double, std::mt19937_64&);                  \
    template Var<T> mse_loss(Var<T>, Var<T>);

POLYSSM_INSTANTIATE_OPS(float)
POLYSSM_INSTANTIATE_OPS(double)

}  // namespace ops

template Tensor<float> permuted(const Tensor<float>&, const std::vector<std::size_t>&);
template Tensor<double> permuted(const Tensor<double>&, const std::vector<std::size_t>&);

}  // namespace polyssm
