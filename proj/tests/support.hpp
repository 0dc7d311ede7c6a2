#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "polyssm/ops.hpp"

// Hand-rolled generators and oracles shared by the unit tests.
namespace testing_support {

using polyssm::Graph;
using polyssm::Parameter;
using polyssm::Shape;
using polyssm::Tensor;
using polyssm::Var;

struct Gen {
    explicit Gen(std::uint64_t seed) : rng(seed) {}

    std::mt19937_64 rng;

    std::size_t size(std::size_t lo, std::size_t hi) {
        return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    }
    double real(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
    bool coin() { return size(0, 1) == 1; }

    /// Rank 1..max_rank, every extent >= 1, at most max_numel elements.
    Shape shape(std::size_t max_rank, std::size_t max_numel) {
        for (;;) {
            Shape s(size(1, max_rank));
            for (auto& e : s) e = size(1, 4);
            if (polyssm::numel(s) <= max_numel) return s;
        }
    }

    template <class T = double>
    Tensor<T> tensor(const Shape& s, double lo = -1.0, double hi = 1.0) {
        Tensor<T> t(s);
        for (auto& v : t.storage()) v = T(real(lo, hi));
        return t;
    }
};

/// Sum of x weighted elementwise by fixed random w: makes every output
/// element reach the loss with a distinct coefficient.
inline Var<double> weighted_sum(Var<double> x, const Tensor<double>& w) {
    return polyssm::ops::sum(polyssm::ops::mul(x, x.graph().input(w)));
}

/// Analytic directional derivative <grad f, v> against the central
/// difference (f(p + eps v) - f(p - eps v)) / (2 eps) along a random
/// direction v over every parameter at once. Returns the relative error.
inline double jvp_rel_error(const std::function<Var<double>(Graph<double>&)>& f,
                            const std::vector<Parameter<double>*>& params, std::uint64_t seed,
                            double eps = 1e-5) {
    Gen gen(seed);
    std::vector<Tensor<double>> dirs;
    for (auto* p : params) dirs.push_back(gen.tensor(p->value.shape()));
    for (auto* p : params) p->zero_grad();
    {
        Graph<double> g;
        g.backward(f(g));
    }
    double analytic = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t k = 0; k < dirs[i].numel(); ++k) analytic += params[i]->grad[k] * dirs[i][k];
    auto shifted = [&](double s) {
        std::vector<Tensor<double>> saved;
        for (std::size_t i = 0; i < params.size(); ++i) {
            saved.push_back(params[i]->value);
            for (std::size_t k = 0; k < dirs[i].numel(); ++k) params[i]->value[k] += s * dirs[i][k];
        }
        Graph<double> g(false);
        const double v = f(g).value().item();
        for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = saved[i];
        return v;
    };
    const double numeric = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

}  // namespace testing_support

