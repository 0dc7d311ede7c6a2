#include "polyssm/legendre.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace polyssm::legendre {

namespace {

constexpr double kDomainSlack = 1e-12;

void check_domain(double x) {
    if (!(std::abs(x) <= 1.0 + kDomainSlack)) {
        throw DomainError("Legendre argument " + std::to_string(x) + " outside [-1, 1]");
    }
}

double bonnet(unsigned n, double x) {
    if (n == 0) return 1.0;
    double prev = 1.0;
    double cur = x;
    for (unsigned k = 1; k < n; ++k) {
        const double next = ((2.0 * k + 1.0) * x * cur - k * prev) / (k + 1.0);
        prev = cur;
        cur = next;
    }
    return cur;
}

// All values P_0..P_max at x.
std::vector<double> table(unsigned max_deg, double x) {
    std::vector<double> p(max_deg + 1);
    p[0] = 1.0;
    if (max_deg >= 1) p[1] = x;
    for (unsigned k = 1; k < max_deg; ++k) {
        p[k + 1] = ((2.0 * k + 1.0) * x * p[k] - k * p[k - 1]) / (k + 1.0);
    }
    return p;
}

void fill_degree(std::size_t channels, unsigned remaining, std::vector<unsigned>& prefix,
                 std::vector<MultiIndex>& out) {
    if (prefix.size() + 1 == channels) {
        prefix.push_back(remaining);
        out.push_back(MultiIndex{prefix});
        prefix.pop_back();
        return;
    }
    for (unsigned d = remaining + 1; d-- > 0;) {
        prefix.push_back(d);
        fill_degree(channels, remaining - d, prefix, out);
        prefix.pop_back();
    }
}

// Visits every node of the tensor-product grid.
template <class F>
void for_each_grid_point(std::size_t dims, const QuadratureRule& rule, F&& visit) {
    const std::size_t q = rule.nodes.size();
    std::vector<std::size_t> idx(dims, 0);
    std::vector<double> point(dims);
    while (true) {
        double w = 1.0;
        for (std::size_t d = 0; d < dims; ++d) {
            point[d] = rule.nodes[idx[d]];
            w *= rule.weights[idx[d]];
        }
        visit(std::span<const double>(point), idx, w);
        std::size_t d = 0;
        while (d < dims && ++idx[d] == q) idx[d++] = 0;
        if (d == dims) break;
    }
}

}  // namespace

unsigned MultiIndex::total() const {
    unsigned s = 0;
    for (unsigned d : degrees) s += d;
    return s;
}

double eval_legendre(unsigned n, double x) {
    check_domain(x);
    return bonnet(n, x);
}

double eval_normalized(unsigned n, double x) {
    return std::sqrt((2.0 * n + 1.0) / 2.0) * eval_legendre(n, x);
}

double eval_multivariate(const MultiIndex& idx, std::span<const double> point) {
    if (point.size() != idx.channels()) {
        throw DimensionError("multi-index over " + std::to_string(idx.channels()) +
                             " variables evaluated at a point of dimension " +
                             std::to_string(point.size()));
    }
    double v = 1.0;
    for (std::size_t c = 0; c < point.size(); ++c) v *= eval_legendre(idx.degrees[c], point[c]);
    return v;
}

std::uint64_t count_degree(std::size_t channels, unsigned n_deg) {
    if (channels == 0) throw std::invalid_argument("count_degree: at least one channel required");
    // binomial(C + n, min(C, n)), exact at every step of the product
    const std::uint64_t k = std::min<std::uint64_t>(channels, n_deg);
    const std::uint64_t top = channels + static_cast<std::uint64_t>(n_deg);
    std::uint64_t r = 1;
    for (std::uint64_t i = 1; i <= k; ++i) r = r * (top - k + i) / i;
    return r;
}

std::uint64_t count_total(std::size_t channels, unsigned max_deg) {
    std::uint64_t s = 0;
    for (unsigned d = 0; d <= max_deg; ++d) s += count_degree(channels, d);
    return s;
}

std::vector<MultiIndex> enumerate_multi_indices(std::size_t channels, unsigned max_deg) {
    if (channels == 0) throw std::invalid_argument("enumerate_multi_indices: at least one channel");
    std::vector<MultiIndex> out;
    std::vector<unsigned> prefix;
    for (unsigned d = 0; d <= max_deg; ++d) fill_degree(channels, d, prefix, out);
    return out;
}

QuadratureRule gauss_legendre(std::size_t order) {
    if (order == 0) throw std::invalid_argument("gauss_legendre: order must be positive");
    QuadratureRule rule;
    rule.order = order;
    rule.nodes.resize(order);
    rule.weights.resize(order);
    const auto n = static_cast<unsigned>(order);
    for (std::size_t i = 0; i < (order + 1) / 2; ++i) {
        double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
        double dp = 0.0;
        for (int iter = 0; iter < 100; ++iter) {
            const double p = bonnet(n, x);
            const double pm1 = bonnet(n - 1, x);
            dp = n * (x * p - pm1) / (x * x - 1.0);
            const double dx = p / dp;
            x -= dx;
            if (std::abs(dx) < 1e-14) break;
        }
        {
            const double p = bonnet(n, x);
            const double pm1 = bonnet(n - 1, x);
            dp = n * (x * p - pm1) / (x * x - 1.0);
        }
        const double w = 2.0 / ((1.0 - x * x) * dp * dp);
        rule.nodes[i] = -x;
        rule.nodes[order - 1 - i] = x;
        rule.weights[i] = w;
        rule.weights[order - 1 - i] = w;
    }
    if (order % 2 == 1) rule.nodes[order / 2] = 0.0;
    return rule;
}

double integrate(const std::function<double(std::span<const double>)>& f, std::size_t dims,
                 const QuadratureRule& rule) {
    double acc = 0.0;
    for_each_grid_point(dims, rule, [&](std::span<const double> pt, const auto&, double w) {
        acc += w * f(pt);
    });
    return acc;
}

Tensor<double> gram_matrix(std::size_t channels, unsigned max_deg, const QuadratureRule& rule) {
    if (rule.order < static_cast<std::size_t>(max_deg) + 1) {
        throw std::invalid_argument("gram_matrix: quadrature order " + std::to_string(rule.order) +
                                    " is insufficient for degree " + std::to_string(max_deg) +
                                    " (need at least " + std::to_string(max_deg + 1) + ")");
    }
    const auto basis = enumerate_multi_indices(channels, max_deg);
    const std::size_t nb = basis.size();
    // univariate values per node: vals[node][degree]
    std::vector<std::vector<double>> vals;
    for (double x : rule.nodes) vals.push_back(table(max_deg, x));

    Tensor<double> gram({nb, nb});
    std::vector<double> phi(nb);
    for_each_grid_point(channels, rule, [&](std::span<const double>, const std::vector<std::size_t>& idx, double w) {
        for (std::size_t b = 0; b < nb; ++b) {
            double v = 1.0;
            for (std::size_t c = 0; c < channels; ++c) v *= vals[idx[c]][basis[b].degrees[c]];
            phi[b] = v;
        }
        for (std::size_t i = 0; i < nb; ++i) {
            const double wi = w * phi[i];
            for (std::size_t j = i; j < nb; ++j) gram[i * nb + j] += wi * phi[j];
        }
    });
    for (std::size_t i = 0; i < nb; ++i)
        for (std::size_t j = 0; j < i; ++j) gram[i * nb + j] = gram[j * nb + i];
    return gram;
}

std::vector<double> project_multivariate(const std::function<double(std::span<const double>)>& f,
                                         std::size_t channels, unsigned max_deg,
                                         const QuadratureRule& rule) {
    const auto basis = enumerate_multi_indices(channels, max_deg);
    std::vector<double> coeffs(basis.size(), 0.0);
    std::vector<std::vector<double>> vals;
    for (double x : rule.nodes) vals.push_back(table(max_deg, x));
    for_each_grid_point(channels, rule, [&](std::span<const double> pt, const std::vector<std::size_t>& idx, double w) {
        const double fv = w * f(pt);
        for (std::size_t b = 0; b < basis.size(); ++b) {
            double v = 1.0;
            for (std::size_t c = 0; c < channels; ++c) v *= vals[idx[c]][basis[b].degrees[c]];
            coeffs[b] += fv * v;
        }
    });
    for (std::size_t b = 0; b < basis.size(); ++b) {
        double norm = 1.0;
        for (unsigned d : basis[b].degrees) norm *= 2.0 / (2.0 * d + 1.0);
        coeffs[b] /= norm;
    }
    return coeffs;
}

}  // namespace polyssm::legendre
