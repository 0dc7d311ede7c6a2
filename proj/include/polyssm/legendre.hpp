#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "polyssm/tensor.hpp"

// Legendre polynomials on [-1, 1], their tensor-product extension to C
// variables, basis counting, and Gauss-Legendre quadrature.
namespace polyssm::legendre {

/// Per-variable degrees (n_1, ..., n_C) of a tensor-product basis element.
struct MultiIndex {
    std::vector<unsigned> degrees;

    std::size_t channels() const { return degrees.size(); }
    unsigned total() const;
    bool operator==(const MultiIndex&) const = default;
};

struct QuadratureRule {
    std::vector<double> nodes;
    std::vector<double> weights;
    std::size_t order = 0;
};

/// P_n(x) by the Bonnet recurrence. Throws DomainError for |x| > 1 + 1e-12.
double eval_legendre(unsigned n, double x);

/// Orthonormal g_n(x) = sqrt((2n + 1) / 2) P_n(x).
double eval_normalized(unsigned n, double x);

/// Product of P_{n_c}(x_c) over all channels.
double eval_multivariate(const MultiIndex& idx, std::span<const double> point);

/// Number of C-variate basis elements of total degree <= n_deg,
/// binomial(C + n_deg, C).
std::uint64_t count_degree(std::size_t channels, unsigned n_deg);

/// Sum of count_degree(C, d) for d = 0..max_deg: the size of the expanded
/// coefficient space when every order keeps its own full slice.
std::uint64_t count_total(std::size_t channels, unsigned max_deg);

/// Every multi-index with total degree <= max_deg, graded by total degree
/// and, within a degree, in descending lexicographic order
/// (for C = 2: 00, 10, 01, 20, 11, 02, ...).
std::vector<MultiIndex> enumerate_multi_indices(std::size_t channels, unsigned max_deg);

/// Gauss-Legendre rule with `order` nodes; Newton iteration on P_order to
/// 1e-14. Exact for polynomials up to degree 2 * order - 1.
QuadratureRule gauss_legendre(std::size_t order);

/// Tensor-product quadrature of `f` over [-1, 1]^dims.
double integrate(const std::function<double(std::span<const double>)>& f, std::size_t dims,
                 const QuadratureRule& rule);

/// Pairwise inner products over [-1, 1]^C of the multivariate Legendre
/// basis (order of enumerate_multi_indices). Requires rule.order >= max_deg + 1.
Tensor<double> gram_matrix(std::size_t channels, unsigned max_deg, const QuadratureRule& rule);

/// Expansion coefficients <f, P_idx> / <P_idx, P_idx> of `f` in the
/// multivariate basis (order of enumerate_multi_indices).
std::vector<double> project_multivariate(const std::function<double(std::span<const double>)>& f,
                                         std::size_t channels, unsigned max_deg,
                                         const QuadratureRule& rule);

}  // namespace polyssm::legendre
