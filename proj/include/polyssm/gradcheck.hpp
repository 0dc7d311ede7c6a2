#pragma once

#include <functional>
#include <string>
#include <vector>

#include "polyssm/graph.hpp"

namespace polyssm {

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_error = 0.0;
    bool pass = false;
};

struct GradCheckOptions {
    double eps = 1e-5;
    double tol = 1e-4;
    /// Denominator floor: rel = |a - n| / max(|a|, |n|, abs_floor).
    double abs_floor = 1e-6;
};

/// Builds the scalar objective on a fresh graph.
using Objective = std::function<Var<double>(Graph<double>&)>;

/// Compares backward() gradients of `f` against central differences
/// (f(p + eps) - f(p - eps)) / (2 eps), element by element. Parameter
/// gradients are overwritten. Throws NumericError if two baseline
/// evaluations of `f` disagree.
GradCheckReport finite_diff_check(const Objective& f, const std::vector<Parameter<double>*>& params,
                                  const GradCheckOptions& options = {});

}  // namespace polyssm
