#include "polyssm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace polyssm {

namespace {

double evaluate(const Objective& f) {
    Graph<double> g(false);
    return f(g).value().item();
}

}  // namespace

GradCheckReport finite_diff_check(const Objective& f, const std::vector<Parameter<double>*>& params,
                                  const GradCheckOptions& options) {
    if (options.eps <= 0.0) throw std::invalid_argument("finite_diff_check: eps must be positive");

    const double base1 = evaluate(f);
    const double base2 = evaluate(f);
    if (base1 != base2) {
        throw NumericError("finite_diff_check: objective is not deterministic (" +
                           std::to_string(base1) + " vs " + std::to_string(base2) + ")");
    }

    for (Parameter<double>* p : params) p->zero_grad();
    {
        Graph<double> g;
        Var<double> loss = f(g);
        g.backward(loss);
    }

    GradCheckReport report;
    for (Parameter<double>* p : params) {
        GradCheckEntry entry;
        entry.name = p->name;
        for (std::size_t i = 0; i < p->value.numel(); ++i) {
            const double saved = p->value[i];
            p->value[i] = saved + options.eps;
            const double up = evaluate(f);
            p->value[i] = saved - options.eps;
            const double down = evaluate(f);
            p->value[i] = saved;

            const double numeric = (up - down) / (2.0 * options.eps);
            const double analytic = p->grad[i];
            const double denom = std::max({std::abs(analytic), std::abs(numeric), options.abs_floor});
            const double rel = std::abs(analytic - numeric) / denom;
            if (i == 0 || rel > entry.max_rel_error) {
                entry.max_rel_error = rel;
                entry.worst_index = i;
                entry.analytic = analytic;
                entry.numeric = numeric;
            }
        }
        report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
        report.entries.push_back(std::move(entry));
    }
    report.pass = report.max_rel_error <= options.tol;
    return report;
}

}  // namespace polyssm
