#pragma once

#include <functional>

#include "fednas/graph.hpp"
#include "fednas/param_store.hpp"

namespace fednas {

/// Builds a graph over the given store and returns the scalar loss node.
using LossBuilder = std::function<int(ComputeGraph&, const ParamStore&)>;

/// Central finite-difference check of the reverse-mode gradients.
///
/// Perturbs every coordinate of every parameter by +/- epsilon, forms
/// (f+ - f-) / 2 epsilon and compares against the analytic gradient from
/// backward(). Returns the maximum of
///   |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
inline double finite_diff_check(const LossBuilder& build, ParamStore& store,
                                double epsilon = 1e-5) {
    if (epsilon <= 0) throw std::invalid_argument("finite_diff_check: epsilon must be positive");

    auto eval = [&]() {
        ComputeGraph g(store);
        int loss = build(g, store);
        double v = g.value(loss)[0];
        if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite loss");
        return v;
    };

    ComputeGraph g(store);
    int loss = build(g, store);
    if (!std::isfinite(g.value(loss)[0]))
        throw NumericError("finite_diff_check: non-finite loss");
    GradMap analytic = g.backward(loss, store, true, true);

    double worst = 0.0;
    for (int id = 0; id < store.size(); ++id) {
        Tensor& p = store.value(id);
        const Tensor& a = analytic.at(id);
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            double keep = p[i];
            p[i] = keep + epsilon;
            double up = eval();
            p[i] = keep - epsilon;
            double dn = eval();
            p[i] = keep;
            double numeric = (up - dn) / (2.0 * epsilon);
            double err = std::abs(a[i] - numeric) /
                         std::max(1e-8, std::abs(a[i]) + std::abs(numeric));
            if (err > worst) worst = err;
        }
    }
    return worst;
}

}  // namespace fednas
