#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "kivla/graph.hpp"

namespace kivla::ad {

struct GradCheckInput {
    int rows = 1, cols = 1;
    std::vector<double> values;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::vector<double> per_input;  // max relative error per input tensor
    bool pass = true;
    double tol = 0.0;
};

// f builds a scalar loss from the given input nodes; it must be deterministic.
using BuildFn = std::function<NodeId(Graph<double>&, const std::vector<NodeId>&)>;

// Central finite differences against the analytic gradient. The step is
// chosen per element from its magnitude. denom_floor keeps the relative
// error well defined where both gradients are tiny.
inline GradCheckReport grad_check(const BuildFn& f, const std::vector<GradCheckInput>& inputs,
                                  double tol, double step_scale = 1e-5,
                                  double denom_floor = 1e-4) {
    auto eval = [&](const std::vector<std::vector<double>>& vals) {
        Graph<double> g;
        std::vector<NodeId> ids;
        ids.reserve(inputs.size());
        for (size_t i = 0; i < inputs.size(); ++i) {
            ids.push_back(g.value_input(inputs[i].rows, inputs[i].cols, vals[i], true));
        }
        NodeId loss = f(g, ids);
        return g.scalar_value(loss);
    };

    // analytic pass
    Graph<double> g;
    std::vector<NodeId> ids;
    std::vector<std::vector<double>> base;
    for (const auto& in : inputs) {
        base.push_back(in.values);
        ids.push_back(g.value_input(in.rows, in.cols, in.values, true));
    }
    NodeId loss = f(g, ids);
    GradientMap<double> gm = g.backward(loss);

    GradCheckReport report;
    report.tol = tol;
    report.per_input.assign(inputs.size(), 0.0);
    for (size_t i = 0; i < inputs.size(); ++i) {
        const std::vector<double>& analytic = gm.grad(ids[i]);
        for (size_t k = 0; k < base[i].size(); ++k) {
            const double x = base[i][k];
            const double h = step_scale * (1.0 + std::abs(x));
            auto vals = base;
            vals[i][k] = x + h;
            const double fp = eval(vals);
            vals[i][k] = x - h;
            const double fm = eval(vals);
            const double fd = (fp - fm) / (2.0 * h);
            const double a = analytic[k];
            const double denom = std::max({std::abs(a), std::abs(fd), denom_floor});
            const double rel = std::abs(a - fd) / denom;
            report.per_input[i] = std::max(report.per_input[i], rel);
        }
        report.max_rel_error = std::max(report.max_rel_error, report.per_input[i]);
    }
    report.pass = report.max_rel_error <= tol;
    return report;
}

}  // namespace kivla::ad
