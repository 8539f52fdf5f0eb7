#pragma once

// Central-difference gradient verification. Always runs in double precision:
// builders get double leaves and must construct the graph from them alone so
// repeated evaluation is pure.

#include <functional>
#include <string>
#include <vector>

#include "phenocd/autodiff.hpp"

namespace phenocd::nn {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst;

    bool ok(double tol = 1e-4) const { return max_rel_err <= tol; }
};

using GraphBuilder = std::function<NodePtr<double>(const std::vector<NodePtr<double>>&)>;

// Compares analytic gradients of a scalar-valued graph against central finite
// differences, element by element over every leaf. Relative error metric:
// |a - n| / max(1e-8, |a| + |n|).
inline GradCheckReport finite_diff_check(const GraphBuilder& build,
                                         const std::vector<Tensor<double>>& leaf_values,
                                         double eps = 1e-5) {
    std::vector<NodePtr<double>> leaves;
    leaves.reserve(leaf_values.size());
    for (const auto& t : leaf_values) leaves.push_back(make_leaf(t, true));
    auto loss = build(leaves);
    if (loss->value.numel() != 1)
        throw ShapeError("finite_diff_check: loss must be scalar, got " + loss->value.shape_str());
    backward(loss);

    auto eval = [&](const std::vector<Tensor<double>>& vals) {
        std::vector<NodePtr<double>> consts;
        consts.reserve(vals.size());
        for (const auto& t : vals) consts.push_back(make_const(t));
        return build(consts)->value.data[0];
    };

    GradCheckReport report;
    std::vector<Tensor<double>> vals = leaf_values;
    for (size_t li = 0; li < vals.size(); ++li) {
        for (int64_t e = 0; e < vals[li].numel(); ++e) {
            double keep = vals[li].data[e];
            vals[li].data[e] = keep + eps;
            double fp = eval(vals);
            vals[li].data[e] = keep - eps;
            double fm = eval(vals);
            vals[li].data[e] = keep;
            double numeric = (fp - fm) / (2.0 * eps);
            double analytic = leaves[li]->grad.data[e];
            double rel = std::abs(analytic - numeric) /
                         std::max(1e-8, std::abs(analytic) + std::abs(numeric));
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst = "leaf " + std::to_string(li) + " elem " + std::to_string(e) +
                               " analytic " + std::to_string(analytic) + " numeric " +
                               std::to_string(numeric);
            }
        }
    }
    return report;
}

}  // namespace phenocd::nn
