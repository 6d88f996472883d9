#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "asgk/tensor.hpp"

namespace asgk {

struct GradCheckResult {
    bool ok = true;
    double max_rel_err = 0.0;
    std::string worst; // "param 2 index 7: analytic=.. numeric=.."
};

// Central-difference check of d(f)/d(params). `f` must rebuild the graph on
// every call and return a scalar. Parameters are perturbed in place.
inline GradCheckResult finite_diff_check(const std::function<Tensor()>& f,
                                         const std::vector<Tensor>& params, double h = 1e-6,
                                         double tol = 1e-6) {
    for (const Tensor& p : params) p.zero_grad();
    Tensor loss = f();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const Tensor& p : params)
        analytic.emplace_back(p.grad().begin(), p.grad().end());

    GradCheckResult res;
    NoGradGuard guard;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const Tensor& p = params[pi];
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double saved = p.at(i);
            p.mutable_values()[i] = saved + h;
            const double up = f().value();
            p.mutable_values()[i] = saved - h;
            const double dn = f().value();
            p.mutable_values()[i] = saved;
            const double numeric = (up - dn) / (2.0 * h);
            const double a = analytic[pi][i];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            const double rel = std::fabs(a - numeric) / denom;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = "param " + std::to_string(pi) + " index " + std::to_string(i) +
                            ": analytic=" + std::to_string(a) +
                            " numeric=" + std::to_string(numeric);
            }
            if (rel > tol) res.ok = false;
        }
    }
    return res;
}

} // namespace asgk
