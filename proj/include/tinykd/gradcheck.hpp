// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference verification of analytic gradients.
#pragma once

#include <cmath>
#include <functional>

#include "tinykd/tensor.hpp"

namespace tinykd {

// Compares the analytic gradient of f at x against central differences
// (f(x+he) - f(x-he)) / 2h per coordinate. Returns the max relative error
// with denominator max(|analytic|, |numeric|, 1e-8). Restores x on exit.
inline double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x, double step) {
    if (step <= 0.0) throw std::invalid_argument("finite_diff_check: step must be positive");

    const bool old_rg = x.requires_grad();
    x.set_requires_grad(true);
    x.zero_grad();

    std::vector<double> analytic(x.size(), 0.0);
    {
        Tape tape;
        Tensor loss = f(x);
        backward(loss);
        if (x.has_grad()) analytic = x.grad();
    }
    x.zero_grad();

    double max_rel = 0.0;
    auto& xv = x.mutable_value();
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double orig = xv[i];
        xv[i] = orig + step;
        const double up = f(x).item();
        xv[i] = orig - step;
        const double down = f(x).item();
        xv[i] = orig;
        const double numeric = (up - down) / (2.0 * step);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        max_rel = std::max(max_rel, std::abs(analytic[i] - numeric) / denom);
    }
    x.set_requires_grad(old_rg);
    return max_rel;
}

} // namespace tinykd
