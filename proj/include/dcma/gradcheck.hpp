#pragma once

#include <cmath>
#include <functional>
#include <limits>

#include "dcma/tensor.hpp"

namespace dcma {

// Central-difference check of reverse-mode gradients, 64-bit only.
// f must be a pure scalar-valued function of its tensor argument and
// re-runnable. Returns max over coordinates of
// |analytic - numeric| / max(1, |analytic|); +inf on non-finite values.
inline double grad_check(const std::function<Tensor<double>(Tensor<double>)>& f,
                         const Shape& shape, std::vector<double> x0, double eps = 1e-5) {
    DCMA_CHECK(eps > 0, "grad_check: eps must be positive");
    Tensor<double> x = Tensor<double>::param(shape, x0);
    Tensor<double> loss = f(x);
    DCMA_CHECK(loss.size() == 1, "grad_check: f must be scalar-valued");
    backward(loss);
    std::vector<double> analytic = x.grad();
    double worst = 0.0;
    for (size_t i = 0; i < x0.size(); ++i) {
        auto eval = [&](double v) {
            std::vector<double> xv = x0;
            xv[i] = v;
            NoGradGuard ng;
            return f(Tensor<double>::constant(shape, xv)).item();
        };
        double numeric = (eval(x0[i] + eps) - eval(x0[i] - eps)) / (2.0 * eps);
        if (!std::isfinite(numeric) || !std::isfinite(analytic[i]))
            return std::numeric_limits<double>::infinity();
        double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace dcma
