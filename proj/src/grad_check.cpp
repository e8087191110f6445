#include "pbsn/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "pbsn/errors.hpp"

namespace pbsn {

namespace {

double evaluate(const std::function<Tensor()>& fn) {
    const double v = fn().item();
    if (!std::isfinite(v)) throw NumericalError("grad_check: program returned a non-finite value");
    return v;
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor()>& fn, std::vector<Tensor> params,
                           double h) {
    if (!(h >= 1e-7 && h <= 1e-4)) throw ParameterError("grad_check: step must lie in [1e-7, 1e-4]");
    for (auto& p : params) p.zero_grad();
    fn().backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) {
        const auto g = p.grad();
        analytic.emplace_back(p.size(), 0.0);
        std::copy(g.begin(), g.end(), analytic.back().begin());
        p.zero_grad();
    }

    GradCheckResult result;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto values = params[pi].mutable_values();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + h;
            const double up = evaluate(fn);
            values[i] = saved - h;
            const double down = evaluate(fn);
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double err = std::abs(analytic[pi][i] - numeric) / std::max(1.0, std::abs(numeric));
            result.max_rel_error = std::max(result.max_rel_error, err);
            ++result.checked;
        }
    }
    return result;
}

}  // namespace pbsn
