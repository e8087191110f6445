#pragma once

#include <functional>
#include <vector>

#include "pbsn/tensor.hpp"

namespace pbsn {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

/// Compares reverse-mode gradients of a scalar program against central
/// differences. `fn` must rebuild its graph from `params` on every call.
/// Error per coordinate is |analytic - numeric| / max(1, |numeric|).
/// Throws NumericalError if `fn` returns a non-finite value.
GradCheckResult grad_check(const std::function<Tensor()>& fn, std::vector<Tensor> params,
                           double h = 1e-6);

}  // namespace pbsn
