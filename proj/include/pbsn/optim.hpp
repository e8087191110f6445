#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "pbsn/tensor.hpp"

namespace pbsn {

struct ParamGroup {
    std::vector<Tensor> params;
    double lr = 1e-3;
};

/// SGD with momentum and L2 weight decay (PyTorch update order:
/// d = g + wd*p; v = mu*v + d; p -= lr*v).
class Sgd {
public:
    Sgd(std::vector<ParamGroup> groups, double momentum, double weight_decay);

    /// Applies one update using the accumulated grads, then clears them.
    /// `lr_scale` multiplies every group's base rate (schedules).
    void step(double lr_scale = 1.0);
    void zero_grad();
    /// Clears momentum of selected entries of `param` (e.g. reinitialised weights).
    void reset_velocity(const Tensor& param, std::span<const std::size_t> entries);

    const std::vector<ParamGroup>& groups() const { return groups_; }

private:
    std::vector<ParamGroup> groups_;
    std::vector<std::vector<std::vector<double>>> velocity_;
    double momentum_;
    double weight_decay_;
};

/// Step decay: factor gamma every `step_epochs` epochs.
double step_decay(std::size_t epoch, std::size_t step_epochs, double gamma);

}  // namespace pbsn
