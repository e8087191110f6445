#include "pbsn/optim.hpp"

#include <cmath>

namespace pbsn {

Sgd::Sgd(std::vector<ParamGroup> groups, double momentum, double weight_decay)
    : groups_(std::move(groups)), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& g : groups_) {
        auto& buffers = velocity_.emplace_back();
        for (const auto& p : g.params) buffers.emplace_back(p.size(), 0.0);
    }
}

void Sgd::step(double lr_scale) {
    for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
        auto& group = groups_[gi];
        const double lr = group.lr * lr_scale;
        for (std::size_t pi = 0; pi < group.params.size(); ++pi) {
            auto& p = group.params[pi];
            if (!p.has_grad()) continue;
            auto values = p.mutable_values();
            const auto grad = p.grad();
            auto& v = velocity_[gi][pi];
            for (std::size_t i = 0; i < values.size(); ++i) {
                const double d = grad[i] + weight_decay_ * values[i];
                v[i] = momentum_ * v[i] + d;
                values[i] -= lr * v[i];
            }
            p.zero_grad();
        }
    }
}

void Sgd::zero_grad() {
    for (auto& g : groups_) {
        for (auto& p : g.params) p.zero_grad();
    }
}

void Sgd::reset_velocity(const Tensor& param, std::span<const std::size_t> entries) {
    for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
        for (std::size_t pi = 0; pi < groups_[gi].params.size(); ++pi) {
            if (groups_[gi].params[pi].id() != param.id()) continue;
            for (auto e : entries) velocity_[gi][pi].at(e) = 0.0;
        }
    }
}

double step_decay(std::size_t epoch, std::size_t step_epochs, double gamma) {
    if (step_epochs == 0) return 1.0;
    return std::pow(gamma, static_cast<double>(epoch / step_epochs));
}

}  // namespace pbsn
