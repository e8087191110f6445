#include "pbsn/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

#include "pbsn/errors.hpp"

namespace pbsn {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto extent : shape) n *= extent;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {
thread_local bool grad_disabled = false;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(grad_disabled) { grad_disabled = true; }
NoGradGuard::~NoGradGuard() { grad_disabled = previous_; }

struct Tensor::Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    BackwardFn backward;
};

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<Node>()) {
    node_->data.assign(numel(shape), fill);
    node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<Node>()) {
    if (numel(shape) != values.size()) {
        throw DimensionError("tensor: shape " + shape_string(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
    Tensor t(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::from_op(std::string_view op, Shape shape, std::vector<double> values,
                       std::vector<Tensor> parents, BackwardFn backward) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw NumericalError(std::string(op) + ": non-finite value in output " +
                                 shape_string(shape));
        }
    }
    Tensor out(std::move(shape), std::move(values));
    if (grad_disabled) return out;
    bool any = false;
    for (const auto& p : parents) any = any || (p.defined() && p.requires_grad());
    if (any) {
        out.node_->requires_grad = true;
        out.node_->backward = std::move(backward);
        for (auto& p : parents) {
            if (p.defined() && p.requires_grad()) out.node_->parents.push_back(p.node_);
        }
    }
    return out;
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= node_->shape.size()) {
        throw DimensionError("tensor: axis " + std::to_string(axis) + " out of range for " +
                             shape_string(node_->shape));
    }
    return node_->shape[axis];
}

std::size_t Tensor::size() const { return node_->data.size(); }

std::span<const double> Tensor::values() const { return node_->data; }

std::span<double> Tensor::mutable_values() const { return node_->data; }

double Tensor::item() const {
    if (node_->data.size() != 1) {
        throw DimensionError("tensor: item() on " + shape_string(node_->shape));
    }
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool on) { node_->requires_grad = on; }

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::span<const double> Tensor::grad() const { return node_->grad; }

std::span<double> Tensor::mutable_grad() const {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
    return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

void Tensor::backward() const {
    if (node_->data.size() != 1) {
        throw DimensionError("backward: output must be scalar, got " + shape_string(node_->shape));
    }
    if (!node_->requires_grad) return;

    // Iterative post-order DFS gives a topological order of the recorded graph.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    if (node_->grad.empty()) node_->grad.assign(1, 0.0);
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (!n->backward) continue;
        if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
        n->backward(n->grad);
    }
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data); }

}  // namespace pbsn
