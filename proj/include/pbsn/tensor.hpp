#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pbsn {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major float64 array with an optional gradient slot.
///
/// A Tensor is a cheap shared handle. Operations that consume a tensor with
/// requires_grad() set record a backward closure on the result, so calling
/// backward() on a scalar result fills the grad buffers of every leaf that
/// contributed to it. Values are immutable once produced by an op; only leaf
/// parameters are updated in place (by optimizers).
class Tensor {
public:
    /// Receives the gradient flowing into the op's output.
    using BackwardFn = std::function<void(std::span<const double> out_grad)>;

    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    /// Leaf with requires_grad set.
    static Tensor parameter(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);

    /// Builds the result of a differentiable op. `backward` is only retained
    /// when at least one parent requires grad. Throws NumericalError naming
    /// `op` when any value is non-finite.
    static Tensor from_op(std::string_view op, Shape shape, std::vector<double> values,
                          std::vector<Tensor> parents, BackwardFn backward);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const;

    std::span<const double> values() const;
    /// In-place access for leaf updates (optimizers, initialisers).
    std::span<double> mutable_values() const;
    double item() const;
    double at(std::size_t flat_index) const { return values()[flat_index]; }

    bool requires_grad() const;
    void set_requires_grad(bool on);
    bool has_grad() const;
    /// Empty span when no gradient has been accumulated yet.
    std::span<const double> grad() const;
    /// Allocates a zeroed buffer on first use.
    std::span<double> mutable_grad() const;
    void zero_grad();

    /// Reverse-mode sweep from a scalar output (seed 1).
    void backward() const;

    /// Copy of the values without graph history.
    Tensor detach() const;

    /// Identity of the underlying storage.
    const void* id() const { return node_.get(); }

private:
    struct Node;
    std::shared_ptr<Node> node_;
};

/// While alive on the current thread, ops record no backward closures.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

}  // namespace pbsn
