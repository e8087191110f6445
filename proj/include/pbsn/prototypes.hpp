#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "pbsn/dataset.hpp"
#include "pbsn/tensor.hpp"

namespace pbsn {

/// Value every importance weight starts from and is reset to on replacement.
inline constexpr double kInitialImportance = 1.0;

/// The prototype set P drawn from a training set S, plus the remainder D.
struct PrototypeStore {
    std::vector<std::size_t> ids;   // sample indices into S, one per prototype
    std::vector<int> labels;        // class of each prototype
    Tensor images;                  // [K,C0,H0,W0]
    Tensor importance;              // M, parameter [K]
    std::vector<std::size_t> pool;  // D, ascending sample indices not in P
    std::size_t classes = 0;

    std::size_t size() const { return ids.size(); }
    std::vector<std::size_t> class_histogram() const;

    /// Class-balanced random draw of `per_class` prototypes per class.
    /// Throws ConfigError if a class has fewer than `per_class` samples.
    static PrototypeStore sample(const Dataset& train, std::size_t per_class, std::uint64_t seed);

    /// Replaces prototype `slot` with training sample `id` (which must be in
    /// D) and puts the old prototype back into D.
    void swap_in(std::size_t slot, std::size_t id, const Dataset& train);
    /// Keeps only the listed slots, returning the rest to D.
    void retain(std::span<const std::size_t> slots);
};

/// p-th smallest entry of M (1-based). Throws ParameterError unless 1 <= p <= K.
double threshold(std::span<const double> importance, std::size_t p);

/// {0,1}^K with exactly p zeros: entries below tau are 0, entries above are 1,
/// entries equal to tau are zeroed lowest index first.
std::vector<double> binary_mask(std::span<const double> importance, double tau, std::size_t p);

/// Indices of the zero entries of binary_mask(M, threshold(M, p), p),
/// ascending. Empty when p = 0.
std::vector<std::size_t> lowest_importance(std::span<const double> importance, std::size_t p);

/// Differentiable mask: forward value is binary_mask(reference), gradient
/// with respect to `importance` is the identity (straight-through).
/// `reference` defaults to the current values of `importance`; passing a
/// frozen copy keeps the hard part fixed under finite differences.
Tensor straight_through_mask(const Tensor& importance, std::size_t p,
                             std::span<const double> reference = {});

/// y_mask = W (mask * z) + b for z [K] or [B,K].
Tensor masked_logits(const Tensor& z, const Tensor& mask, const Tensor& weight, const Tensor& bias);

}  // namespace pbsn
