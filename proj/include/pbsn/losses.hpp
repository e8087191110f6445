#pragma once

#include <span>
#include <vector>

#include "pbsn/heads.hpp"
#include "pbsn/tensor.hpp"

namespace pbsn {

inline constexpr double kLogEpsilon = 1e-12;
/// Added to a distance before it is inverted for different-class pairs.
inline constexpr double kInverseDistanceEpsilon = 1e-6;

struct LossWeights {
    double distill = 1.0;    // lambda1
    double mask = 1.0;       // lambda2
    double prototype = 0.1;  // lambda3

    /// Throws ConfigError unless every weight is finite and nonnegative.
    void validate() const;
};

/// Mean over rows of -sum_i t_i log(softmax(y)_i + eps). `targets` is a
/// constant [N,C] probability matrix (or [C] for a single row).
Tensor cross_entropy(const Tensor& logits, const Tensor& targets);
/// Hard-label form; labels index the last axis.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Cross-entropy of softmax(y_mask) against the unmasked prediction.
Tensor aux_mask_loss(const Tensor& masked_logits, std::span<const int> predicted);

/// Mean over all (sample, prototype) pairs of d^alpha with alpha = +1 for
/// same-class pairs and -1 (with kInverseDistanceEpsilon) otherwise.
Tensor signed_pair_mean(const Tensor& distances, std::span<const int> sample_labels,
                        std::span<const int> prototype_labels);

/// Prototype-distance terms. All take the HeadOutput of the same batch.
Tensor J_head1(const HeadOutput& out, std::span<const int> sample_labels,
               std::span<const int> prototype_labels);
Tensor J_headA(const HeadOutput& out, std::span<const int> sample_labels,
               std::span<const int> prototype_labels);
Tensor J_headB(const HeadOutput& out, std::span<const int> sample_labels,
               std::span<const int> prototype_labels);
Tensor J_headC(const HeadOutput& out, std::span<const int> sample_labels,
               std::span<const int> prototype_labels);
/// Dispatches on out.kind.
Tensor prototype_loss(const HeadOutput& out, std::span<const int> sample_labels,
                      std::span<const int> prototype_labels);

struct LossTerms {
    Tensor total;
    Tensor supervised;
    Tensor distill;
    Tensor mask;
    Tensor prototype;
};

/// CE(labels, y) + l1 CE(soft, y) + l2 CE(pred, y_mask) + l3 J.
/// Throws TrainingError naming the first non-finite term.
LossTerms total_loss(const Tensor& logits, std::span<const int> labels, const Tensor& teacher_probs,
                     const Tensor& masked_logits, std::span<const int> predicted,
                     const Tensor& prototype_term, const LossWeights& weights);

/// argmax over the last axis of a [N,C] matrix, first max wins.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace pbsn
