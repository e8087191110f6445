#include "pbsn/losses.hpp"

#include <algorithm>
#include <cmath>

#include "pbsn/errors.hpp"
#include "pbsn/ops.hpp"

namespace pbsn {

void LossWeights::validate() const {
    for (double w : {distill, mask, prototype}) {
        if (!std::isfinite(w) || w < 0.0) {
            throw ConfigError("loss weights must be finite and nonnegative");
        }
    }
}

Tensor cross_entropy(const Tensor& logits, const Tensor& targets) {
    if (logits.shape() != targets.shape() || logits.rank() < 1 || logits.rank() > 2) {
        throw DimensionError("cross_entropy: logits " + shape_string(logits.shape()) +
                             " and targets " + shape_string(targets.shape()) + " must match");
    }
    const std::size_t width = logits.shape().back();
    const std::size_t rows = logits.size() / width;
    const Tensor softmax = ops::softmax(logits.detach());
    auto probs =
        std::make_shared<std::vector<double>>(softmax.values().begin(), softmax.values().end());
    const auto t = targets.values();
    double loss = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (t[i] != 0.0) loss -= t[i] * std::log((*probs)[i] + kLogEpsilon);
    }
    loss /= static_cast<double>(rows);
    auto target_copy = std::make_shared<std::vector<double>>(t.begin(), t.end());
    return Tensor::from_op(
        "cross_entropy", Shape{}, {loss}, {logits},
        [logits, probs, target_copy, width, rows](std::span<const double> g) mutable {
            auto d = logits.mutable_grad();
            const auto& p = *probs;
            const auto& t = *target_copy;
            const double scale = g[0] / static_cast<double>(rows);
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t o = r * width;
                // dL/dp_i = -t_i / (p_i + eps); chain through the softmax Jacobian.
                double dot = 0.0;
                for (std::size_t i = 0; i < width; ++i) {
                    dot += p[o + i] * (-t[o + i] / (p[o + i] + kLogEpsilon));
                }
                for (std::size_t i = 0; i < width; ++i) {
                    const double dp = -t[o + i] / (p[o + i] + kLogEpsilon);
                    d[o + i] += scale * p[o + i] * (dp - dot);
                }
            }
        });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
    const std::size_t width = logits.shape().empty() ? 0 : logits.shape().back();
    const std::size_t rows = width ? logits.size() / width : 0;
    if (labels.size() != rows) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(rows) + " rows");
    }
    std::vector<double> onehot(logits.size(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= width) {
            throw DimensionError("cross_entropy: label out of range");
        }
        onehot[r * width + static_cast<std::size_t>(labels[r])] = 1.0;
    }
    return cross_entropy(logits, Tensor(logits.shape(), std::move(onehot)));
}

Tensor aux_mask_loss(const Tensor& masked_logits, std::span<const int> predicted) {
    return cross_entropy(masked_logits, predicted);
}

Tensor signed_pair_mean(const Tensor& distances, std::span<const int> sample_labels,
                        std::span<const int> prototype_labels) {
    if (distances.rank() != 2 || distances.dim(0) != sample_labels.size() ||
        distances.dim(1) != prototype_labels.size()) {
        throw DimensionError("prototype loss: distance matrix " + shape_string(distances.shape()) +
                             " does not match label counts");
    }
    const std::size_t B = distances.dim(0), K = distances.dim(1);
    auto same = std::make_shared<std::vector<char>>(B * K);
    const auto d = distances.values();
    double acc = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t k = 0; k < K; ++k) {
            const bool s = sample_labels[b] == prototype_labels[k];
            (*same)[b * K + k] = s;
            acc += s ? d[b * K + k] : 1.0 / (d[b * K + k] + kInverseDistanceEpsilon);
        }
    }
    const double inv_pairs = 1.0 / static_cast<double>(B * K);
    return Tensor::from_op("prototype_loss", Shape{}, {acc * inv_pairs}, {distances},
                           [distances, same, inv_pairs](std::span<const double> g) mutable {
                               const auto d = distances.values();
                               auto dd = distances.mutable_grad();
                               for (std::size_t i = 0; i < dd.size(); ++i) {
                                   if ((*same)[i]) {
                                       dd[i] += g[0] * inv_pairs;
                                   } else {
                                       const double e = d[i] + kInverseDistanceEpsilon;
                                       dd[i] -= g[0] * inv_pairs / (e * e);
                                   }
                               }
                           });
}

Tensor J_head1(const HeadOutput& out, std::span<const int> sample_labels,
               std::span<const int> prototype_labels) {
    return signed_pair_mean(paired_sq_distance(out.x_hat, out.p_hat), sample_labels,
                            prototype_labels);
}

Tensor J_headA(const HeadOutput& out, std::span<const int> sample_labels,
               std::span<const int> prototype_labels) {
    return signed_pair_mean(paired_sq_distance(out.x_hat, out.p_hat), sample_labels,
                            prototype_labels);
}

Tensor J_headB(const HeadOutput& out, std::span<const int> sample_labels,
               std::span<const int> prototype_labels) {
    if (out.argmax.empty()) throw ConfigError("J_headB: head output carries no argmax record");
    return signed_pair_mean(paired_sq_distance(out.x_hat, out.p_hat, out.argmax), sample_labels,
                            prototype_labels);
}

Tensor J_headC(const HeadOutput& out, std::span<const int> sample_labels,
               std::span<const int> prototype_labels) {
    if (out.proto_argmax.empty()) throw ConfigError("J_headC: head output carries no III-C record");
    auto input_side = J_headB(out, sample_labels, prototype_labels);
    // Prototype positions matched against their best input position: [K,B] -> [B,K].
    auto reverse = ops::permute01(paired_sq_distance(out.p_hat, out.x_hat, out.proto_argmax));
    auto proto_side = signed_pair_mean(reverse, sample_labels, prototype_labels);
    return ops::add(input_side, proto_side);
}

Tensor prototype_loss(const HeadOutput& out, std::span<const int> sample_labels,
                      std::span<const int> prototype_labels) {
    switch (out.kind) {
        case HeadKind::I: return J_head1(out, sample_labels, prototype_labels);
        case HeadKind::IIA:
        case HeadKind::IIIA: return J_headA(out, sample_labels, prototype_labels);
        case HeadKind::IIB:
        case HeadKind::IIIB: return J_headB(out, sample_labels, prototype_labels);
        case HeadKind::IIIC: return J_headC(out, sample_labels, prototype_labels);
    }
    throw ConfigError("prototype_loss: unknown head kind");
}

LossTerms total_loss(const Tensor& logits, std::span<const int> labels, const Tensor& teacher_probs,
                     const Tensor& masked_logits, std::span<const int> predicted,
                     const Tensor& prototype_term, const LossWeights& weights) {
    auto guarded = [](const char* name, auto&& compute) -> Tensor {
        Tensor t;
        try {
            t = compute();
        } catch (const NumericalError& e) {
            throw TrainingError(std::string("loss term '") + name + "': " + e.what());
        }
        if (!std::isfinite(t.item())) {
            throw TrainingError(std::string("loss term '") + name + "' is not finite");
        }
        return t;
    };
    LossTerms terms;
    terms.supervised = guarded("supervised", [&] { return cross_entropy(logits, labels); });
    terms.distill = guarded("distillation", [&] { return cross_entropy(logits, teacher_probs); });
    terms.mask = guarded("mask", [&] { return aux_mask_loss(masked_logits, predicted); });
    terms.prototype = guarded("prototype", [&] { return prototype_term; });
    terms.total = ops::add(
        ops::add(terms.supervised, ops::scale(terms.distill, weights.distill)),
        ops::add(ops::scale(terms.mask, weights.mask), ops::scale(terms.prototype, weights.prototype)));
    return terms;
}

std::vector<int> argmax_rows(const Tensor& logits) {
    const std::size_t width = logits.shape().back();
    std::vector<int> out(logits.size() / width);
    const auto v = logits.values();
    for (std::size_t r = 0; r < out.size(); ++r) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < width; ++i) {
            if (v[r * width + i] > v[r * width + best]) best = i;
        }
        out[r] = static_cast<int>(best);
    }
    return out;
}

}  // namespace pbsn
