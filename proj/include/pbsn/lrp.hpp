#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "pbsn/encoder.hpp"
#include "pbsn/heads.hpp"
#include "pbsn/student.hpp"
#include "pbsn/tensor.hpp"

namespace pbsn {

struct LrpParams {
    double alpha = 1.7;
    double beta = 0.7;
    double epsilon = 1e-3;

    /// Throws ParameterError unless alpha - beta = 1, alpha > 0, beta >= 0,
    /// epsilon >= 0.
    void validate() const;
};

/// z + epsilon * sign(z), with sign(0) = +1.
double stabilize(double z, double epsilon);

/// Epsilon rule for y = W a + b, W [m,n] row-major, `bias` empty or [m].
/// The bias enters the denominator only, so it absorbs its share.
/// Outputs whose stabilised denominator is exactly 0 pass nothing down.
std::vector<double> lrp_linear_eps(std::span<const double> input, std::span<const double> weight,
                                   std::span<const double> bias, std::span<const double> relevance,
                                   double epsilon);

/// Alpha-beta rule for one conv layer. `input` [C_in,H,W] is the layer's
/// forward input, `relevance` [C_out,H',W'] sits on its (post-ReLU) output.
/// A neuron with no negative contributions spreads its relevance over the
/// positive ones alone (and vice versa), which keeps the layer conservative;
/// a neuron with no contributions at all passes nothing down.
Tensor lrp_conv_alphabeta(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                          std::size_t stride, std::size_t pad, const Tensor& relevance,
                          const LrpParams& params);

/// Propagates feature relevance [C,H,W] back through every encoder block
/// to the pixels. `trace` is Encoder::trace of the same image.
Tensor lrp_encoder(const Encoder& encoder, const std::vector<Tensor>& trace, const Tensor& relevance,
                   const LrpParams& params);

/// Forward quantities of one input that all of its heatmaps share.
struct LrpRecord {
    Tensor image;                     // [C0,H0,W0]
    std::vector<Tensor> trace;        // encoder activations of the image
    Tensor prototype_features;        // [K,C,H,W]
    HeadOutput output;                // batch of one
    int predicted = 0;
    double logit = 0.0;
    /// Relevance placed on the predicted logit; defaults to its value.
    double start_relevance = 0.0;
};

LrpRecord lrp_record(const StudentModel& student, const Tensor& image);

/// Relevance of prototype k's slice of the similarity layer: [1] for Head I
/// (the cosine), [H*W] for Head II (map entries), [C] for Head III (attended
/// similarity channels).
Tensor relevance_at_similarity(const StudentModel& student, const LrpRecord& record, std::size_t k,
                               const LrpParams& params);

struct RelevancePair {
    std::size_t k = 0;
    int predicted = 0;
    int prototype_label = 0;
    double u = 0.0;
    Tensor r_sim;
    Tensor input_features;  // relevance on f(x) [C,H,W]
    Tensor proto_features;  // relevance on f(p_k) [C,H,W]
    Tensor input_pixels;    // [C0,H0,W0]
    Tensor proto_pixels;
    Tensor input_map;       // [H0,W0], channel sum
    Tensor proto_map;
};

/// Paired heatmaps for (x, p_k). `u` is filled by the caller (outlier module).
RelevancePair heatmaps(const StudentModel& student, const LrpRecord& record, std::size_t k,
                       const LrpParams& params);

/// Sums a [C,H,W] tensor over channels.
Tensor channel_sum(const Tensor& t);

}  // namespace pbsn
