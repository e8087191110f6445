#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pbsn/tensor.hpp"

namespace pbsn {

/// Prototype head architectures:
///   I     cosine of spatially pooled features
///   II-A  per-position cosine, spatial mean
///   II-B  per-position best-matching prototype position, spatial mean
///   III-A/III-B  softmax attention over the II-A/II-B map weighting raw
///                feature products, then a nonnegative channel reduction
///   III-C separate attention maps for the input and prototype positions
enum class HeadKind { I, IIA, IIB, IIIA, IIIB, IIIC };

std::string to_string(HeadKind kind);
/// Accepts "I", "II-A", "II-B", "III-A", "III-B", "III-C".
HeadKind parse_head_kind(std::string_view text);
inline constexpr HeadKind kAllHeadKinds[] = {HeadKind::I,    HeadKind::IIA,  HeadKind::IIB,
                                             HeadKind::IIIA, HeadKind::IIIB, HeadKind::IIIC};

bool is_attention_head(HeadKind kind);
/// II-B, III-B and III-C match each input position against its best
/// prototype position.
bool uses_spatial_max(HeadKind kind);

struct HeadModel {
    HeadKind kind = HeadKind::I;
    Tensor weight;          // [classes, K]
    Tensor bias;            // [classes]
    Tensor channel_weight;  // [C], Head III only; kept >= 0

    /// Fan-in uniform linear weights, zero bias, channel weights drawn from
    /// [0, 2/C] so the initial channel reduction is roughly a mean.
    static HeadModel initialize(HeadKind kind, std::size_t classes, std::size_t prototypes,
                                std::size_t channels, std::uint64_t seed);

    std::size_t classes() const { return weight.dim(0); }
    std::size_t prototypes() const { return weight.dim(1); }
    std::vector<Tensor> parameters() const;
    /// Projects channel weights onto [0, inf).
    void clip_channel_weights();
    HeadModel clone() const;
};

// ---------------------------------------------------------------------------
// Differentiable similarity primitives. Feature tensors are [N,C,H,W]; the
// spatial grid is flattened row-major into S = H*W positions.

/// out[b,k,s] = sum_c x[b,c,s] * p[k,c,s]  ->  [B,K,S]
Tensor position_similarity(const Tensor& x, const Tensor& p);

struct MaxSimilarity {
    Tensor values;                       // [B,K,S]
    std::vector<std::uint32_t> argmax;   // [B,K,S] flat key position, first max wins
};

/// values[b,k,s] = max_t sum_c query[b,c,s] * keys[k,c,t]. Gradient flows
/// only through the selected t.
MaxSimilarity max_similarity(const Tensor& query, const Tensor& keys);

/// out[b,k,c] = sum_s w[b,k,s] * x[b,c,s] * p[k,c,j(b,k,s)] with j = s when
/// `index` is empty, else j = index[(b*K + k)*S + s].  ->  [B,K,C]
Tensor attended_product(const Tensor& weights, const Tensor& x, const Tensor& p,
                        std::span<const std::uint32_t> index = {});

/// out[b,k] = (1/S) sum_s sum_c (x[b,c,s] - p[k,c,j(b,k,s)])^2  ->  [B,K]
Tensor paired_sq_distance(const Tensor& x, const Tensor& p,
                          std::span<const std::uint32_t> index = {});

// ---------------------------------------------------------------------------
// Single-pair similarity functions on raw features.

/// Cosine of two channel vectors; 0 if either has (near) zero norm.
double sim_I(std::span<const double> gx, std::span<const double> gp);
/// [C,H,W] x [C,H,W] -> [H,W] cosine at matching positions.
Tensor sim_IIA(const Tensor& fx, const Tensor& fp);

struct SpatialMax {
    Tensor map;                                          // [H,W]
    std::vector<std::pair<std::size_t, std::size_t>> argmax;  // per (h,w): (h', w') in fp
};
/// Best cosine over all prototype positions for every input position.
SpatialMax sim_IIB(const Tensor& fx, const Tensor& fp);
/// Softmax over all H*W entries of a map.
Tensor attention(const Tensor& s);
/// [C]: sum_hw a * fx * fp at matching positions.
Tensor sim_IIIA(const Tensor& fx, const Tensor& fp, const Tensor& a);
/// [C]: sum_hw a * fx(h,w) * fp(h_max, w_max).
Tensor sim_IIIB(const Tensor& fx, const Tensor& fp, const Tensor& a,
                std::span<const std::pair<std::size_t, std::size_t>> argmax);
/// Prototype-side attention: softmax over prototype positions of the best
/// cosine against any input position.
Tensor attn_IIIC(const Tensor& fx, const Tensor& fp);
Tensor sim_IIIC(const Tensor& fx, const Tensor& fp, const Tensor& a_input, const Tensor& a_proto);

// ---------------------------------------------------------------------------

/// Everything a head computes for a batch against K prototypes.
struct HeadOutput {
    HeadKind kind = HeadKind::I;
    Tensor logits;      // [B, classes]
    Tensor z;           // [B, K], input of the linear layer
    Tensor x_hat;       // normalised input features ([B,C,1,1] pooled for Head I)
    Tensor p_hat;       // normalised prototype features
    Tensor similarity;  // Head I: [B,K] cosine; others: [B,K,S] II-A or II-B map
    std::vector<std::uint32_t> argmax;  // [B,K,S] prototype position per input position
    Tensor attention;         // Head III: [B,K,S] input-side attention
    Tensor proto_attention;   // Head III-C: [B,K,S] prototype-side attention
    /// Head III-C: [K,B,S], input position chosen for each prototype position.
    std::vector<std::uint32_t> proto_argmax;
    Tensor attended;          // Head III: [B,K,C]

    std::size_t batch() const { return z.dim(0); }
    std::size_t prototypes() const { return z.dim(1); }
};

/// Runs the head on encoder outputs fx [B,C,H,W] and prototype features
/// fp [K,C,H,W]. Throws ConfigError when shapes do not fit the model.
HeadOutput head_forward(const Tensor& fx, const Tensor& fp, const HeadModel& model);

/// Per-prototype view of one sample of a HeadOutput.
struct SimilarityRecord {
    double z = 0.0;
    std::optional<Tensor> map;  // [H,W] similarity map (Head II/III)
    std::optional<std::vector<std::pair<std::size_t, std::size_t>>> argmax;
    std::optional<Tensor> attention;        // [H,W]
    std::optional<Tensor> proto_attention;  // [H,W], III-C
};

std::vector<SimilarityRecord> similarity_records(const HeadOutput& out, std::size_t sample,
                                                 std::size_t feature_height,
                                                 std::size_t feature_width);

}  // namespace pbsn
