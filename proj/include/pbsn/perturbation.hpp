#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string_view>
#include <vector>

#include "pbsn/dataset.hpp"
#include "pbsn/lrp.hpp"
#include "pbsn/student.hpp"

namespace pbsn {

enum class PerturbPolicy { Relevance, Random };
PerturbPolicy parse_policy(std::string_view text);
const char* to_string(PerturbPolicy policy);

struct PerturbConfig {
    std::size_t region = 4;
    std::size_t steps = 15;
    PerturbPolicy policy = PerturbPolicy::Relevance;
    std::uint64_t seed = 0;
    LrpParams lrp;
};

struct PerturbationCurve {
    std::size_t region = 0;
    std::size_t steps = 0;
    PerturbPolicy policy = PerturbPolicy::Relevance;
    std::size_t samples = 0;
    /// Mean predicted-class logit after 0..steps tiles were replaced.
    std::vector<double> mean_logit;

    /// (1/(L+1)) sum_k (f_0 - f_k).
    double aoc() const;
    void write_csv(std::ostream& os) const;
};

/// Tile order for one heatmap [H,W]: descending summed |relevance|, ties by
/// tile index. Throws ConfigError unless `region` divides H and W.
std::vector<std::size_t> tiles_by_relevance(const Tensor& heatmap, std::size_t region);

/// Replaces the tiles order[0..count) of an image [C,H,W] with `fill`.
Tensor fill_tiles(const Tensor& image, std::span<const std::size_t> order, std::size_t count,
                  std::size_t region, std::span<const double> fill);

/// Region perturbation with the input-side heatmap of each sample's top-1
/// prototype pair (largest u_k). `fill` is the per-channel fill value.
PerturbationCurve perturb_eval(const StudentModel& student, const Dataset& data,
                               std::span<const double> fill, const PerturbConfig& config);

}  // namespace pbsn
