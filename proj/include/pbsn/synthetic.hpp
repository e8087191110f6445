#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

#include "pbsn/dataset.hpp"
#include "pbsn/tensor.hpp"

namespace pbsn {

/// Shape families drawn by gen_dataset, in class order.
enum class ShapeFamily { Circle, Box, Stripes, Checker, Cross };
inline constexpr std::size_t kMaxSyntheticClasses = 5;

struct SyntheticSpec {
    std::size_t classes = 4;
    std::size_t n_per_class = 500;
    std::size_t size = 32;
    /// Half-width of each class's hue band; bands are spaced 1/5 apart, so
    /// values above 0.1 make neighbouring classes overlap in colour.
    double hue_spread = 0.14;
    /// Amplitude of the per-pixel background noise.
    double clutter = 0.06;
    std::uint64_t seed = 0;
};

/// Coloured shapes on a dark noisy background, one family per class, with
/// jittered position, size and hue. Images are [N,3,size,size] in [0,1],
/// class-major order. Deterministic in the spec (per-sample RNG streams).
Dataset gen_dataset(const SyntheticSpec& spec);

/// Out-of-distribution stand-in: a disjoint family (rings, triangles,
/// diamonds, diagonal crosses, dot grids) with unconstrained hues. Labels
/// are all 0; `classes` of the result equals spec.classes so the set can be
/// fed to the same models.
Dataset gen_disjoint_dataset(const SyntheticSpec& spec, std::size_t count);

/// Overlays `count` random two-segment polyline strokes of pixel thickness
/// `thickness`, each in one random colour. [3,H,W] in and out.
Tensor gen_strokes(const Tensor& image, std::size_t thickness, std::size_t count,
                   std::uint64_t seed);
/// Fraction of pixels a stroke draw would cover (test and report helper).
double stroke_coverage(std::size_t height, std::size_t width, std::size_t thickness,
                       std::size_t count, std::uint64_t seed);

struct ColorShift {
    double min_saturation = 0.6;
    double min_value = 0.6;
    double min_hue_shift = 0.25;
    double max_hue_shift = 0.75;
};

/// Raises saturation and value to the floors and rotates hue by a random
/// shift in [min_hue_shift, max_hue_shift].
Tensor gen_altered_color(const Tensor& image, std::uint64_t seed, const ColorShift& shift = {});

std::array<double, 3> rgb_to_hsv(double r, double g, double b);
std::array<double, 3> hsv_to_rgb(double h, double s, double v);

/// Applies a per-image corruption to every image of a dataset, using
/// Rng::derive(seed, i) seeds.
Dataset with_strokes(const Dataset& data, std::size_t thickness, std::size_t count,
                     std::uint64_t seed);
Dataset with_altered_color(const Dataset& data, std::uint64_t seed, const ColorShift& shift = {});

}  // namespace pbsn
