#include "pbsn/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "pbsn/errors.hpp"
#include "pbsn/rng.hpp"

namespace pbsn {

namespace {

using Rgb = std::array<double, 3>;
using Region = std::function<bool(double dy, double dx)>;

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

/// Fills `out` (3*size*size, channel-major) with a dark, weakly tinted,
/// noisy background.
void paint_background(std::span<double> out, std::size_t size, double clutter, Rng& rng) {
    const double base = rng.uniform(0.05, 0.2);
    Rgb tint;
    for (auto& t : tint) t = base + rng.uniform(-0.03, 0.03);
    const std::size_t plane = size * size;
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < plane; ++i) {
            out[c * plane + i] = clamp01(tint[c] + rng.uniform(-clutter, clutter));
        }
    }
}

void paint_region(std::span<double> out, std::size_t size, const Region& inside, double cy,
                  double cx, const Rgb& color, double noise, Rng& rng) {
    const std::size_t plane = size * size;
    for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
            const double dy = static_cast<double>(y) + 0.5 - cy;
            const double dx = static_cast<double>(x) + 0.5 - cx;
            if (!inside(dy, dx)) continue;
            for (std::size_t c = 0; c < 3; ++c) {
                out[c * plane + y * size + x] = clamp01(color[c] + rng.uniform(-noise, noise));
            }
        }
    }
}

Region class_region(std::size_t family, double r, bool vertical) {
    switch (family) {
        case 0: return [r](double dy, double dx) { return std::hypot(dy, dx) <= r; };
        case 1: {
            const double h = 0.8 * r;
            return [h](double dy, double dx) { return std::abs(dy) <= h && std::abs(dx) <= h; };
        }
        case 2:
            return [r, vertical](double dy, double dx) {
                if (std::abs(dy) > r || std::abs(dx) > r) return false;
                const double u = (vertical ? dx : dy) + r;
                return static_cast<long>(std::floor(u / 2.5)) % 2 == 0;
            };
        case 3:
            return [r](double dy, double dx) {
                if (std::abs(dy) > r || std::abs(dx) > r) return false;
                const double cell = r / 2.0;
                const long a = static_cast<long>(std::floor((dy + r) / cell));
                const long b = static_cast<long>(std::floor((dx + r) / cell));
                return (a + b) % 2 == 0;
            };
        default: {
            const double t = 0.3 * r;
            return [r, t](double dy, double dx) {
                return (std::abs(dy) <= r && std::abs(dx) <= t) ||
                       (std::abs(dx) <= r && std::abs(dy) <= t);
            };
        }
    }
}

Region disjoint_region(std::size_t family, double r) {
    switch (family) {
        case 0:
            return [r](double dy, double dx) {
                const double d = std::hypot(dy, dx);
                return d <= r && d >= 0.55 * r;
            };
        case 1:
            return [r](double dy, double dx) {
                return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) / 2.0;
            };
        case 2: return [r](double dy, double dx) { return std::abs(dy) + std::abs(dx) <= r; };
        case 3: {
            const double t = 0.25 * r;
            return [r, t](double dy, double dx) {
                return std::max(std::abs(dy), std::abs(dx)) <= r &&
                       std::abs(std::abs(dx) - std::abs(dy)) <= t;
            };
        }
        default: {
            const double spacing = r / 1.5;
            return [r, spacing](double dy, double dx) {
                if (std::abs(dy) > r || std::abs(dx) > r) return false;
                const double ey = std::remainder(dy, spacing);
                const double ex = std::remainder(dx, spacing);
                return std::hypot(ey, ex) <= spacing / 3.0;
            };
        }
    }
}

void validate(const SyntheticSpec& spec) {
    if (spec.classes < 2 || spec.classes > kMaxSyntheticClasses) {
        throw ConfigError("dataset.classes must lie in [2, " + std::to_string(kMaxSyntheticClasses) + "]");
    }
    if (spec.size < 8) throw ConfigError("dataset.size must be at least 8");
}

Dataset draw(const SyntheticSpec& spec, std::size_t count, bool disjoint) {
    validate(spec);
    const std::size_t plane = spec.size * spec.size;
    const double scale = static_cast<double>(spec.size) / 32.0;
    const double center = static_cast<double>(spec.size) / 2.0;
    Dataset data;
    data.classes = spec.classes;
    std::vector<double> pixels(count * 3 * plane);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t label = disjoint ? 0 : i / spec.n_per_class;
        Rng rng = Rng::derive(spec.seed ^ (disjoint ? 0xd15c0ULL : 0ULL), i);
        std::span<double> out(pixels.data() + i * 3 * plane, 3 * plane);
        paint_background(out, spec.size, spec.clutter, rng);

        const double cy = center + rng.uniform(-5.0, 5.0) * scale;
        const double cx = center + rng.uniform(-5.0, 5.0) * scale;
        const double r = rng.uniform(7.0, 10.0) * scale;
        const bool vertical = rng.uniform() < 0.5;
        double hue;
        if (disjoint) {
            hue = rng.uniform();
        } else {
            hue = static_cast<double>(label) / static_cast<double>(kMaxSyntheticClasses) +
                  rng.uniform(-spec.hue_spread, spec.hue_spread);
            hue -= std::floor(hue);
        }
        const auto rgb = hsv_to_rgb(hue, rng.uniform(0.55, 0.95), rng.uniform(0.65, 1.0));
        const std::size_t family = disjoint ? rng.index(5) : label;
        const Region region = disjoint ? disjoint_region(family, r) : class_region(family, r, vertical);
        paint_region(out, spec.size, region, cy, cx, rgb, spec.clutter / 2.0, rng);
        data.labels.push_back(static_cast<int>(label));
    }
    data.images = Tensor({count, 3, spec.size, spec.size}, std::move(pixels));
    return data;
}

double segment_distance(double py, double px, double ay, double ax, double by, double bx) {
    const double vy = by - ay, vx = bx - ax;
    const double len2 = vy * vy + vx * vx;
    double t = len2 > 0.0 ? ((py - ay) * vy + (px - ax) * vx) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return std::hypot(py - (ay + t * vy), px - (ax + t * vx));
}

struct Stroke {
    std::array<double, 6> vertices;  // three (y,x) points
    Rgb color;
};

std::vector<Stroke> draw_strokes(std::size_t height, std::size_t width, std::size_t thickness,
                                 std::size_t count, std::uint64_t seed) {
    if (thickness == 0) throw ParameterError("gen_strokes: thickness must be >= 1");
    Rng rng = Rng::derive(seed, 0x57e0cULL);
    const double half = static_cast<double>(thickness) / 2.0;
    const double my = std::min(half, static_cast<double>(height) / 2.0);
    const double mx = std::min(half, static_cast<double>(width) / 2.0);
    std::vector<Stroke> strokes(count);
    for (auto& s : strokes) {
        double y = rng.uniform(my, static_cast<double>(height) - my);
        double x = rng.uniform(mx, static_cast<double>(width) - mx);
        s.vertices[0] = y;
        s.vertices[1] = x;
        for (std::size_t seg = 1; seg <= 2; ++seg) {
            const double angle = rng.uniform(0.0, 2.0 * M_PI);
            const double len = rng.uniform(2.0, 5.0);
            y = std::clamp(y + len * std::sin(angle), my, static_cast<double>(height) - my);
            x = std::clamp(x + len * std::cos(angle), mx, static_cast<double>(width) - mx);
            s.vertices[2 * seg] = y;
            s.vertices[2 * seg + 1] = x;
        }
        for (auto& c : s.color) c = rng.uniform();
    }
    return strokes;
}

bool covered(const Stroke& s, double py, double px, double half) {
    const auto& v = s.vertices;
    return segment_distance(py, px, v[0], v[1], v[2], v[3]) <= half ||
           segment_distance(py, px, v[2], v[3], v[4], v[5]) <= half;
}

}  // namespace

Dataset gen_dataset(const SyntheticSpec& spec) {
    return draw(spec, spec.classes * spec.n_per_class, false);
}

Dataset gen_disjoint_dataset(const SyntheticSpec& spec, std::size_t count) {
    return draw(spec, count, true);
}

Tensor gen_strokes(const Tensor& image, std::size_t thickness, std::size_t count, std::uint64_t seed) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw DimensionError("gen_strokes: expected [3,H,W], got " + shape_string(image.shape()));
    }
    const std::size_t H = image.dim(1), W = image.dim(2);
    std::vector<double> out(image.values().begin(), image.values().end());
    const double half = static_cast<double>(thickness) / 2.0;
    for (const auto& s : draw_strokes(H, W, thickness, count, seed)) {
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) {
                if (!covered(s, static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5, half)) continue;
                for (std::size_t c = 0; c < 3; ++c) out[(c * H + y) * W + x] = s.color[c];
            }
        }
    }
    return Tensor(image.shape(), std::move(out));
}

double stroke_coverage(std::size_t height, std::size_t width, std::size_t thickness,
                       std::size_t count, std::uint64_t seed) {
    const auto strokes = draw_strokes(height, width, thickness, count, seed);
    const double half = static_cast<double>(thickness) / 2.0;
    std::size_t hit = 0;
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            hit += std::any_of(strokes.begin(), strokes.end(), [&](const Stroke& s) {
                return covered(s, static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5, half);
            });
        }
    }
    return static_cast<double>(hit) / static_cast<double>(height * width);
}

std::array<double, 3> rgb_to_hsv(double r, double g, double b) {
    const double mx = std::max({r, g, b});
    const double mn = std::min({r, g, b});
    const double d = mx - mn;
    double h = 0.0;
    if (d > 0.0) {
        if (mx == r) {
            h = (g - b) / d;
        } else if (mx == g) {
            h = 2.0 + (b - r) / d;
        } else {
            h = 4.0 + (r - g) / d;
        }
        h /= 6.0;
        h -= std::floor(h);
    }
    return {h, mx > 0.0 ? d / mx : 0.0, mx};
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    h -= std::floor(h);
    const double scaled = h * 6.0;
    const auto sector = static_cast<int>(std::floor(scaled)) % 6;
    const double f = scaled - std::floor(scaled);
    const double p = v * (1.0 - s);
    const double q = v * (1.0 - s * f);
    const double t = v * (1.0 - s * (1.0 - f));
    switch (sector) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

Tensor gen_altered_color(const Tensor& image, std::uint64_t seed, const ColorShift& shift) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw DimensionError("gen_altered_color: expected [3,H,W], got " + shape_string(image.shape()));
    }
    Rng rng = Rng::derive(seed, 0xc010bULL);
    const double delta = rng.uniform(shift.min_hue_shift, shift.max_hue_shift);
    const std::size_t plane = image.dim(1) * image.dim(2);
    const auto in = image.values();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < plane; ++i) {
        auto [h, s, v] = rgb_to_hsv(in[i], in[plane + i], in[2 * plane + i]);
        s = std::max(s, shift.min_saturation);
        v = std::max(v, shift.min_value);
        const auto rgb = hsv_to_rgb(h + delta, s, v);
        for (std::size_t c = 0; c < 3; ++c) out[c * plane + i] = clamp01(rgb[c]);
    }
    return Tensor(image.shape(), std::move(out));
}

namespace {

Dataset map_images(const Dataset& data, const std::function<Tensor(const Tensor&, std::size_t)>& fn) {
    Dataset out = data;
    std::vector<double> pixels;
    pixels.reserve(data.images.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto img = fn(data.image(i), i);
        pixels.insert(pixels.end(), img.values().begin(), img.values().end());
    }
    out.images = Tensor(data.images.shape(), std::move(pixels));
    return out;
}

std::uint64_t image_seed(std::uint64_t seed, std::size_t i) { return Rng::derive(seed, i).bits(); }

}  // namespace

Dataset with_strokes(const Dataset& data, std::size_t thickness, std::size_t count,
                     std::uint64_t seed) {
    return map_images(data, [&](const Tensor& img, std::size_t i) {
        return gen_strokes(img, thickness, count, image_seed(seed, i));
    });
}

Dataset with_altered_color(const Dataset& data, std::uint64_t seed, const ColorShift& shift) {
    return map_images(data, [&](const Tensor& img, std::size_t i) {
        return gen_altered_color(img, image_seed(seed, i), shift);
    });
}

}  // namespace pbsn
