#include "pbsn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <spdlog/spdlog.h>

#include "pbsn/errors.hpp"

namespace pbsn::ops {
namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw DimensionError(msg);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                        shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

// Views a [C,H,W] or [N,C,H,W] tensor as (N, C, H, W).
struct Spatial {
    std::size_t n, c, h, w;
    bool batched;
};

Spatial spatial_dims(const Tensor& t, const char* op) {
    if (t.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2), false};
    if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3), true};
    throw DimensionError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " +
                         shape_string(t.shape()));
}

using Lanes = double __attribute__((vector_size(32)));

Lanes load_lanes(const double* p) {
    Lanes v;
    std::memcpy(&v, p, sizeof v);
    return v;
}

void store_lanes(double* p, Lanes v) { std::memcpy(p, &v, sizeof v); }

// Streams rows of b through four output rows at a time; best for narrow c.
void gemm_rows(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t m,
               std::size_t k, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        double* __restrict c0 = c + i * n;
        double* __restrict c1 = c0 + n;
        double* __restrict c2 = c1 + n;
        double* __restrict c3 = c2 + n;
        for (std::size_t l = 0; l < k; ++l) {
            const double a0 = a[i * k + l], a1 = a[(i + 1) * k + l];
            const double a2 = a[(i + 2) * k + l], a3 = a[(i + 3) * k + l];
            const double* __restrict row = b + l * n;
            for (std::size_t j = 0; j < n; ++j) {
                c0[j] += a0 * row[j];
                c1[j] += a1 * row[j];
                c2[j] += a2 * row[j];
                c3[j] += a3 * row[j];
            }
        }
    }
    for (; i < m; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
            const double al = a[i * k + l];
            for (std::size_t j = 0; j < n; ++j) c[i * n + j] += al * b[l * n + j];
        }
    }
}

// c[i,j] += sum_l a[i,l] * b[l,j] with a [m,k], b [k,n], c [m,n], all row-major.
// Every c[i,j] sums over l in ascending order whatever its position, so the
// result does not depend on tiling, vector width or alignment.
void gemm_accumulate(const double* __restrict a, const double* __restrict b, double* __restrict c,
                     std::size_t m, std::size_t k, std::size_t n) {
    if (n < 256) {
        gemm_rows(a, b, c, m, k, n);
        return;
    }
    constexpr std::size_t kChunk = 128;
    const std::size_t m_full = m - m % 4, n_full = n - n % 8;
    for (std::size_t j0 = 0; j0 < n_full; j0 += kChunk) {
        const std::size_t j1 = std::min(n_full, j0 + kChunk);
        for (std::size_t i = 0; i < m_full; i += 4) {
            const double* a0 = a + i * k;
            const double* a1 = a0 + k;
            const double* a2 = a1 + k;
            const double* a3 = a2 + k;
            for (std::size_t j = j0; j < j1; j += 8) {
                double* r0 = c + i * n + j;
                double* r1 = r0 + n;
                double* r2 = r1 + n;
                double* r3 = r2 + n;
                Lanes c00 = load_lanes(r0), c01 = load_lanes(r0 + 4), c10 = load_lanes(r1), c11 = load_lanes(r1 + 4);
                Lanes c20 = load_lanes(r2), c21 = load_lanes(r2 + 4), c30 = load_lanes(r3), c31 = load_lanes(r3 + 4);
                for (std::size_t l = 0; l < k; ++l) {
                    const Lanes b0 = load_lanes(b + l * n + j), b1 = load_lanes(b + l * n + j + 4);
                    const Lanes x0 = Lanes{} + a0[l], x1 = Lanes{} + a1[l];
                    const Lanes x2 = Lanes{} + a2[l], x3 = Lanes{} + a3[l];
                    c00 += x0 * b0;
                    c01 += x0 * b1;
                    c10 += x1 * b0;
                    c11 += x1 * b1;
                    c20 += x2 * b0;
                    c21 += x2 * b1;
                    c30 += x3 * b0;
                    c31 += x3 * b1;
                }
                store_lanes(r0, c00);
                store_lanes(r0 + 4, c01);
                store_lanes(r1, c10);
                store_lanes(r1 + 4, c11);
                store_lanes(r2, c20);
                store_lanes(r2 + 4, c21);
                store_lanes(r3, c30);
                store_lanes(r3 + 4, c31);
            }
        }
    }
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t j_start = i < m_full ? n_full : 0;
        for (std::size_t l = 0; l < k; ++l) {
            const double al = a[i * k + l];
            for (std::size_t j = j_start; j < n; ++j) c[i * n + j] += al * b[l * n + j];
        }
    }
}

void accumulate(const Tensor& target, std::span<const double> delta) {
    auto g = target.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t pad) {
    const auto in = spatial_dims(input, "conv2d");
    require(kernel.rank() == 4, "conv2d: kernel must be [C_out,C_in,kh,kw], got " +
                                    shape_string(kernel.shape()));
    require(stride >= 1, "conv2d: stride must be >= 1");
    const std::size_t co = kernel.dim(0), ci = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    require(ci == in.c, "conv2d: input has " + std::to_string(in.c) + " channels, kernel expects " +
                            std::to_string(ci));
    require(kh <= in.h + 2 * pad && kw <= in.w + 2 * pad,
            "conv2d: kernel larger than padded input");
    if (bias.defined()) {
        require(bias.rank() == 1 && bias.dim(0) == co, "conv2d: bias must be [C_out]");
    }
    const std::size_t ho = (in.h + 2 * pad - kh) / stride + 1;
    const std::size_t wo = (in.w + 2 * pad - kw) / stride + 1;
    const std::size_t positions = ho * wo;
    const std::size_t rows = ci * kh * kw;
    const std::size_t cols = in.n * positions;

    // im2col: col(r, n*P + q), r = (c*kh + i)*kw + j
    auto col = std::make_shared<std::vector<double>>(rows * cols, 0.0);
    const auto x = input.values();
    for (std::size_t n = 0; n < in.n; ++n) {
        for (std::size_t c = 0; c < ci; ++c) {
            const double* plane = x.data() + (n * ci + c) * in.h * in.w;
            for (std::size_t i = 0; i < kh; ++i) {
                for (std::size_t j = 0; j < kw; ++j) {
                    double* row = col->data() + ((c * kh + i) * kw + j) * cols + n * positions;
                    for (std::size_t oy = 0; oy < ho; ++oy) {
                        const long iy = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
                        if (iy < 0 || iy >= static_cast<long>(in.h)) continue;
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                            const long ix =
                                static_cast<long>(ox * stride + j) - static_cast<long>(pad);
                            if (ix < 0 || ix >= static_cast<long>(in.w)) continue;
                            row[oy * wo + ox] = plane[iy * in.w + ix];
                        }
                    }
                }
            }
        }
    }

    std::vector<double> prod(co * cols, 0.0);
    gemm_accumulate(kernel.values().data(), col->data(), prod.data(), co, rows, cols);
    std::vector<double> out(in.n * co * positions);
    for (std::size_t n = 0; n < in.n; ++n) {
        for (std::size_t o = 0; o < co; ++o) {
            const double b = bias.defined() ? bias.values()[o] : 0.0;
            const double* src = prod.data() + o * cols + n * positions;
            double* dst = out.data() + (n * co + o) * positions;
            for (std::size_t q = 0; q < positions; ++q) dst[q] = src[q] + b;
        }
    }

    Shape shape = in.batched ? Shape{in.n, co, ho, wo} : Shape{co, ho, wo};
    return Tensor::from_op(
        "conv2d", std::move(shape), std::move(out), {input, kernel, bias},
        [input, kernel, bias, col, in, co, rows, cols, positions, kh, kw, ho, wo, stride,
         pad](std::span<const double> g) mutable {
            std::vector<double> gm(co * cols);
            for (std::size_t n = 0; n < in.n; ++n) {
                for (std::size_t o = 0; o < co; ++o) {
                    const double* src = g.data() + (n * co + o) * positions;
                    std::copy(src, src + positions, gm.data() + o * cols + n * positions);
                }
            }
            if (kernel.requires_grad()) {
                std::vector<double> colt(cols * rows);
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < cols; ++c) colt[c * rows + r] = (*col)[r * cols + c];
                }
                std::vector<double> acc(co * rows, 0.0);
                gemm_accumulate(gm.data(), colt.data(), acc.data(), co, cols, rows);
                auto dk = kernel.mutable_grad();
                for (std::size_t i = 0; i < acc.size(); ++i) dk[i] += acc[i];
            }
            if (bias.defined() && bias.requires_grad()) {
                auto db = bias.mutable_grad();
                for (std::size_t o = 0; o < co; ++o) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) acc += gm[o * cols + c];
                    db[o] += acc;
                }
            }
            if (input.requires_grad()) {
                const auto w = kernel.values();
                std::vector<double> wt(rows * co);
                for (std::size_t o = 0; o < co; ++o) {
                    for (std::size_t r = 0; r < rows; ++r) wt[r * co + o] = w[o * rows + r];
                }
                std::vector<double> dcol(rows * cols, 0.0);
                gemm_accumulate(wt.data(), gm.data(), dcol.data(), rows, co, cols);
                auto dx = input.mutable_grad();
                const std::size_t ci = rows / (kh * kw);
                for (std::size_t n = 0; n < in.n; ++n) {
                    for (std::size_t c = 0; c < ci; ++c) {
                        double* plane = dx.data() + (n * ci + c) * in.h * in.w;
                        for (std::size_t i = 0; i < kh; ++i) {
                            for (std::size_t j = 0; j < kw; ++j) {
                                const double* row =
                                    dcol.data() + ((c * kh + i) * kw + j) * cols + n * positions;
                                for (std::size_t oy = 0; oy < ho; ++oy) {
                                    const long iy = static_cast<long>(oy * stride + i) -
                                                    static_cast<long>(pad);
                                    if (iy < 0 || iy >= static_cast<long>(in.h)) continue;
                                    for (std::size_t ox = 0; ox < wo; ++ox) {
                                        const long ix = static_cast<long>(ox * stride + j) -
                                                        static_cast<long>(pad);
                                        if (ix < 0 || ix >= static_cast<long>(in.w)) continue;
                                        plane[iy * in.w + ix] += row[oy * wo + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
}

Tensor relu(const Tensor& t) {
    const auto x = t.values();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    return Tensor::from_op("relu", t.shape(), std::move(out), {t},
                           [t](std::span<const double> g) mutable {
                               const auto x = t.values();
                               auto d = t.mutable_grad();
                               for (std::size_t i = 0; i < d.size(); ++i) {
                                   if (x[i] > 0.0) d[i] += g[i];
                               }
                           });
}

Tensor avgpool_spatial(const Tensor& t) {
    const auto s = spatial_dims(t, "avgpool_spatial");
    const std::size_t area = s.h * s.w;
    require(area > 0, "avgpool_spatial: empty spatial grid");
    const auto x = t.values();
    std::vector<double> out(s.n * s.c, 0.0);
    for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
        double acc = 0.0;
        for (std::size_t q = 0; q < area; ++q) acc += x[nc * area + q];
        out[nc] = acc / static_cast<double>(area);
    }
    Shape shape = s.batched ? Shape{s.n, s.c} : Shape{s.c};
    return Tensor::from_op("avgpool_spatial", std::move(shape), std::move(out), {t},
                           [t, area](std::span<const double> g) mutable {
                               auto d = t.mutable_grad();
                               const double inv = 1.0 / static_cast<double>(area);
                               for (std::size_t nc = 0; nc < g.size(); ++nc) {
                                   for (std::size_t q = 0; q < area; ++q) {
                                       d[nc * area + q] += g[nc] * inv;
                                   }
                               }
                           });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require(weight.rank() == 2, "linear: weight must be [m,n]");
    const std::size_t m = weight.dim(0), n = weight.dim(1);
    require(x.rank() == 1 || x.rank() == 2, "linear: input must be [n] or [N,n]");
    const std::size_t batch = x.rank() == 2 ? x.dim(0) : 1;
    const std::size_t width = x.rank() == 2 ? x.dim(1) : x.dim(0);
    require(width == n, "linear: input width " + std::to_string(width) +
                            " does not match weight columns " + std::to_string(n));
    if (bias.defined()) require(bias.rank() == 1 && bias.dim(0) == m, "linear: bias must be [m]");

    std::vector<double> out(batch * m);
    const auto xv = x.values();
    const auto wv = weight.values();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t j = 0; j < m; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) acc += xv[b * n + i] * wv[j * n + i];
            out[b * m + j] = acc + (bias.defined() ? bias.values()[j] : 0.0);
        }
    }
    Shape shape = x.rank() == 2 ? Shape{batch, m} : Shape{m};
    return Tensor::from_op("linear", std::move(shape), std::move(out), {x, weight, bias},
                           [x, weight, bias, batch, m, n](std::span<const double> g) mutable {
                               if (x.requires_grad()) {
                                   const auto wv = weight.values();
                                   auto dx = x.mutable_grad();
                                   for (std::size_t r = 0; r < batch; ++r) {
                                       for (std::size_t j = 0; j < m; ++j) {
                                           const double gj = g[r * m + j];
                                           for (std::size_t i = 0; i < n; ++i) dx[r * n + i] += gj * wv[j * n + i];
                                       }
                                   }
                               }
                               if (weight.requires_grad()) {
                                   const auto xv = x.values();
                                   auto dw = weight.mutable_grad();
                                   for (std::size_t r = 0; r < batch; ++r) {
                                       for (std::size_t j = 0; j < m; ++j) {
                                           const double gj = g[r * m + j];
                                           for (std::size_t i = 0; i < n; ++i) dw[j * n + i] += gj * xv[r * n + i];
                                       }
                                   }
                               }
                               if (bias.defined() && bias.requires_grad()) {
                                   auto db = bias.mutable_grad();
                                   for (std::size_t b = 0; b < batch; ++b) {
                                       for (std::size_t j = 0; j < m; ++j) db[j] += g[b * m + j];
                                   }
                               }
                           });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul: operands must be rank 2");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    require(b.dim(0) == k, "matmul: inner extents differ " + shape_string(a.shape()) + " x " +
                               shape_string(b.shape()));
    std::vector<double> out(m * n, 0.0);
    const auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t l = 0; l < k; ++l) acc += av[i * k + l] * bv[l * n + j];
            out[i * n + j] = acc;
        }
    }
    return Tensor::from_op("matmul", {m, n}, std::move(out), {a, b},
                           [a, b, m, k, n](std::span<const double> g) mutable {
                               if (a.requires_grad()) {
                                   const auto bv = b.values();
                                   auto da = a.mutable_grad();
                                   for (std::size_t i = 0; i < m; ++i) {
                                       for (std::size_t l = 0; l < k; ++l) {
                                           double acc = 0.0;
                                           for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[l * n + j];
                                           da[i * k + l] += acc;
                                       }
                                   }
                               }
                               if (b.requires_grad()) {
                                   const auto av = a.values();
                                   auto db = b.mutable_grad();
                                   for (std::size_t i = 0; i < m; ++i) {
                                       for (std::size_t l = 0; l < k; ++l) {
                                           const double ail = av[i * k + l];
                                           for (std::size_t j = 0; j < n; ++j) db[l * n + j] += ail * g[i * n + j];
                                       }
                                   }
                               }
                           });
}

namespace {

std::vector<double> softmax_rows(std::span<const double> x, std::size_t width) {
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < x.size() / width; ++r) {
        const double* src = x.data() + r * width;
        double* dst = out.data() + r * width;
        const double peak = *std::max_element(src, src + width);
        double total = 0.0;
        for (std::size_t i = 0; i < width; ++i) total += (dst[i] = std::exp(src[i] - peak));
        for (std::size_t i = 0; i < width; ++i) dst[i] /= total;
    }
    return out;
}

std::size_t last_extent(const Tensor& t, const char* op) {
    require(t.rank() >= 1 && t.shape().back() > 0,
            std::string(op) + ": needs a non-empty last axis");
    return t.shape().back();
}

}  // namespace

Tensor softmax(const Tensor& t) {
    const std::size_t width = last_extent(t, "softmax");
    auto out = softmax_rows(t.values(), width);
    auto probs = std::make_shared<std::vector<double>>(out);
    return Tensor::from_op("softmax", t.shape(), std::move(out), {t},
                           [t, probs, width](std::span<const double> g) mutable {
                               auto d = t.mutable_grad();
                               const auto& p = *probs;
                               for (std::size_t r = 0; r < p.size() / width; ++r) {
                                   const std::size_t o = r * width;
                                   double dot = 0.0;
                                   for (std::size_t i = 0; i < width; ++i) dot += g[o + i] * p[o + i];
                                   for (std::size_t i = 0; i < width; ++i) {
                                       d[o + i] += p[o + i] * (g[o + i] - dot);
                                   }
                               }
                           });
}

Tensor log_softmax(const Tensor& t) {
    const std::size_t width = last_extent(t, "log_softmax");
    const auto x = t.values();
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < x.size() / width; ++r) {
        const double* src = x.data() + r * width;
        const double peak = *std::max_element(src, src + width);
        double total = 0.0;
        for (std::size_t i = 0; i < width; ++i) total += std::exp(src[i] - peak);
        const double lse = peak + std::log(total);
        for (std::size_t i = 0; i < width; ++i) out[r * width + i] = src[i] - lse;
    }
    auto probs = std::make_shared<std::vector<double>>(softmax_rows(x, width));
    return Tensor::from_op("log_softmax", t.shape(), std::move(out), {t},
                           [t, probs, width](std::span<const double> g) mutable {
                               auto d = t.mutable_grad();
                               const auto& p = *probs;
                               for (std::size_t r = 0; r < p.size() / width; ++r) {
                                   const std::size_t o = r * width;
                                   double total = 0.0;
                                   for (std::size_t i = 0; i < width; ++i) total += g[o + i];
                                   for (std::size_t i = 0; i < width; ++i) {
                                       d[o + i] += g[o + i] - p[o + i] * total;
                                   }
                               }
                           });
}

Tensor l2_normalize_channels(const Tensor& t) {
    const auto s = spatial_dims(t, "l2_normalize_channels");
    const std::size_t area = s.h * s.w;
    const auto x = t.values();
    std::vector<double> out(x.size(), 0.0);
    auto inv_norm = std::make_shared<std::vector<double>>(s.n * area, 0.0);
    std::size_t degenerate = 0;
    for (std::size_t n = 0; n < s.n; ++n) {
        const double* base = x.data() + n * s.c * area;
        for (std::size_t q = 0; q < area; ++q) {
            double sq = 0.0;
            for (std::size_t c = 0; c < s.c; ++c) sq += base[c * area + q] * base[c * area + q];
            const double norm = std::sqrt(sq);
            if (norm <= kNormEpsilon) {
                ++degenerate;
                continue;
            }
            (*inv_norm)[n * area + q] = 1.0 / norm;
            for (std::size_t c = 0; c < s.c; ++c) {
                out[n * s.c * area + c * area + q] = base[c * area + q] / norm;
            }
        }
    }
    if (degenerate > 0) {
        spdlog::debug("l2_normalize_channels: {} zero-norm positions mapped to zero", degenerate);
    }
    auto normalized = std::make_shared<std::vector<double>>(out);
    return Tensor::from_op(
        "l2_normalize_channels", t.shape(), std::move(out), {t},
        [t, s, area, inv_norm, normalized](std::span<const double> g) mutable {
            auto d = t.mutable_grad();
            const auto& y = *normalized;
            for (std::size_t n = 0; n < s.n; ++n) {
                const std::size_t base = n * s.c * area;
                for (std::size_t q = 0; q < area; ++q) {
                    const double inv = (*inv_norm)[n * area + q];
                    if (inv == 0.0) continue;
                    double dot = 0.0;
                    for (std::size_t c = 0; c < s.c; ++c) {
                        dot += y[base + c * area + q] * g[base + c * area + q];
                    }
                    for (std::size_t c = 0; c < s.c; ++c) {
                        const std::size_t i = base + c * area + q;
                        d[i] += (g[i] - y[i] * dot) * inv;
                    }
                }
            }
        });
}

Tensor reshape(const Tensor& t, Shape shape) {
    require(numel(shape) == t.size(), "reshape: cannot view " + shape_string(t.shape()) + " as " +
                                          shape_string(shape));
    std::vector<double> out(t.values().begin(), t.values().end());
    return Tensor::from_op("reshape", std::move(shape), std::move(out), {t},
                           [t](std::span<const double> g) mutable { accumulate(t, g); });
}

Tensor permute01(const Tensor& t) {
    require(t.rank() >= 2, "permute01: rank must be >= 2");
    const std::size_t a = t.dim(0), b = t.dim(1);
    const std::size_t inner = t.size() / (a * b);
    const auto x = t.values();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < a; ++i) {
        for (std::size_t j = 0; j < b; ++j) {
            std::copy_n(x.data() + (i * b + j) * inner, inner, out.data() + (j * a + i) * inner);
        }
    }
    Shape shape = t.shape();
    std::swap(shape[0], shape[1]);
    return Tensor::from_op("permute01", std::move(shape), std::move(out), {t},
                           [t, a, b, inner](std::span<const double> g) mutable {
                               auto d = t.mutable_grad();
                               for (std::size_t i = 0; i < a; ++i) {
                                   for (std::size_t j = 0; j < b; ++j) {
                                       for (std::size_t k = 0; k < inner; ++k) {
                                           d[(i * b + j) * inner + k] += g[(j * a + i) * inner + k];
                                       }
                                   }
                               }
                           });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    return Tensor::from_op("add", a.shape(), std::move(out), {a, b},
                           [a, b](std::span<const double> g) mutable {
                               if (a.requires_grad()) accumulate(a, g);
                               if (b.requires_grad()) accumulate(b, g);
                           });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    return Tensor::from_op("sub", a.shape(), std::move(out), {a, b},
                           [a, b](std::span<const double> g) mutable {
                               if (a.requires_grad()) accumulate(a, g);
                               if (b.requires_grad()) {
                                   auto d = b.mutable_grad();
                                   for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
                               }
                           });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    return Tensor::from_op("mul", a.shape(), std::move(out), {a, b},
                           [a, b](std::span<const double> g) mutable {
                               if (a.requires_grad()) {
                                   auto d = a.mutable_grad();
                                   for (std::size_t i = 0; i < d.size(); ++i) {
                                       d[i] += g[i] * b.values()[i];
                                   }
                               }
                               if (b.requires_grad()) {
                                   auto d = b.mutable_grad();
                                   for (std::size_t i = 0; i < d.size(); ++i) {
                                       d[i] += g[i] * a.values()[i];
                                   }
                               }
                           });
}

Tensor scale(const Tensor& t, double factor) {
    std::vector<double> out(t.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.values()[i] * factor;
    return Tensor::from_op("scale", t.shape(), std::move(out), {t},
                           [t, factor](std::span<const double> g) mutable {
                               auto d = t.mutable_grad();
                               for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * factor;
                           });
}

Tensor mul_last_axis(const Tensor& t, const Tensor& v) {
    require(v.rank() == 1 && t.rank() >= 1 && t.shape().back() == v.dim(0),
            "mul_last_axis: vector length must match last axis of " + shape_string(t.shape()));
    const std::size_t width = v.dim(0);
    std::vector<double> out(t.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.values()[i] * v.values()[i % width];
    return Tensor::from_op("mul_last_axis", t.shape(), std::move(out), {t, v},
                           [t, v, width](std::span<const double> g) mutable {
                               if (t.requires_grad()) {
                                   auto d = t.mutable_grad();
                                   for (std::size_t i = 0; i < d.size(); ++i) {
                                       d[i] += g[i] * v.values()[i % width];
                                   }
                               }
                               if (v.requires_grad()) {
                                   auto d = v.mutable_grad();
                                   for (std::size_t i = 0; i < g.size(); ++i) {
                                       d[i % width] += g[i] * t.values()[i];
                                   }
                               }
                           });
}

Tensor sum(const Tensor& t) {
    double acc = 0.0;
    for (double v : t.values()) acc += v;
    return Tensor::from_op("sum", Shape{}, {acc}, {t}, [t](std::span<const double> g) mutable {
        auto d = t.mutable_grad();
        for (auto& v : d) v += g[0];
    });
}

Tensor mean(const Tensor& t) {
    require(t.size() > 0, "mean: empty tensor");
    return scale(sum(t), 1.0 / static_cast<double>(t.size()));
}

Tensor mean_last_axis(const Tensor& t) {
    const std::size_t width = last_extent(t, "mean_last_axis");
    const std::size_t rows = t.size() / width;
    std::vector<double> out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t i = 0; i < width; ++i) acc += t.values()[r * width + i];
        out[r] = acc / static_cast<double>(width);
    }
    Shape shape(t.shape().begin(), t.shape().end() - 1);
    return Tensor::from_op("mean_last_axis", std::move(shape), std::move(out), {t},
                           [t, width](std::span<const double> g) mutable {
                               auto d = t.mutable_grad();
                               const double inv = 1.0 / static_cast<double>(width);
                               for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i / width] * inv;
                           });
}


}  // namespace pbsn::ops
