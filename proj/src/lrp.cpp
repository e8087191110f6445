#include "pbsn/lrp.hpp"

#include <cmath>

#include "pbsn/errors.hpp"
#include "pbsn/losses.hpp"
#include "pbsn/ops.hpp"

namespace pbsn {

void LrpParams::validate() const {
    if (!(alpha > 0.0) || !(beta >= 0.0) || std::abs(alpha - beta - 1.0) > 1e-12) {
        throw ParameterError("lrp: need alpha - beta = 1, alpha > 0, beta >= 0 (got alpha=" +
                             std::to_string(alpha) + ", beta=" + std::to_string(beta) + ")");
    }
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) {
        throw ParameterError("lrp: epsilon must be finite and >= 0");
    }
}

double stabilize(double z, double epsilon) { return z + (z >= 0.0 ? epsilon : -epsilon); }

std::vector<double> lrp_linear_eps(std::span<const double> input, std::span<const double> weight,
                                   std::span<const double> bias, std::span<const double> relevance,
                                   double epsilon) {
    const std::size_t n = input.size(), m = relevance.size();
    if (weight.size() != m * n || (!bias.empty() && bias.size() != m)) {
        throw DimensionError("lrp_linear_eps: weight/bias sizes do not match " + std::to_string(m) +
                             "x" + std::to_string(n));
    }
    std::vector<double> out(n, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
        if (relevance[j] == 0.0) continue;
        double z = bias.empty() ? 0.0 : bias[j];
        for (std::size_t d = 0; d < n; ++d) z += input[d] * weight[j * n + d];
        const double denom = stabilize(z, epsilon);
        if (denom == 0.0) continue;
        const double ratio = relevance[j] / denom;
        for (std::size_t d = 0; d < n; ++d) out[d] += input[d] * weight[j * n + d] * ratio;
    }
    return out;
}

Tensor lrp_conv_alphabeta(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                          std::size_t stride, std::size_t pad, const Tensor& relevance,
                          const LrpParams& params) {
    params.validate();
    if (input.rank() != 3 || kernel.rank() != 4 || kernel.dim(1) != input.dim(0)) {
        throw DimensionError("lrp_conv_alphabeta: input " + shape_string(input.shape()) +
                             " does not fit kernel " + shape_string(kernel.shape()));
    }
    const std::size_t Ci = input.dim(0), H = input.dim(1), W = input.dim(2);
    const std::size_t Co = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
    const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
    if (relevance.shape() != Shape{Co, Ho, Wo}) {
        throw DimensionError("lrp_conv_alphabeta: relevance " + shape_string(relevance.shape()) +
                             " does not match the layer output " + shape_string({Co, Ho, Wo}));
    }
    const auto a = input.values();
    const auto w = kernel.values();
    const auto r = relevance.values();
    const bool has_bias = bias.defined();
    std::vector<double> out(a.size(), 0.0);

    auto for_each_tap = [&](std::size_t o, std::size_t y, std::size_t x, auto&& fn) {
        for (std::size_t c = 0; c < Ci; ++c) {
            for (std::size_t u = 0; u < kh; ++u) {
                const long iy = static_cast<long>(y * stride + u) - static_cast<long>(pad);
                if (iy < 0 || iy >= static_cast<long>(H)) continue;
                for (std::size_t v = 0; v < kw; ++v) {
                    const long ix = static_cast<long>(x * stride + v) - static_cast<long>(pad);
                    if (ix < 0 || ix >= static_cast<long>(W)) continue;
                    const std::size_t in = (c * H + static_cast<std::size_t>(iy)) * W +
                                           static_cast<std::size_t>(ix);
                    fn(in, a[in] * w[((o * Ci + c) * kh + u) * kw + v]);
                }
            }
        }
    };

    for (std::size_t o = 0; o < Co; ++o) {
        for (std::size_t y = 0; y < Ho; ++y) {
            for (std::size_t x = 0; x < Wo; ++x) {
                const double rj = r[(o * Ho + y) * Wo + x];
                if (rj == 0.0) continue;
                double pos = 0.0, neg = 0.0;
                if (has_bias) {
                    const double b = bias.values()[o];
                    (b > 0.0 ? pos : neg) += b;
                }
                for_each_tap(o, y, x, [&](std::size_t, double z) {
                    if (z > 0.0) {
                        pos += z;
                    } else {
                        neg += z;
                    }
                });
                double alpha = params.alpha, beta = params.beta;
                if (neg == 0.0) {
                    alpha = 1.0;
                    beta = 0.0;
                } else if (pos == 0.0) {
                    alpha = 0.0;
                    beta = -1.0;
                }
                const double cp = pos != 0.0 ? alpha * rj / pos : 0.0;
                const double cn = neg != 0.0 ? beta * rj / neg : 0.0;
                for_each_tap(o, y, x, [&](std::size_t in, double z) {
                    out[in] += z > 0.0 ? z * cp : -z * cn;
                });
            }
        }
    }
    return Tensor(input.shape(), std::move(out));
}

Tensor lrp_encoder(const Encoder& encoder, const std::vector<Tensor>& trace, const Tensor& relevance,
                   const LrpParams& params) {
    const auto& kernels = encoder.kernels();
    if (trace.size() != kernels.size() + 1) {
        throw DimensionError("lrp_encoder: trace has " + std::to_string(trace.size()) +
                             " activations for " + std::to_string(kernels.size()) + " blocks");
    }
    Tensor r = relevance;
    for (std::size_t l = kernels.size(); l-- > 0;) {
        const Tensor bias = encoder.config().bias ? encoder.biases()[l] : Tensor{};
        r = lrp_conv_alphabeta(trace[l], kernels[l], bias, encoder.config().blocks[l].stride,
                               encoder.padding(l), r, params);
    }
    return r;
}

LrpRecord lrp_record(const StudentModel& student, const Tensor& image) {
    NoGradGuard guard;
    LrpRecord rec;
    rec.image = image.detach();
    rec.trace = student.encoder.trace(rec.image);
    rec.prototype_features = student.prototype_features();
    const auto& fx = rec.trace.back();
    rec.output = head_forward(ops::reshape(fx, {1, fx.dim(0), fx.dim(1), fx.dim(2)}),
                              rec.prototype_features, student.head);
    rec.predicted = argmax_rows(rec.output.logits)[0];
    rec.logit = rec.output.logits.values()[static_cast<std::size_t>(rec.predicted)];
    if (!std::isfinite(rec.logit)) throw NumericalError("lrp: non-finite logit");
    rec.start_relevance = rec.logit;
    return rec;
}

namespace {

/// Relevance of every z_k from the predicted logit (epsilon rule with bias).
std::vector<double> relevance_at_z(const StudentModel& student, const LrpRecord& rec,
                                   const LrpParams& params) {
    const std::size_t K = student.prototypes();
    const auto c = static_cast<std::size_t>(rec.predicted);
    const auto w = student.head.weight.values().subspan(c * K, K);
    const std::vector<double> bias{student.head.bias.values()[c]};
    const std::vector<double> start{rec.start_relevance};
    return lrp_linear_eps(rec.output.z.values(), w, bias, start, params.epsilon);
}

std::vector<double> feature_slice(const Tensor& t, std::size_t n, std::size_t len) {
    const auto v = t.values().subspan(n * len, len);
    return {v.begin(), v.end()};
}

}  // namespace

Tensor relevance_at_similarity(const StudentModel& student, const LrpRecord& record, std::size_t k,
                               const LrpParams& params) {
    params.validate();
    const std::size_t K = student.prototypes();
    if (k >= K) throw DimensionError("lrp: prototype index out of range");
    const double rz = relevance_at_z(student, record, params)[k];
    const auto& out = record.output;
    const double zk = out.z.values()[k];
    switch (out.kind) {
        case HeadKind::I:
            // z = ReLU(s): relevance passes the rectifier unchanged.
            return Tensor({1}, std::vector<double>{rz});
        case HeadKind::IIA:
        case HeadKind::IIB: {
            const std::size_t S = out.similarity.dim(2);
            const auto s = out.similarity.values().subspan(k * S, S);
            const double denom = stabilize(zk, params.epsilon);
            std::vector<double> r(S, 0.0);
            if (denom != 0.0) {
                for (std::size_t i = 0; i < S; ++i) r[i] = s[i] / static_cast<double>(S) / denom * rz;
            }
            return Tensor({S}, std::move(r));
        }
        default: {
            const std::size_t C = out.attended.dim(2);
            const auto a = out.attended.values().subspan(k * C, C);
            const auto v = student.head.channel_weight.values();
            const double denom = stabilize(zk, params.epsilon);
            std::vector<double> r(C, 0.0);
            if (denom != 0.0) {
                for (std::size_t c = 0; c < C; ++c) r[c] = a[c] * v[c] / denom * rz;
            }
            return Tensor({C}, std::move(r));
        }
    }
}

Tensor channel_sum(const Tensor& t) {
    if (t.rank() != 3) throw DimensionError("channel_sum: expected [C,H,W]");
    const std::size_t C = t.dim(0), plane = t.dim(1) * t.dim(2);
    std::vector<double> out(plane, 0.0);
    const auto v = t.values();
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < plane; ++i) out[i] += v[c * plane + i];
    }
    return Tensor({t.dim(1), t.dim(2)}, std::move(out));
}

RelevancePair heatmaps(const StudentModel& student, const LrpRecord& record, std::size_t k,
                       const LrpParams& params) {
    RelevancePair pair;
    pair.k = k;
    pair.predicted = record.predicted;
    pair.prototype_label = student.store.labels.at(k);
    pair.r_sim = relevance_at_similarity(student, record, k, params);

    const auto& out = record.output;
    const Tensor& fx_t = record.trace.back();
    const std::size_t C = fx_t.dim(0), H = fx_t.dim(1), W = fx_t.dim(2), S = H * W;
    const auto fx = fx_t.values();
    const auto fp = feature_slice(record.prototype_features, k, C * S);
    const auto rs = pair.r_sim.values();
    const double eps = params.epsilon;
    std::vector<double> rx(C * S, 0.0), rp(C * S, 0.0);

    auto proto_pos = [&](std::size_t s) -> std::size_t {
        if (out.kind == HeadKind::IIB || out.kind == HeadKind::IIIB) {
            if (out.argmax.empty()) throw DimensionError("lrp: max head without argmax record");
            return out.argmax[k * S + s];
        }
        return s;
    };

    switch (out.kind) {
        case HeadKind::I: {
            // s = <g^x, g^p>; normalisation passes relevance; average pooling
            // redistributes it by the epsilon rule.
            const auto gx_hat = out.x_hat.values();
            const auto gp_hat = feature_slice(out.p_hat, k, C);
            const double denom = stabilize(out.similarity.values()[k], eps);
            std::vector<double> rg(C, 0.0);
            if (denom != 0.0) {
                for (std::size_t c = 0; c < C; ++c) rg[c] = gx_hat[c] * gp_hat[c] / denom * rs[0];
            }
            auto pool_back = [&](std::span<const double> f, std::vector<double>& dst) {
                for (std::size_t c = 0; c < C; ++c) {
                    double g = 0.0;
                    for (std::size_t s = 0; s < S; ++s) g += f[c * S + s];
                    g /= static_cast<double>(S);
                    const double d = stabilize(g, eps);
                    if (d == 0.0) continue;
                    for (std::size_t s = 0; s < S; ++s) {
                        dst[c * S + s] = f[c * S + s] / static_cast<double>(S) / d * rg[c];
                    }
                }
            };
            pool_back(fx, rx);
            pool_back(fp, rp);
            break;
        }
        case HeadKind::IIA:
        case HeadKind::IIB: {
            const auto xh = out.x_hat.values();
            const auto ph = feature_slice(out.p_hat, k, C * S);
            const auto sim = out.similarity.values().subspan(k * S, S);
            for (std::size_t s = 0; s < S; ++s) {
                const double denom = stabilize(sim[s], eps);
                if (denom == 0.0 || rs[s] == 0.0) continue;
                const std::size_t t = proto_pos(s);
                for (std::size_t c = 0; c < C; ++c) {
                    const double share = xh[c * S + s] * ph[c * S + t] / denom * rs[s];
                    rx[c * S + s] += share;
                    rp[c * S + t] += share;
                }
            }
            break;
        }
        default: {
            // Attention weights are frozen constants; the attended product is
            // linear in each feature factor.
            const auto att = out.attention.values().subspan(k * S, S);
            std::vector<double> weights(att.begin(), att.end());
            if (out.kind == HeadKind::IIIC) {
                const auto pa = out.proto_attention.values().subspan(k * S, S);
                for (std::size_t s = 0; s < S; ++s) weights[s] *= pa[s];
            }
            const auto a = out.attended.values().subspan(k * C, C);
            for (std::size_t c = 0; c < C; ++c) {
                const double denom = stabilize(a[c], eps);
                if (denom == 0.0 || rs[c] == 0.0) continue;
                for (std::size_t s = 0; s < S; ++s) {
                    const std::size_t t = proto_pos(s);
                    const double share = weights[s] * fx[c * S + s] * fp[c * S + t] / denom * rs[c];
                    rx[c * S + s] += share;
                    rp[c * S + t] += share;
                }
            }
            break;
        }
    }

    pair.input_features = Tensor({C, H, W}, std::move(rx));
    pair.proto_features = Tensor({C, H, W}, std::move(rp));
    pair.input_pixels = lrp_encoder(student.encoder, record.trace, pair.input_features, params);
    const auto proto_trace = student.encoder.trace(
        Tensor(record.image.shape(), feature_slice(student.store.images, k, record.image.size())));
    pair.proto_pixels = lrp_encoder(student.encoder, proto_trace, pair.proto_features, params);
    pair.input_map = channel_sum(pair.input_pixels);
    pair.proto_map = channel_sum(pair.proto_pixels);
    return pair;
}

}  // namespace pbsn
