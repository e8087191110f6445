#include "pbsn/heads.hpp"

#include <algorithm>
#include <cmath>

#include "pbsn/errors.hpp"
#include "pbsn/ops.hpp"
#include "pbsn/rng.hpp"

namespace pbsn {

namespace {

struct Grid {
    std::size_t n, c, s;
};

Grid grid_of(const Tensor& t, const char* op) {
    if (t.rank() != 4) {
        throw DimensionError(std::string(op) + ": expected [N,C,H,W], got " +
                             shape_string(t.shape()));
    }
    return {t.dim(0), t.dim(1), t.dim(2) * t.dim(3)};
}

Tensor batch_of_one(const Tensor& t) {
    if (t.rank() != 3) throw DimensionError("expected [C,H,W], got " + shape_string(t.shape()));
    return ops::reshape(t, {1, t.dim(0), t.dim(1), t.dim(2)});
}

Tensor as_map(const Tensor& t, std::size_t h, std::size_t w) {
    return Tensor({h, w}, std::vector<double>(t.values().begin(), t.values().end()));
}

}  // namespace

std::string to_string(HeadKind kind) {
    switch (kind) {
        case HeadKind::I: return "I";
        case HeadKind::IIA: return "II-A";
        case HeadKind::IIB: return "II-B";
        case HeadKind::IIIA: return "III-A";
        case HeadKind::IIIB: return "III-B";
        case HeadKind::IIIC: return "III-C";
    }
    return "?";
}

HeadKind parse_head_kind(std::string_view text) {
    for (auto kind : kAllHeadKinds) {
        if (to_string(kind) == text) return kind;
    }
    throw ConfigError("unknown head kind '" + std::string(text) +
                      "' (expected I, II-A, II-B, III-A, III-B or III-C)");
}

bool is_attention_head(HeadKind kind) {
    return kind == HeadKind::IIIA || kind == HeadKind::IIIB || kind == HeadKind::IIIC;
}

bool uses_spatial_max(HeadKind kind) {
    return kind == HeadKind::IIB || kind == HeadKind::IIIB || kind == HeadKind::IIIC;
}

HeadModel HeadModel::initialize(HeadKind kind, std::size_t classes, std::size_t prototypes,
                                std::size_t channels, std::uint64_t seed) {
    if (classes < 2 || prototypes == 0 || channels == 0) {
        throw ConfigError("head: need >= 2 classes, >= 1 prototype and >= 1 channel");
    }
    Rng rng = Rng::derive(seed, 0x4eadULL);
    HeadModel m;
    m.kind = kind;
    const double bound = 1.0 / std::sqrt(static_cast<double>(prototypes));
    std::vector<double> w(classes * prototypes);
    for (auto& v : w) v = rng.uniform(-bound, bound);
    m.weight = Tensor::parameter({classes, prototypes}, std::move(w));
    m.bias = Tensor::parameter({classes}, std::vector<double>(classes, 0.0));
    if (is_attention_head(kind)) {
        std::vector<double> v(channels);
        for (auto& x : v) x = rng.uniform(0.0, 2.0 / static_cast<double>(channels));
        m.channel_weight = Tensor::parameter({channels}, std::move(v));
    }
    return m;
}

std::vector<Tensor> HeadModel::parameters() const {
    std::vector<Tensor> out{weight, bias};
    if (channel_weight.defined()) out.push_back(channel_weight);
    return out;
}

void HeadModel::clip_channel_weights() {
    if (!channel_weight.defined()) return;
    for (auto& v : channel_weight.mutable_values()) v = std::max(v, 0.0);
}

HeadModel HeadModel::clone() const {
    HeadModel m;
    m.kind = kind;
    auto copy = [](const Tensor& t) {
        return Tensor::parameter(t.shape(), std::vector<double>(t.values().begin(), t.values().end()));
    };
    m.weight = copy(weight);
    m.bias = copy(bias);
    if (channel_weight.defined()) m.channel_weight = copy(channel_weight);
    return m;
}

// ---------------------------------------------------------------------------

Tensor position_similarity(const Tensor& x, const Tensor& p) {
    const auto gx = grid_of(x, "position_similarity");
    const auto gp = grid_of(p, "position_similarity");
    if (gx.c != gp.c || x.dim(2) != p.dim(2) || x.dim(3) != p.dim(3)) {
        throw DimensionError("position_similarity: feature shapes differ " +
                             shape_string(x.shape()) + " vs " + shape_string(p.shape()));
    }
    const std::size_t B = gx.n, K = gp.n, C = gx.c, S = gx.s;
    const auto xv = x.values();
    const auto pv = p.values();
    std::vector<double> out(B * K * S, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t k = 0; k < K; ++k) {
            double* o = out.data() + (b * K + k) * S;
            for (std::size_t c = 0; c < C; ++c) {
                const double* xr = xv.data() + (b * C + c) * S;
                const double* pr = pv.data() + (k * C + c) * S;
                for (std::size_t s = 0; s < S; ++s) o[s] += xr[s] * pr[s];
            }
        }
    }
    return Tensor::from_op(
        "position_similarity", {B, K, S}, std::move(out), {x, p},
        [x, p, B, K, C, S](std::span<const double> g) mutable {
            const auto xv = x.values();
            const auto pv = p.values();
            if (x.requires_grad()) {
                auto dx = x.mutable_grad();
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t k = 0; k < K; ++k)
                        for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t s = 0; s < S; ++s)
                                dx[(b * C + c) * S + s] +=
                                    g[(b * K + k) * S + s] * pv[(k * C + c) * S + s];
            }
            if (p.requires_grad()) {
                auto dp = p.mutable_grad();
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t k = 0; k < K; ++k)
                        for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t s = 0; s < S; ++s)
                                dp[(k * C + c) * S + s] +=
                                    g[(b * K + k) * S + s] * xv[(b * C + c) * S + s];
            }
        });
}

MaxSimilarity max_similarity(const Tensor& query, const Tensor& keys) {
    const auto gq = grid_of(query, "max_similarity");
    const auto gk = grid_of(keys, "max_similarity");
    if (gq.c != gk.c) throw DimensionError("max_similarity: channel counts differ");
    if (gq.s == 0 || gk.s == 0) throw DimensionError("max_similarity: empty spatial grid");
    const std::size_t B = gq.n, K = gk.n, C = gq.c, S = gq.s, T = gk.s;

    // Accumulates over channels in ascending order, exactly like
    // position_similarity, so a self-position match reproduces its value bit
    // for bit.
    const auto qv = query.values();
    const auto kv = keys.values();
    MaxSimilarity result;
    std::vector<double> out(B * K * S);
    result.argmax.resize(B * K * S);
    std::vector<double> scores(S * T);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t k = 0; k < K; ++k) {
            std::fill(scores.begin(), scores.end(), 0.0);
            for (std::size_t c = 0; c < C; ++c) {
                const double* qr = qv.data() + (b * C + c) * S;
                const double* kr = kv.data() + (k * C + c) * T;
                for (std::size_t s = 0; s < S; ++s) {
                    const double q = qr[s];
                    double* row = scores.data() + s * T;
                    for (std::size_t t = 0; t < T; ++t) row[t] += q * kr[t];
                }
            }
            for (std::size_t s = 0; s < S; ++s) {
                const double* row = scores.data() + s * T;
                std::size_t best = 0;
                for (std::size_t t = 1; t < T; ++t) {
                    if (row[t] > row[best]) best = t;
                }
                out[(b * K + k) * S + s] = row[best];
                result.argmax[(b * K + k) * S + s] = static_cast<std::uint32_t>(best);
            }
        }
    }
    auto idx = std::make_shared<std::vector<std::uint32_t>>(result.argmax);
    result.values = Tensor::from_op(
        "max_similarity", {B, K, S}, std::move(out), {query, keys},
        [query, keys, idx, B, K, C, S, T](std::span<const double> g) mutable {
            const auto qv = query.values();
            const auto kv = keys.values();
            const bool dq_on = query.requires_grad();
            const bool dk_on = keys.requires_grad();
            std::span<double> dq = dq_on ? query.mutable_grad() : std::span<double>{};
            std::span<double> dk = dk_on ? keys.mutable_grad() : std::span<double>{};
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t k = 0; k < K; ++k) {
                    for (std::size_t s = 0; s < S; ++s) {
                        const std::size_t o = (b * K + k) * S + s;
                        const double go = g[o];
                        if (go == 0.0) continue;
                        const std::size_t t = (*idx)[o];
                        for (std::size_t c = 0; c < C; ++c) {
                            if (dq_on) dq[(b * C + c) * S + s] += go * kv[(k * C + c) * T + t];
                            if (dk_on) dk[(k * C + c) * T + t] += go * qv[(b * C + c) * S + s];
                        }
                    }
                }
            }
        });
    return result;
}

Tensor attended_product(const Tensor& weights, const Tensor& x, const Tensor& p,
                        std::span<const std::uint32_t> index) {
    const auto gx = grid_of(x, "attended_product");
    const auto gp = grid_of(p, "attended_product");
    const std::size_t B = gx.n, K = gp.n, C = gx.c, S = gx.s, T = gp.s;
    if (gp.c != C) throw DimensionError("attended_product: channel counts differ");
    if (weights.shape() != Shape{B, K, S}) {
        throw DimensionError("attended_product: weights must be " + shape_string({B, K, S}) +
                             ", got " + shape_string(weights.shape()));
    }
    if (index.empty() && T != S) {
        throw DimensionError("attended_product: same-position product needs equal grids");
    }
    if (!index.empty() && index.size() != B * K * S) {
        throw DimensionError("attended_product: index must have B*K*S entries");
    }
    auto idx = std::make_shared<std::vector<std::uint32_t>>(index.begin(), index.end());
    auto pos = [idx, K, S](std::size_t b, std::size_t k, std::size_t s) -> std::size_t {
        return idx->empty() ? s : (*idx)[(b * K + k) * S + s];
    };

    const auto wv = weights.values();
    const auto xv = x.values();
    const auto pv = p.values();
    std::vector<double> out(B * K * C, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t k = 0; k < K; ++k) {
            const double* w = wv.data() + (b * K + k) * S;
            for (std::size_t c = 0; c < C; ++c) {
                const double* xr = xv.data() + (b * C + c) * S;
                const double* pr = pv.data() + (k * C + c) * T;
                double acc = 0.0;
                for (std::size_t s = 0; s < S; ++s) acc += w[s] * xr[s] * pr[pos(b, k, s)];
                out[(b * K + k) * C + c] = acc;
            }
        }
    }
    return Tensor::from_op(
        "attended_product", {B, K, C}, std::move(out), {weights, x, p},
        [weights, x, p, pos, B, K, C, S, T](std::span<const double> g) mutable {
            const auto wv = weights.values();
            const auto xv = x.values();
            const auto pv = p.values();
            const bool dw_on = weights.requires_grad();
            const bool dx_on = x.requires_grad();
            const bool dp_on = p.requires_grad();
            std::span<double> dw = dw_on ? weights.mutable_grad() : std::span<double>{};
            std::span<double> dx = dx_on ? x.mutable_grad() : std::span<double>{};
            std::span<double> dp = dp_on ? p.mutable_grad() : std::span<double>{};
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t k = 0; k < K; ++k) {
                    for (std::size_t c = 0; c < C; ++c) {
                        const double go = g[(b * K + k) * C + c];
                        if (go == 0.0) continue;
                        for (std::size_t s = 0; s < S; ++s) {
                            const std::size_t j = pos(b, k, s);
                            const double w = wv[(b * K + k) * S + s];
                            const double xs = xv[(b * C + c) * S + s];
                            const double ps = pv[(k * C + c) * T + j];
                            if (dw_on) dw[(b * K + k) * S + s] += go * xs * ps;
                            if (dx_on) dx[(b * C + c) * S + s] += go * w * ps;
                            if (dp_on) dp[(k * C + c) * T + j] += go * w * xs;
                        }
                    }
                }
            }
        });
}

Tensor paired_sq_distance(const Tensor& x, const Tensor& p, std::span<const std::uint32_t> index) {
    const auto gx = grid_of(x, "paired_sq_distance");
    const auto gp = grid_of(p, "paired_sq_distance");
    const std::size_t B = gx.n, K = gp.n, C = gx.c, S = gx.s, T = gp.s;
    if (gp.c != C) throw DimensionError("paired_sq_distance: channel counts differ");
    if (index.empty() && T != S) {
        throw DimensionError("paired_sq_distance: same-position distance needs equal grids");
    }
    if (!index.empty() && index.size() != B * K * S) {
        throw DimensionError("paired_sq_distance: index must have B*K*S entries");
    }
    auto idx = std::make_shared<std::vector<std::uint32_t>>(index.begin(), index.end());
    auto pos = [idx, K, S](std::size_t b, std::size_t k, std::size_t s) -> std::size_t {
        return idx->empty() ? s : (*idx)[(b * K + k) * S + s];
    };
    const auto xv = x.values();
    const auto pv = p.values();
    const double inv_s = 1.0 / static_cast<double>(S);
    std::vector<double> out(B * K, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t k = 0; k < K; ++k) {
            double acc = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
                for (std::size_t s = 0; s < S; ++s) {
                    const double d = xv[(b * C + c) * S + s] - pv[(k * C + c) * T + pos(b, k, s)];
                    acc += d * d;
                }
            }
            out[b * K + k] = acc * inv_s;
        }
    }
    return Tensor::from_op(
        "paired_sq_distance", {B, K}, std::move(out), {x, p},
        [x, p, pos, B, K, C, S, T, inv_s](std::span<const double> g) mutable {
            const auto xv = x.values();
            const auto pv = p.values();
            const bool dx_on = x.requires_grad();
            const bool dp_on = p.requires_grad();
            std::span<double> dx = dx_on ? x.mutable_grad() : std::span<double>{};
            std::span<double> dp = dp_on ? p.mutable_grad() : std::span<double>{};
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t k = 0; k < K; ++k) {
                    const double go = 2.0 * g[b * K + k] * inv_s;
                    if (go == 0.0) continue;
                    for (std::size_t c = 0; c < C; ++c) {
                        for (std::size_t s = 0; s < S; ++s) {
                            const std::size_t j = pos(b, k, s);
                            const double d = xv[(b * C + c) * S + s] - pv[(k * C + c) * T + j];
                            if (dx_on) dx[(b * C + c) * S + s] += go * d;
                            if (dp_on) dp[(k * C + c) * T + j] -= go * d;
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------

double sim_I(std::span<const double> gx, std::span<const double> gp) {
    if (gx.size() != gp.size()) throw DimensionError("sim_I: vector lengths differ");
    double dot = 0.0, nx = 0.0, np = 0.0;
    for (std::size_t i = 0; i < gx.size(); ++i) {
        dot += gx[i] * gp[i];
        nx += gx[i] * gx[i];
        np += gp[i] * gp[i];
    }
    nx = std::sqrt(nx);
    np = std::sqrt(np);
    if (nx <= ops::kNormEpsilon || np <= ops::kNormEpsilon) return 0.0;
    return (gx.size() == 0) ? 0.0 : (dot / nx) / np;
}

Tensor sim_IIA(const Tensor& fx, const Tensor& fp) {
    NoGradGuard guard;
    auto xh = ops::l2_normalize_channels(batch_of_one(fx));
    auto ph = ops::l2_normalize_channels(batch_of_one(fp));
    return as_map(position_similarity(xh, ph), fx.dim(1), fx.dim(2));
}

SpatialMax sim_IIB(const Tensor& fx, const Tensor& fp) {
    NoGradGuard guard;
    auto xh = ops::l2_normalize_channels(batch_of_one(fx));
    auto ph = ops::l2_normalize_channels(batch_of_one(fp));
    auto ms = max_similarity(xh, ph);
    SpatialMax out;
    out.map = as_map(ms.values, fx.dim(1), fx.dim(2));
    const std::size_t pw = fp.dim(2);
    for (auto t : ms.argmax) out.argmax.emplace_back(t / pw, t % pw);
    return out;
}

Tensor attention(const Tensor& s) {
    NoGradGuard guard;
    auto flat = ops::softmax(ops::reshape(s, {s.size()}));
    return Tensor(s.shape(), std::vector<double>(flat.values().begin(), flat.values().end()));
}

Tensor sim_IIIA(const Tensor& fx, const Tensor& fp, const Tensor& a) {
    NoGradGuard guard;
    auto w = ops::reshape(a, {1, 1, a.size()});
    auto out = attended_product(w, batch_of_one(fx), batch_of_one(fp));
    return ops::reshape(out, {fx.dim(0)});
}

Tensor sim_IIIB(const Tensor& fx, const Tensor& fp, const Tensor& a,
                std::span<const std::pair<std::size_t, std::size_t>> argmax) {
    NoGradGuard guard;
    std::vector<std::uint32_t> idx;
    idx.reserve(argmax.size());
    for (auto [h, w] : argmax) idx.push_back(static_cast<std::uint32_t>(h * fp.dim(2) + w));
    auto wt = ops::reshape(a, {1, 1, a.size()});
    auto out = attended_product(wt, batch_of_one(fx), batch_of_one(fp), idx);
    return ops::reshape(out, {fx.dim(0)});
}

Tensor attn_IIIC(const Tensor& fx, const Tensor& fp) {
    NoGradGuard guard;
    auto xh = ops::l2_normalize_channels(batch_of_one(fx));
    auto ph = ops::l2_normalize_channels(batch_of_one(fp));
    auto ms = max_similarity(ph, xh);
    return attention(as_map(ms.values, fp.dim(1), fp.dim(2)));
}

Tensor sim_IIIC(const Tensor& fx, const Tensor& fp, const Tensor& a_input, const Tensor& a_proto) {
    NoGradGuard guard;
    auto w = ops::mul(ops::reshape(a_input, {1, 1, a_input.size()}),
                      ops::reshape(a_proto, {1, 1, a_proto.size()}));
    auto out = attended_product(w, batch_of_one(fx), batch_of_one(fp));
    return ops::reshape(out, {fx.dim(0)});
}

// ---------------------------------------------------------------------------

HeadOutput head_forward(const Tensor& fx, const Tensor& fp, const HeadModel& model) {
    if (fx.rank() != 4 || fp.rank() != 4 || fx.dim(1) != fp.dim(1)) {
        throw ConfigError("head_forward: input features " + shape_string(fx.shape()) +
                          " and prototype features " + shape_string(fp.shape()) +
                          " are incompatible");
    }
    const std::size_t B = fx.dim(0), K = fp.dim(0), C = fx.dim(1);
    if (model.prototypes() != K) {
        throw ConfigError("head_forward: model has " + std::to_string(model.prototypes()) +
                          " prototype columns but " + std::to_string(K) + " prototypes were given");
    }
    if (is_attention_head(model.kind) &&
        (!model.channel_weight.defined() || model.channel_weight.dim(0) != C)) {
        throw ConfigError("head_forward: Head " + to_string(model.kind) +
                          " needs a channel weight of length " + std::to_string(C));
    }
    if (model.kind != HeadKind::I && (fx.dim(2) != fp.dim(2) || fx.dim(3) != fp.dim(3))) {
        throw ConfigError("head_forward: spatial heads need equal feature grids");
    }

    HeadOutput out;
    out.kind = model.kind;
    switch (model.kind) {
        case HeadKind::I: {
            out.x_hat = ops::l2_normalize_channels(ops::reshape(ops::avgpool_spatial(fx), {B, C, 1, 1}));
            out.p_hat = ops::l2_normalize_channels(ops::reshape(ops::avgpool_spatial(fp), {K, C, 1, 1}));
            out.similarity = ops::reshape(position_similarity(out.x_hat, out.p_hat), {B, K});
            out.z = ops::relu(out.similarity);
            break;
        }
        case HeadKind::IIA:
        case HeadKind::IIIA: {
            out.x_hat = ops::l2_normalize_channels(fx);
            out.p_hat = ops::l2_normalize_channels(fp);
            out.similarity = position_similarity(out.x_hat, out.p_hat);
            break;
        }
        case HeadKind::IIB:
        case HeadKind::IIIB:
        case HeadKind::IIIC: {
            out.x_hat = ops::l2_normalize_channels(fx);
            out.p_hat = ops::l2_normalize_channels(fp);
            auto ms = max_similarity(out.x_hat, out.p_hat);
            out.similarity = ms.values;
            out.argmax = std::move(ms.argmax);
            break;
        }
    }

    if (model.kind == HeadKind::IIA || model.kind == HeadKind::IIB) {
        out.z = ops::mean_last_axis(out.similarity);
    } else if (is_attention_head(model.kind)) {
        out.attention = ops::softmax(out.similarity);
        if (model.kind == HeadKind::IIIA) {
            out.attended = attended_product(out.attention, fx, fp);
        } else if (model.kind == HeadKind::IIIB) {
            out.attended = attended_product(out.attention, fx, fp, out.argmax);
        } else {
            auto reverse = max_similarity(out.p_hat, out.x_hat);  // [K,B,S]
            out.proto_argmax = std::move(reverse.argmax);
            out.proto_attention = ops::softmax(ops::permute01(reverse.values));
            out.attended =
                attended_product(ops::mul(out.attention, out.proto_attention), fx, fp);
        }
        auto flat = ops::reshape(out.attended, {B * K, C});
        auto reduced = ops::matmul(flat, ops::reshape(model.channel_weight, {C, 1}));
        out.z = ops::reshape(reduced, {B, K});
    }
    out.logits = ops::linear(out.z, model.weight, model.bias);
    return out;
}

std::vector<SimilarityRecord> similarity_records(const HeadOutput& out, std::size_t sample,
                                                 std::size_t feature_height,
                                                 std::size_t feature_width) {
    const std::size_t K = out.prototypes();
    const std::size_t S = feature_height * feature_width;
    std::vector<SimilarityRecord> records(K);
    auto slice = [&](const Tensor& t, std::size_t k) {
        const auto v = t.values().subspan((sample * K + k) * S, S);
        return Tensor({feature_height, feature_width}, std::vector<double>(v.begin(), v.end()));
    };
    for (std::size_t k = 0; k < K; ++k) {
        auto& r = records[k];
        r.z = out.z.values()[sample * K + k];
        if (out.kind == HeadKind::I) continue;
        r.map = slice(out.similarity, k);
        if (!out.argmax.empty()) {
            std::vector<std::pair<std::size_t, std::size_t>> idx;
            for (std::size_t s = 0; s < S; ++s) {
                const auto t = out.argmax[(sample * K + k) * S + s];
                idx.emplace_back(t / feature_width, t % feature_width);
            }
            r.argmax = std::move(idx);
        }
        if (out.attention.defined()) r.attention = slice(out.attention, k);
        if (out.proto_attention.defined()) r.proto_attention = slice(out.proto_attention, k);
    }
    return records;
}

}  // namespace pbsn
