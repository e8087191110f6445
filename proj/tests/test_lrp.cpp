#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "pbsn/errors.hpp"
#include "pbsn/lrp.hpp"
#include "pbsn/ops.hpp"
#include "test_util.hpp"

namespace pbsn {
namespace {

using testing::random_tensor;
using testing::random_values;
using testing::vals;

double total(const Tensor& t) {
    const auto v = t.values();
    return std::accumulate(v.begin(), v.end(), 0.0);
}

double total(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0); }

TEST(LrpParams, Validation) {
    EXPECT_NO_THROW(LrpParams{}.validate());
    EXPECT_NO_THROW((LrpParams{1.0, 0.0, 0.0}.validate()));
    EXPECT_THROW((LrpParams{1.5, 0.7, 1e-3}.validate()), ParameterError);
    EXPECT_THROW((LrpParams{0.5, -0.5, 1e-3}.validate()), ParameterError);
    EXPECT_THROW((LrpParams{1.7, 0.7, -1.0}.validate()), ParameterError);
}

TEST(LrpLinearEps, SinglePath) {
    const std::vector<double> a{2.0}, w{3.0}, r{5.0};
    const double eps = 1e-3;
    EXPECT_NEAR(lrp_linear_eps(a, w, {}, r, eps)[0], 5.0 * 6.0 / (6.0 + eps), 1e-14);
    EXPECT_DOUBLE_EQ(lrp_linear_eps(a, w, {}, r, 0.0)[0], 5.0);
    const std::vector<double> neg{-3.0};
    EXPECT_NEAR(lrp_linear_eps(a, neg, {}, r, eps)[0], 5.0 * -6.0 / (-6.0 - eps), 1e-14);
}

TEST(LrpLinearEps, EqualContributionsSplitEvenly) {
    const std::vector<double> a{1.0, 2.0}, w{4.0, 2.0}, r{3.0};
    const auto out = lrp_linear_eps(a, w, {}, r, 0.0);
    EXPECT_DOUBLE_EQ(out[0], 1.5);
    EXPECT_DOUBLE_EQ(out[1], 1.5);
}

TEST(LrpLinearEps, BiasAbsorbsItsShare) {
    const std::vector<double> a{1.0}, w{3.0}, b{1.0}, r{8.0};
    EXPECT_DOUBLE_EQ(lrp_linear_eps(a, w, b, r, 0.0)[0], 6.0);
}

TEST(LrpLinearEps, ThreeToTwoConservation) {
    const std::vector<double> a{0.5, 1.0, 0.25};
    const std::vector<double> w{0.8, -0.2, 0.6, 0.3, 0.9, -0.4};
    const std::vector<double> r{1.2, 0.7};
    const auto out = lrp_linear_eps(a, w, {}, r, 1e-3);
    EXPECT_NEAR(total(out), total(r), 1e-2 * total(r));
    EXPECT_NEAR(total(lrp_linear_eps(a, w, {}, r, 0.0)), total(r), 1e-14);
}

TEST(LrpLinearEps, AbsorptionIsBoundedByEpsilon) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto a = random_values(5, seed, 0.0, 1.0);
        const auto w = random_values(15, seed + 1000);
        const auto r = random_values(3, seed + 2000, 0.0, 1.0);
        const double eps = 1e-3;
        double bound = 0.0;
        for (std::size_t j = 0; j < 3; ++j) {
            double z = 0.0;
            for (std::size_t d = 0; d < 5; ++d) z += a[d] * w[j * 5 + d];
            bound += std::abs(r[j]) * eps / (std::abs(z) + eps);
        }
        EXPECT_LE(std::abs(total(lrp_linear_eps(a, w, {}, r, eps)) - total(r)), bound + 1e-14);
    }
}

TEST(LrpLinearEps, SizeMismatchThrows) {
    const std::vector<double> a{1.0, 2.0}, w{1.0}, r{1.0};
    EXPECT_THROW(lrp_linear_eps(a, w, {}, r, 0.0), DimensionError);
}

// Dense alpha-beta rule with the same one-sided fallbacks, as an oracle.
std::vector<double> dense_alphabeta(std::span<const double> a, std::span<const double> w, std::size_t m,
                                    std::span<const double> r, double alpha, double beta) {
    const std::size_t n = a.size();
    std::vector<double> out(n, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
        double pos = 0.0, neg = 0.0;
        for (std::size_t d = 0; d < n; ++d) {
            const double z = a[d] * w[j * n + d];
            if (z > 0) pos += z;
            if (z < 0) neg += z;
        }
        double al = alpha, be = beta;
        if (neg == 0.0) {
            al = 1.0;
            be = 0.0;
        } else if (pos == 0.0) {
            al = 0.0;
            be = -1.0;
        }
        for (std::size_t d = 0; d < n; ++d) {
            const double z = a[d] * w[j * n + d];
            if (z > 0) out[d] += al * z / pos * r[j];
            if (z < 0) out[d] -= be * z / neg * r[j];
        }
    }
    return out;
}

// Conv layer written out as a [C_out*H'*W', C_in*H*W] matrix.
std::vector<double> conv_matrix(const Tensor& kernel, std::size_t H, std::size_t W, std::size_t stride,
                                std::size_t pad, std::size_t& Ho, std::size_t& Wo) {
    const std::size_t Co = kernel.dim(0), Ci = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    Ho = (H + 2 * pad - kh) / stride + 1;
    Wo = (W + 2 * pad - kw) / stride + 1;
    std::vector<double> m(Co * Ho * Wo * Ci * H * W, 0.0);
    const std::size_t n = Ci * H * W;
    for (std::size_t o = 0; o < Co; ++o) {
        for (std::size_t y = 0; y < Ho; ++y) {
            for (std::size_t x = 0; x < Wo; ++x) {
                const std::size_t row = (o * Ho + y) * Wo + x;
                for (std::size_t c = 0; c < Ci; ++c) {
                    for (std::size_t u = 0; u < kh; ++u) {
                        for (std::size_t v = 0; v < kw; ++v) {
                            const long iy = static_cast<long>(y * stride + u) - static_cast<long>(pad);
                            const long ix = static_cast<long>(x * stride + v) - static_cast<long>(pad);
                            if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                            const std::size_t col =
                                (c * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix);
                            m[row * n + col] = kernel.at(((o * Ci + c) * kh + u) * kw + v);
                        }
                    }
                }
            }
        }
    }
    return m;
}

TEST(LrpConvAlphaBeta, AllPositiveIsConservative) {
    const auto x = random_tensor({2, 5, 5}, 1, 0.1, 1.0);
    const auto k = random_tensor({3, 2, 3, 3}, 2, 0.1, 1.0);
    const auto r = random_tensor({3, 5, 5}, 3, 0.0, 1.0);
    const auto out = lrp_conv_alphabeta(x, k, Tensor{}, 1, 1, r, LrpParams{});
    EXPECT_NEAR(total(out), total(r), 1e-9);
}

TEST(LrpConvAlphaBeta, AlphaOneIsTheZPlusRule) {
    const auto x = random_tensor({1, 2, 2}, 4, 0.1, 1.0);
    const auto k = random_tensor({2, 1, 2, 2}, 5, -1.0, 1.0);
    const auto r = random_tensor({2, 1, 1}, 6, 0.0, 1.0);
    const auto out = lrp_conv_alphabeta(x, k, Tensor{}, 1, 0, r, LrpParams{1.0, 0.0, 0.0});
    std::vector<double> expected(4, 0.0);
    for (std::size_t o = 0; o < 2; ++o) {
        double pos = 0.0;
        for (std::size_t d = 0; d < 4; ++d) pos += std::max(0.0, x.at(d) * k.at(o * 4 + d));
        for (std::size_t d = 0; d < 4; ++d) expected[d] += std::max(0.0, x.at(d) * k.at(o * 4 + d)) / pos * r.at(o);
    }
    for (std::size_t d = 0; d < 4; ++d) EXPECT_NEAR(out.at(d), expected[d], 1e-14);
}

TEST(LrpConvAlphaBeta, MatchesDenseMatrixOracle) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto x = random_tensor({2, 4, 4}, seed, 0.0, 1.0);
        const auto k = random_tensor({3, 2, 3, 3}, seed + 100);
        for (std::size_t stride : {1u, 2u}) {
            std::size_t Ho = 0, Wo = 0;
            const auto m = conv_matrix(k, 4, 4, stride, 1, Ho, Wo);
            const auto r = random_tensor({3, Ho, Wo}, seed + 200, -1.0, 1.0);
            const auto got = lrp_conv_alphabeta(x, k, Tensor{}, stride, 1, r, LrpParams{});
            const auto want = dense_alphabeta(x.values(), m, 3 * Ho * Wo, r.values(), 1.7, 0.7);
            for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got.at(i), want[i], 1e-12);
        }
    }
}

TEST(LrpConvAlphaBeta, MixedSignsConserveWithoutBias) {
    const auto x = random_tensor({2, 6, 6}, 7, 0.0, 1.0);
    const auto k = random_tensor({4, 2, 3, 3}, 8);
    const auto r = random_tensor({4, 3, 3}, 9, 0.0, 1.0);
    EXPECT_NEAR(total(lrp_conv_alphabeta(x, k, Tensor{}, 2, 1, r, LrpParams{})), total(r), 1e-9);
}

TEST(LrpConvAlphaBeta, ShapeErrors) {
    const auto x = random_tensor({2, 4, 4}, 10);
    const auto k = random_tensor({3, 2, 3, 3}, 11);
    EXPECT_THROW(lrp_conv_alphabeta(x, k, Tensor{}, 1, 1, Tensor({3, 3, 3}), LrpParams{}), DimensionError);
    EXPECT_THROW(lrp_conv_alphabeta(Tensor({1, 4, 4}), k, Tensor{}, 1, 1, Tensor({3, 4, 4}), LrpParams{}),
                 DimensionError);
}

struct Toy {
    Dataset train = testing::tiny_dataset(2, 6, 7);
    StudentModel student;

    explicit Toy(HeadKind kind, std::uint64_t seed = 3) {
        student = testing::tiny_student(kind, train, 2, seed, false);
        // Positive class weights keep every logit well away from zero.
        auto w = student.head.weight.mutable_values();
        const auto fresh = random_values(w.size(), seed + 10, 0.2, 1.0);
        std::copy(fresh.begin(), fresh.end(), w.begin());
    }

    Tensor image(std::size_t i) const {
        const std::vector<std::size_t> idx{i};
        const auto batch = train.gather(idx);
        return ops::reshape(batch, {3, 8, 8});
    }
};

TEST(RelevanceAtSimilarity, SinglePathCarriesTheWholeLogit) {
    for (auto kind : kAllHeadKinds) {
        Toy toy(kind);
        auto w = toy.student.head.weight.mutable_values();
        std::fill(w.begin(), w.end(), 0.0);
        w[0] = 1.0;
        w[toy.student.prototypes()] = 1.0;
        const auto rec = lrp_record(toy.student, toy.image(0));
        ASSERT_EQ(rec.predicted, 0);
        const LrpParams exact{1.7, 0.7, 0.0};
        EXPECT_NEAR(total(relevance_at_similarity(toy.student, rec, 0, exact)), rec.logit, 1e-12) << to_string(kind);
        EXPECT_EQ(total(relevance_at_similarity(toy.student, rec, 1, exact)), 0.0) << to_string(kind);
    }
}

TEST(RelevanceAtSimilarity, ZeroActivationPrototypeGetsNothing) {
    for (auto kind : kAllHeadKinds) {
        Toy toy(kind);
        auto images = toy.student.store.images.mutable_values();
        std::fill(images.begin(), images.begin() + 3 * 8 * 8, 0.0);
        const auto rec = lrp_record(toy.student, toy.image(1));
        const auto r = relevance_at_similarity(toy.student, rec, 0, LrpParams{});
        for (double v : r.values()) EXPECT_EQ(v, 0.0) << to_string(kind);
    }
}

TEST(RelevanceAtSimilarity, TwinPrototypesShareEqually) {
    for (auto kind : kAllHeadKinds) {
        Toy toy(kind);
        auto& s = toy.student;
        auto images = s.store.images.mutable_values();
        std::copy(images.begin(), images.begin() + 192, images.begin() + 192);
        auto w = s.head.weight.mutable_values();
        const std::size_t K = s.prototypes();
        for (std::size_t c = 0; c < s.classes(); ++c) w[c * K + 1] = w[c * K];
        const auto rec = lrp_record(s, toy.image(2));
        const auto r0 = vals(relevance_at_similarity(s, rec, 0, LrpParams{}));
        const auto r1 = vals(relevance_at_similarity(s, rec, 1, LrpParams{}));
        EXPECT_EQ(r0, r1) << to_string(kind);
    }
}

TEST(RelevanceAtSimilarity, WidthFollowsTheHead) {
    const std::pair<HeadKind, std::size_t> widths[] = {
        {HeadKind::I, 1}, {HeadKind::IIA, 16}, {HeadKind::IIB, 16}, {HeadKind::IIIA, 5}, {HeadKind::IIIC, 5}};
    for (auto [kind, width] : widths) {
        Toy toy(kind);
        const auto rec = lrp_record(toy.student, toy.image(0));
        EXPECT_EQ(relevance_at_similarity(toy.student, rec, 0, LrpParams{}).size(), width);
    }
}

TEST(Heatmaps, SelfPairUnderHeadIIsSymmetric) {
    Toy toy(HeadKind::I);
    const std::size_t id = toy.student.store.ids[2];
    const auto rec = lrp_record(toy.student, toy.image(id));
    const auto pair = heatmaps(toy.student, rec, 2, LrpParams{});
    const auto a = vals(pair.input_map), b = vals(pair.proto_map);
    ASSERT_EQ(a.size(), 64u);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-14);
}

TEST(Heatmaps, ZeroStartRelevanceGivesZeroMaps) {
    for (auto kind : kAllHeadKinds) {
        Toy toy(kind);
        auto rec = lrp_record(toy.student, toy.image(0));
        rec.start_relevance = 0.0;
        const auto pair = heatmaps(toy.student, rec, 1, LrpParams{});
        for (double v : pair.input_pixels.values()) EXPECT_EQ(v, 0.0);
        for (double v : pair.proto_pixels.values()) EXPECT_EQ(v, 0.0);
    }
}

TEST(Heatmaps, LinearInTheStartRelevance) {
    for (auto kind : kAllHeadKinds) {
        Toy toy(kind);
        auto rec = lrp_record(toy.student, toy.image(3));
        const auto base = heatmaps(toy.student, rec, 0, LrpParams{});
        rec.start_relevance *= 3.0;
        const auto scaled = heatmaps(toy.student, rec, 0, LrpParams{});
        for (std::size_t i = 0; i < base.input_map.size(); ++i) {
            EXPECT_NEAR(scaled.input_map.at(i), 3.0 * base.input_map.at(i), 1e-12);
            EXPECT_NEAR(scaled.proto_map.at(i), 3.0 * base.proto_map.at(i), 1e-12);
        }
    }
}

TEST(Heatmaps, ExactConservationWithoutEpsilon) {
    const LrpParams exact{1.7, 0.7, 0.0};
    for (auto kind : kAllHeadKinds) {
        Toy toy(kind);
        for (std::size_t i = 0; i < toy.train.size(); i += 3) {
            const auto rec = lrp_record(toy.student, toy.image(i));
            double input_total = 0.0, proto_total = 0.0;
            for (std::size_t k = 0; k < toy.student.prototypes(); ++k) {
                const auto pair = heatmaps(toy.student, rec, k, exact);
                const double rs = total(pair.r_sim);
                EXPECT_NEAR(total(pair.input_features), rs, 1e-9);
                EXPECT_NEAR(total(pair.proto_features), rs, 1e-9);
                input_total += total(pair.input_pixels);
                proto_total += total(pair.proto_pixels);
            }
            EXPECT_NEAR(input_total, rec.logit, 1e-9 * std::max(1.0, std::abs(rec.logit))) << to_string(kind);
            EXPECT_NEAR(proto_total, rec.logit, 1e-9 * std::max(1.0, std::abs(rec.logit))) << to_string(kind);
        }
    }
}

TEST(Heatmaps, DefaultParametersConserveWithinTwoPercent) {
    for (auto kind : kAllHeadKinds) {
        Toy toy(kind);
        // Lift the untrained features out of the range where epsilon dominates.
        for (auto& p : toy.student.encoder.parameters()) {
            for (double& v : p.mutable_values()) v *= 3.0;
        }
        for (std::size_t i = 0; i < toy.train.size(); ++i) {
            const auto rec = lrp_record(toy.student, toy.image(i));
            double sum = 0.0;
            for (std::size_t k = 0; k < toy.student.prototypes(); ++k) {
                sum += total(heatmaps(toy.student, rec, k, LrpParams{}).input_pixels);
            }
            EXPECT_NEAR(sum, rec.logit, 0.02 * std::abs(rec.logit)) << to_string(kind) << " sample " << i;
        }
    }
}

TEST(Heatmaps, MaxHeadPrototypeRelevanceSitsOnSelectedPositions) {
    for (auto kind : {HeadKind::IIB, HeadKind::IIIB}) {
        Toy toy(kind);
        for (std::size_t i = 0; i < 6; ++i) {
            const auto rec = lrp_record(toy.student, toy.image(i));
            const std::size_t k = i % toy.student.prototypes();
            const auto pair = heatmaps(toy.student, rec, k, LrpParams{});
            const std::size_t S = 16;
            std::set<std::size_t> selected;
            for (std::size_t s = 0; s < S; ++s) selected.insert(rec.output.argmax[k * S + s]);
            for (std::size_t c = 0; c < 5; ++c) {
                for (std::size_t t = 0; t < S; ++t) {
                    if (!selected.count(t)) {
                        EXPECT_EQ(pair.proto_features.at(c * S + t), 0.0);
                    }
                }
            }
        }
    }
}

TEST(ChannelSum, SumsOverTheFirstAxis) {
    const Tensor t({2, 1, 2}, {1, 2, 10, 20});
    EXPECT_EQ(vals(channel_sum(t)), (std::vector<double>{11, 22}));
    EXPECT_THROW(channel_sum(Tensor({2, 2})), DimensionError);
}

}  // namespace
}  // namespace pbsn
