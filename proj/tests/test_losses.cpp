#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "pbsn/errors.hpp"
#include "pbsn/grad_check.hpp"
#include "pbsn/losses.hpp"
#include "pbsn/ops.hpp"
#include "test_util.hpp"

namespace pbsn {
namespace {

using testing::random_param;
using testing::random_tensor;
using testing::random_values;

TEST(CrossEntropy, ConfidentCorrectIsNearZero) {
    const std::vector<int> labels{0};
    EXPECT_NEAR(cross_entropy(Tensor({1, 3}, {30.0, 0.0, 0.0}), labels).item(), 0.0, 1e-10);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
    for (std::size_t c : {2u, 4u, 7u}) {
        const std::vector<int> labels{1, 0};
        EXPECT_NEAR(cross_entropy(Tensor({2, c}, 0.5), labels).item(), std::log(static_cast<double>(c)), 1e-10);
    }
}

TEST(CrossEntropy, SoftTargetAtOwnSoftmaxIsEntropy) {
    const auto y = random_tensor({3, 4}, 11, -2.0, 2.0);
    const auto p = ops::softmax(y);
    double entropy = 0.0;
    for (double v : p.values()) entropy -= v * std::log(v);
    EXPECT_NEAR(cross_entropy(y, p).item(), entropy / 3.0, 1e-10);
}

TEST(CrossEntropy, HardLabelsMatchOneHot) {
    const auto y = random_tensor({2, 3}, 12);
    const std::vector<int> labels{2, 0};
    const Tensor onehot({2, 3}, {0, 0, 1, 1, 0, 0});
    EXPECT_DOUBLE_EQ(cross_entropy(y, labels).item(), cross_entropy(y, onehot).item());
}

TEST(CrossEntropy, ShapeAndLabelErrors) {
    const auto y = random_tensor({2, 3}, 13);
    EXPECT_THROW(cross_entropy(y, Tensor({2, 2})), DimensionError);
    const std::vector<int> one{0}, bad{0, 3};
    EXPECT_THROW(cross_entropy(y, one), DimensionError);
    EXPECT_THROW(cross_entropy(y, bad), DimensionError);
}

TEST(AuxMaskLoss, AllOnesMaskMatchesUnmaskedPrediction) {
    const auto z = random_tensor({4, 5}, 14, 0.0, 1.0);
    const auto w = random_tensor({3, 5}, 15);
    const auto b = random_tensor({3}, 16);
    const auto logits = masked_logits(z, Tensor({5}, 1.0), w, b);
    const auto predicted = argmax_rows(logits);
    EXPECT_DOUBLE_EQ(aux_mask_loss(logits, predicted).item(), cross_entropy(logits, predicted).item());
}

TEST(AuxMaskLoss, DominantPredictedLogitGivesNearZero) {
    const std::vector<int> predicted{1};
    EXPECT_NEAR(aux_mask_loss(Tensor({1, 3}, {0.0, 40.0, 0.0}), predicted).item(), 0.0, 1e-11);
}

TEST(AuxMaskLoss, ZeroMaskLeavesOnlyTheBias) {
    const auto z = random_tensor({2, 4}, 17, 0.0, 1.0);
    const auto w = random_tensor({3, 4}, 18);
    const auto logits = masked_logits(z, Tensor({4}, 0.0), w, Tensor({3}, 0.25));
    const std::vector<int> predicted{0, 2};
    EXPECT_NEAR(aux_mask_loss(logits, predicted).item(), std::log(3.0), 1e-11);
}

TEST(SignedPairMean, SameClassAddsDistanceOtherClassAddsInverse) {
    const Tensor d({2, 2}, {0.5, 2.0, 4.0, 0.0});
    const std::vector<int> samples{0, 1}, protos{0, 1};
    const double expected = (0.5 + 1.0 / (2.0 + 1e-6) + 1.0 / (4.0 + 1e-6) + 0.0) / 4.0;
    EXPECT_NEAR(signed_pair_mean(d, samples, protos).item(), expected, 1e-15);
}

TEST(SignedPairMean, ZeroDistanceSameClassContributesNothing) {
    const std::vector<int> samples{1}, protos{1};
    EXPECT_EQ(signed_pair_mean(Tensor({1, 1}, 0.0), samples, protos).item(), 0.0);
}

TEST(SignedPairMean, ShapeMismatchThrows) {
    const std::vector<int> samples{0, 1}, protos{0};
    EXPECT_THROW(signed_pair_mean(Tensor({2, 2}), samples, protos), DimensionError);
}

HeadModel unit_head(HeadKind kind, std::size_t prototypes, std::size_t channels) {
    return HeadModel::initialize(kind, 2, prototypes, channels, 1);
}

TEST(PrototypeLoss, OrthogonalUnitVectorsUnderHeadI) {
    // Normalised features (1,0) and (0,1) are sqrt(2) apart.
    const Tensor fx({1, 2, 1, 1}, {3.0, 0.0});
    const Tensor fp({1, 2, 1, 1}, {0.0, 0.5});
    const auto out = head_forward(fx, fp, unit_head(HeadKind::I, 1, 2));
    const std::vector<int> sample{0}, same{0}, other{1};
    EXPECT_NEAR(J_head1(out, sample, same).item(), 2.0, 1e-12);
    EXPECT_NEAR(J_head1(out, sample, other).item(), 0.5, 1e-6);
}

TEST(PrototypeLoss, HeadBEqualsHeadAForSpatiallyConstantPrototypes) {
    std::vector<double> proto;
    const auto column = random_values(4, 19, 0.1, 1.0);
    for (std::size_t k = 0; k < 3; ++k) {
        for (std::size_t c = 0; c < 4; ++c) {
            for (std::size_t s = 0; s < 9; ++s) proto.push_back(column[c] + 0.3 * static_cast<double>(k));
        }
    }
    const Tensor fp({3, 4, 3, 3}, proto);
    const auto fx = random_tensor({2, 4, 3, 3}, 20, 0.0, 1.0);
    const std::vector<int> samples{0, 1}, protos{0, 1, 1};
    const auto a = head_forward(fx, fp, unit_head(HeadKind::IIA, 3, 4));
    const auto b = head_forward(fx, fp, unit_head(HeadKind::IIB, 3, 4));
    EXPECT_NEAR(J_headB(b, samples, protos).item(), J_headA(a, samples, protos).item(), 1e-12);
}

TEST(PrototypeLoss, NonnegativeForEveryHead) {
    for (auto kind : kAllHeadKinds) {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const auto fx = random_tensor({3, 4, 2, 2}, seed, 0.0, 1.0);
            const auto fp = random_tensor({4, 4, 2, 2}, seed + 100, 0.0, 1.0);
            const auto out = head_forward(fx, fp, unit_head(kind, 4, 4));
            const std::vector<int> samples{0, 1, 1}, protos{0, 0, 1, 1};
            EXPECT_GE(prototype_loss(out, samples, protos).item(), 0.0) << to_string(kind);
        }
    }
}

TEST(PrototypeLoss, DecreasesAsSameClassPrototypeApproachesInput) {
    const auto fx = random_tensor({1, 4, 2, 2}, 21, 0.0, 1.0);
    const auto target = random_tensor({1, 4, 2, 2}, 22, 0.0, 1.0);
    const std::vector<int> samples{0}, protos{0};
    for (auto kind : kAllHeadKinds) {
        double previous = std::numeric_limits<double>::infinity();
        for (double t : {0.0, 0.25, 0.5, 0.75, 1.0}) {
            std::vector<double> p(16);
            for (std::size_t i = 0; i < 16; ++i) p[i] = (1.0 - t) * target.at(i) + t * fx.at(i);
            const auto out = head_forward(fx, Tensor({1, 4, 2, 2}, p), unit_head(kind, 1, 4));
            const double j = prototype_loss(out, samples, protos).item();
            EXPECT_LE(j, previous + 1e-12) << to_string(kind) << " t=" << t;
            previous = j;
        }
        EXPECT_NEAR(previous, 0.0, 1e-12) << to_string(kind);
    }
}

TEST(PrototypeLoss, MissingArgmaxRecordThrows) {
    const auto out = head_forward(random_tensor({1, 2, 2, 2}, 23, 0.0, 1.0),
                                  random_tensor({1, 2, 2, 2}, 24, 0.0, 1.0), unit_head(HeadKind::IIA, 1, 2));
    const std::vector<int> labels{0};
    EXPECT_THROW(J_headB(out, labels, labels), ConfigError);
    EXPECT_THROW(J_headC(out, labels, labels), ConfigError);
}

struct Micro {
    Tensor logits = random_tensor({3, 2}, 30, -2.0, 2.0);
    Tensor masked = random_tensor({3, 2}, 31, -2.0, 2.0);
    Tensor teacher = Tensor({3, 2}, {0.7, 0.3, 0.2, 0.8, 0.5, 0.5});
    std::vector<int> labels{0, 1, 1};
    std::vector<int> predicted{1, 1, 0};
    Tensor j = Tensor(Shape{}, {0.42});
};

double row_ce(const Tensor& y, std::size_t r, std::span<const double> target) {
    const double a = y.at(2 * r), b = y.at(2 * r + 1);
    const double m = std::max(a, b);
    const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
    return -(target[0] * (a - lse) + target[1] * (b - lse));
}

TEST(TotalLoss, AllWeightsZeroIsSupervisedCrossEntropy) {
    Micro m;
    const auto terms = total_loss(m.logits, m.labels, m.teacher, m.masked, m.predicted, m.j, LossWeights{0, 0, 0});
    EXPECT_DOUBLE_EQ(terms.total.item(), cross_entropy(m.logits, m.labels).item());
}

TEST(TotalLoss, HandComputedMicroBatch) {
    Micro m;
    const LossWeights w{0.5, 2.0, 0.1};
    double ce = 0.0, kd = 0.0, mask = 0.0;
    for (std::size_t r = 0; r < 3; ++r) {
        const double hard[2] = {m.labels[r] == 0 ? 1.0 : 0.0, m.labels[r] == 1 ? 1.0 : 0.0};
        const double pred[2] = {m.predicted[r] == 0 ? 1.0 : 0.0, m.predicted[r] == 1 ? 1.0 : 0.0};
        const double soft[2] = {m.teacher.at(2 * r), m.teacher.at(2 * r + 1)};
        ce += row_ce(m.logits, r, hard);
        kd += row_ce(m.logits, r, soft);
        mask += row_ce(m.masked, r, pred);
    }
    const double expected = (ce + 0.5 * kd + 2.0 * mask) / 3.0 + 0.1 * 0.42;
    const auto terms = total_loss(m.logits, m.labels, m.teacher, m.masked, m.predicted, m.j, w);
    EXPECT_NEAR(terms.total.item(), expected, 1e-10);
    EXPECT_NEAR(terms.distill.item(), kd / 3.0, 1e-10);
    EXPECT_NEAR(terms.mask.item(), mask / 3.0, 1e-10);
}

TEST(TotalLoss, DoublingPrototypeWeightAddsOneMoreTerm) {
    Micro m;
    const LossWeights once{1.0, 1.0, 0.3}, twice{1.0, 1.0, 0.6};
    const double a = total_loss(m.logits, m.labels, m.teacher, m.masked, m.predicted, m.j, once).total.item();
    const double b = total_loss(m.logits, m.labels, m.teacher, m.masked, m.predicted, m.j, twice).total.item();
    EXPECT_NEAR(b - a, 0.3 * 0.42, 1e-12);
}

TEST(TotalLoss, NonFiniteTermIsNamed) {
    Micro m;
    const Tensor bad(Shape{}, {std::numeric_limits<double>::infinity()});
    try {
        total_loss(m.logits, m.labels, m.teacher, m.masked, m.predicted, bad, LossWeights{});
        FAIL() << "expected TrainingError";
    } catch (const TrainingError& e) {
        EXPECT_NE(std::string(e.what()).find("prototype"), std::string::npos) << e.what();
    }
}

TEST(LossWeights, RejectsNegativeOrNonFinite) {
    EXPECT_NO_THROW((LossWeights{0, 0, 0}.validate()));
    EXPECT_THROW((LossWeights{-1, 0, 0}.validate()), ConfigError);
    EXPECT_THROW((LossWeights{0, std::nan(""), 0}.validate()), ConfigError);
}

TEST(ArgmaxRows, FirstMaximumWins) {
    EXPECT_EQ(argmax_rows(Tensor({2, 3}, {1, 3, 3, 5, 0, 5})), (std::vector<int>{1, 0}));
}

TEST(TotalLossGradient, EveryHeadThroughTheFullStep) {
    const auto train = testing::tiny_dataset(2, 6);
    const std::vector<std::size_t> idx{1, 4, 7, 10};
    for (auto kind : kAllHeadKinds) {
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            auto s = testing::tiny_student(kind, train, 2, 40 + seed);
            auto imp = s.store.importance.mutable_values();
            const auto jitter = random_values(imp.size(), seed + 60, 0.5, 1.5);
            std::copy(jitter.begin(), jitter.end(), imp.begin());
            // Zero biases on black background put pre-activations exactly on the ReLU kink.
            for (auto& t : s.encoder.parameters()) {
                if (t.rank() != 1) continue;
                const auto b = random_values(t.size(), seed + 80, 0.05, 0.1);
                std::copy(b.begin(), b.end(), t.mutable_values().begin());
            }
            const auto frozen = testing::freeze_step(s, train, idx, 1, seed + 70);
            auto fn = [&] { return testing::frozen_total_loss(s, frozen); };
            EXPECT_LT(grad_check(fn, s.parameters()).max_rel_error, 1e-4) << to_string(kind) << " seed " << seed;
        }
    }
}

}  // namespace
}  // namespace pbsn
