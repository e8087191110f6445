#include <gtest/gtest.h>

#include <numeric>
#include <sstream>

#include "pbsn/errors.hpp"
#include "pbsn/perturbation.hpp"
#include "test_util.hpp"

namespace pbsn {
namespace {

using testing::vals;

struct Bench {
    Dataset data = testing::tiny_dataset(2, 4, 11);
    StudentModel student = testing::tiny_student(HeadKind::IIA, data, 2, 12);
    std::vector<double> fill = data.channel_mean();
};

std::vector<double> predicted_logits(const StudentModel& s, const Tensor& images, std::vector<int>& predicted) {
    const auto logits = student_logits(s, images);
    const std::size_t C = s.classes();
    std::vector<double> out;
    const bool assign = predicted.empty();
    for (std::size_t i = 0; i < images.dim(0); ++i) {
        const auto row = logits.values().subspan(i * C, C);
        if (assign) predicted.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
        out.push_back(row[static_cast<std::size_t>(predicted[i])]);
    }
    return out;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

TEST(PerturbEval, ZeroStepsIsTheUnperturbedMeanLogit) {
    Bench s;
    PerturbConfig config;
    config.steps = 0;
    const auto curve = perturb_eval(s.student, s.data, s.fill, config);
    ASSERT_EQ(curve.mean_logit.size(), 1u);
    std::vector<int> predicted;
    EXPECT_NEAR(curve.mean_logit[0], mean(predicted_logits(s.student, s.data.images, predicted)), 1e-12);
    EXPECT_EQ(curve.aoc(), 0.0);
}

TEST(PerturbEval, AllTilesGiveTheConstantImageLogit) {
    Bench s;
    PerturbConfig config;
    config.steps = 4;
    std::vector<int> predicted;
    predicted_logits(s.student, s.data.images, predicted);
    std::vector<double> constant;
    for (std::size_t i = 0; i < s.data.size(); ++i) {
        for (double f : s.fill) constant.insert(constant.end(), 64, f);
    }
    const Tensor flat({s.data.size(), 3, 8, 8}, constant);
    const double expected = mean(predicted_logits(s.student, flat, predicted));
    for (auto policy : {PerturbPolicy::Relevance, PerturbPolicy::Random}) {
        config.policy = policy;
        const auto curve = perturb_eval(s.student, s.data, s.fill, config);
        ASSERT_EQ(curve.mean_logit.size(), 5u);
        EXPECT_NEAR(curve.mean_logit.back(), expected, 1e-12) << to_string(policy);
    }
}

TEST(PerturbEval, RandomPolicyIsSeeded) {
    Bench s;
    PerturbConfig config;
    config.steps = 3;
    config.policy = PerturbPolicy::Random;
    config.seed = 5;
    const auto a = perturb_eval(s.student, s.data, s.fill, config);
    EXPECT_EQ(a.mean_logit, perturb_eval(s.student, s.data, s.fill, config).mean_logit);
}

TEST(PerturbEval, RegionMustDivideTheImage) {
    Bench s;
    PerturbConfig config;
    config.region = 3;
    EXPECT_THROW(perturb_eval(s.student, s.data, s.fill, config), ConfigError);
    config.region = 4;
    config.steps = 5;
    EXPECT_THROW(perturb_eval(s.student, s.data, s.fill, config), ConfigError);
}

TEST(TilesByRelevance, DescendingAbsoluteSumWithStableTies) {
    std::vector<double> map(16, 0.0);
    map[0] = 0.5;     // tile 0
    map[3] = -2.0;    // tile 1
    map[10] = 1.0;    // tile 3
    map[11] = 0.25;   // tile 3
    const auto order = tiles_by_relevance(Tensor({4, 4}, map), 2);
    EXPECT_EQ(order, (std::vector<std::size_t>{1, 3, 0, 2}));
    EXPECT_THROW(tiles_by_relevance(Tensor({4, 4}, map), 3), ConfigError);
}

TEST(FillTiles, ReplacesOnlyTheFirstTiles) {
    const Tensor img({1, 4, 4}, std::vector<double>(16, 1.0));
    const std::vector<std::size_t> order{3, 0, 1, 2};
    const std::vector<double> fill{0.25};
    const auto out = fill_tiles(img, order, 1, 2, fill);
    for (std::size_t y = 0; y < 4; ++y) {
        for (std::size_t x = 0; x < 4; ++x) {
            EXPECT_EQ(out.at(y * 4 + x), (y >= 2 && x >= 2) ? 0.25 : 1.0);
        }
    }
    EXPECT_EQ(vals(fill_tiles(img, order, 0, 2, fill)), vals(img));
    EXPECT_THROW(fill_tiles(img, order, 1, 2, std::vector<double>{0.1, 0.2}), DimensionError);
}

TEST(PerturbationCurve, AreaOverCurveAndCsv) {
    PerturbationCurve curve;
    curve.mean_logit = {2.0, 1.0, 0.5, 0.5};
    EXPECT_NEAR(curve.aoc(), (0.0 + 1.0 + 1.5 + 1.5) / 4.0, 1e-15);
    std::ostringstream os;
    curve.write_csv(os);
    EXPECT_EQ(os.str(), "step,mean_logit\n0,2.0\n1,1.0\n2,0.5\n3,0.5\n");
}

TEST(PerturbPolicy, ParsesBothNames) {
    EXPECT_EQ(parse_policy("relevance"), PerturbPolicy::Relevance);
    EXPECT_EQ(parse_policy("random"), PerturbPolicy::Random);
    EXPECT_THROW(parse_policy("shuffle"), ConfigError);
}

}  // namespace
}  // namespace pbsn
