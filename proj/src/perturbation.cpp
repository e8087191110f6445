#include "pbsn/perturbation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include <nlohmann/json.hpp>

#include "pbsn/errors.hpp"
#include "pbsn/outlier.hpp"
#include "pbsn/rng.hpp"

namespace pbsn {

PerturbPolicy parse_policy(std::string_view text) {
    if (text == "relevance") return PerturbPolicy::Relevance;
    if (text == "random") return PerturbPolicy::Random;
    throw ConfigError("policy must be 'relevance' or 'random', got '" + std::string(text) + "'");
}

const char* to_string(PerturbPolicy policy) {
    return policy == PerturbPolicy::Relevance ? "relevance" : "random";
}

double PerturbationCurve::aoc() const {
    if (mean_logit.empty()) return 0.0;
    double acc = 0.0;
    for (double f : mean_logit) acc += mean_logit.front() - f;
    return acc / static_cast<double>(mean_logit.size());
}

void PerturbationCurve::write_csv(std::ostream& os) const {
    os << "step,mean_logit\n";
    for (std::size_t k = 0; k < mean_logit.size(); ++k) {
        os << k << ',' << nlohmann::json(mean_logit[k]).dump() << '\n';
    }
}

namespace {

void check_region(std::size_t H, std::size_t W, std::size_t region) {
    if (region == 0 || H % region != 0 || W % region != 0) {
        throw ConfigError("region: " + std::to_string(region) + " does not divide the " +
                          std::to_string(H) + "x" + std::to_string(W) + " image");
    }
}

}  // namespace

std::vector<std::size_t> tiles_by_relevance(const Tensor& heatmap, std::size_t region) {
    const std::size_t H = heatmap.dim(0), W = heatmap.dim(1);
    check_region(H, W, region);
    const std::size_t ty = H / region, tx = W / region;
    std::vector<double> score(ty * tx, 0.0);
    const auto v = heatmap.values();
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) score[(y / region) * tx + x / region] += std::abs(v[y * W + x]);
    }
    std::vector<std::size_t> order(score.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return score[a] > score[b]; });
    return order;
}

Tensor fill_tiles(const Tensor& image, std::span<const std::size_t> order, std::size_t count,
                  std::size_t region, std::span<const double> fill) {
    const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
    check_region(H, W, region);
    if (fill.size() != C) throw DimensionError("fill_tiles: need one fill value per channel");
    const std::size_t tx = W / region;
    std::vector<double> out(image.values().begin(), image.values().end());
    for (std::size_t i = 0; i < count && i < order.size(); ++i) {
        const std::size_t y0 = (order[i] / tx) * region, x0 = (order[i] % tx) * region;
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t y = y0; y < y0 + region; ++y) {
                for (std::size_t x = x0; x < x0 + region; ++x) out[(c * H + y) * W + x] = fill[c];
            }
        }
    }
    return Tensor(image.shape(), std::move(out));
}

PerturbationCurve perturb_eval(const StudentModel& student, const Dataset& data,
                               std::span<const double> fill, const PerturbConfig& config) {
    config.lrp.validate();
    const std::size_t H = data.height(), W = data.width();
    check_region(H, W, config.region);
    const std::size_t tiles = (H / config.region) * (W / config.region);
    if (config.steps > tiles) {
        throw ConfigError("steps: " + std::to_string(config.steps) + " exceeds the " +
                          std::to_string(tiles) + " tiles of the image");
    }

    PerturbationCurve curve;
    curve.region = config.region;
    curve.steps = config.steps;
    curve.policy = config.policy;
    curve.samples = data.size();
    curve.mean_logit.assign(config.steps + 1, 0.0);
    if (data.size() == 0) return curve;

    for (std::size_t i = 0; i < data.size(); ++i) {
        const Tensor image = data.image(i);
        const auto record = lrp_record(student, image);
        std::vector<std::size_t> order;
        if (config.policy == PerturbPolicy::Relevance) {
            const auto u = u_scores(record.output);
            const auto top = static_cast<std::size_t>(std::max_element(u.begin(), u.end()) - u.begin());
            order = tiles_by_relevance(heatmaps(student, record, top, config.lrp).input_map, config.region);
        } else {
            order.resize(tiles);
            std::iota(order.begin(), order.end(), 0);
            Rng rng = Rng::derive(config.seed, i);
            rng.shuffle(order);
        }
        std::vector<double> batch;
        batch.reserve((config.steps + 1) * image.size());
        for (std::size_t k = 0; k <= config.steps; ++k) {
            const auto img = fill_tiles(image, order, k, config.region, fill);
            batch.insert(batch.end(), img.values().begin(), img.values().end());
        }
        const auto logits = student_logits(
            student, Tensor({config.steps + 1, image.dim(0), H, W}, std::move(batch)));
        const std::size_t classes = student.classes();
        for (std::size_t k = 0; k <= config.steps; ++k) {
            curve.mean_logit[k] += logits.values()[k * classes + static_cast<std::size_t>(record.predicted)];
        }
    }
    for (auto& v : curve.mean_logit) v /= static_cast<double>(data.size());
    return curve;
}

}  // namespace pbsn
