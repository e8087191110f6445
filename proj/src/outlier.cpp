#include "pbsn/outlier.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <ostream>

#include <nlohmann/json.hpp>

#include "pbsn/errors.hpp"
#include "pbsn/losses.hpp"
#include "pbsn/ops.hpp"

namespace pbsn {

std::vector<double> u_scores(const HeadOutput& out) {
    const std::size_t B = out.batch(), K = out.prototypes();
    if (!is_attention_head(out.kind)) {
        const auto z = out.z.values();
        return {z.begin(), z.end()};
    }
    const std::size_t S = out.similarity.dim(2);
    const auto att = out.attention.values();
    std::vector<double> u(B * K, 0.0);
    if (out.kind == HeadKind::IIIC) {
        NoGradGuard guard;
        const auto cosine = position_similarity(out.x_hat.detach(), out.p_hat.detach());
        const auto s = cosine.values();
        const auto pa = out.proto_attention.values();
        for (std::size_t i = 0; i < B * K; ++i) {
            double best = 0.0;
            for (std::size_t j = 0; j < S; ++j) {
                best = std::max(best, att[i * S + j] * pa[i * S + j] * s[i * S + j]);
            }
            u[i] = best;
        }
        return u;
    }
    const auto s = out.similarity.values();
    for (std::size_t i = 0; i < B * K; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < S; ++j) acc += att[i * S + j] * s[i * S + j];
        u[i] = acc / static_cast<double>(S);
    }
    return u;
}

std::vector<double> u_scores(const StudentModel& student, const Tensor& images) {
    NoGradGuard guard;
    const auto fp = student.prototype_features();
    const std::size_t N = images.dim(0);
    const std::size_t per = images.size() / std::max<std::size_t>(N, 1);
    constexpr std::size_t kChunk = 128;
    std::vector<double> out;
    for (std::size_t start = 0; start < N; start += kChunk) {
        const std::size_t n = std::min(kChunk, N - start);
        Shape shape = images.shape();
        shape[0] = n;
        const auto part = images.values().subspan(start * per, n * per);
        const auto u =
            u_scores(student.forward_with(Tensor(shape, std::vector<double>(part.begin(), part.end())), fp));
        out.insert(out.end(), u.begin(), u.end());
    }
    return out;
}

double outlier_score(std::span<const double> u, std::size_t kprime) {
    if (kprime < 1 || kprime > u.size()) {
        throw ParameterError("outlier_score: k' = " + std::to_string(kprime) + " outside [1, " +
                             std::to_string(u.size()) + "]");
    }
    std::vector<double> sorted(u.begin(), u.end());
    std::partial_sort(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(kprime), sorted.end(),
                      std::greater<>());
    double acc = 0.0;
    for (std::size_t i = 0; i < kprime; ++i) acc += sorted[i];
    return 1.0 - acc / static_cast<double>(kprime);
}

std::vector<double> restrict_to_class(std::span<const double> u, std::span<const int> proto_labels,
                                      int cls) {
    if (u.size() != proto_labels.size()) throw DimensionError("restrict_to_class: length mismatch");
    std::vector<double> out;
    for (std::size_t k = 0; k < u.size(); ++k) {
        if (proto_labels[k] == cls) out.push_back(u[k]);
    }
    return out;
}

std::vector<double> maxprob_scores(const Tensor& logits) {
    const auto probs = ops::softmax(logits.detach());
    const std::size_t width = logits.shape().back();
    const auto p = probs.values();
    std::vector<double> out(p.size() / width);
    for (std::size_t r = 0; r < out.size(); ++r) {
        out[r] = -*std::max_element(p.begin() + static_cast<std::ptrdiff_t>(r * width),
                                    p.begin() + static_cast<std::ptrdiff_t>((r + 1) * width));
    }
    return out;
}

double auc(std::span<const double> scores, const std::vector<bool>& is_outlier) {
    if (scores.size() != is_outlier.size()) throw MetricError("auc: scores and labels differ in length");
    const std::size_t n = scores.size();
    const auto n_out = static_cast<std::size_t>(std::count(is_outlier.begin(), is_outlier.end(), true));
    const std::size_t n_norm = n - n_out;
    if (n_out == 0 || n_norm == 0) throw MetricError("auc: need both normal and outlier samples");
    for (double s : scores) {
        if (!std::isfinite(s)) throw MetricError("auc: non-finite score");
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
    // Average ranks (1-based, ties share the mean rank), kept as twice the
    // rank so every quantity stays an exact integer.
    double twice_rank_sum = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double twice_rank = static_cast<double>(i + 1 + j);
        for (std::size_t t = i; t < j; ++t) {
            if (is_outlier[order[t]]) twice_rank_sum += twice_rank;
        }
        i = j;
    }
    const double no = static_cast<double>(n_out), nn = static_cast<double>(n_norm);
    const double twice_u = twice_rank_sum - no * (no + 1.0);
    return twice_u / 2.0 / (no * nn);
}

void OutlierReport::write_csv(std::ostream& os) const {
    os << "sample_id,label,o,maxprob,pred_class\n";
    for (const auto& s : samples) {
        nlohmann::json o = s.o, m = s.maxprob;
        os << s.id << ',' << (s.outlier ? "outlier" : "normal") << ',' << o.dump() << ','
           << m.dump() << ',' << s.predicted << '\n';
    }
}

std::string OutlierReport::summary_json() const {
    const auto n_out = std::count_if(samples.begin(), samples.end(), [](auto& s) { return s.outlier; });
    nlohmann::json j = {{"auc_o_top1", auc_top1},
                        {"auc_o_topk", auc_topk},
                        {"auc_o_all", auc_all},
                        {"auc_maxprob", auc_maxprob},
                        {"kprime", kprime},
                        {"normal", samples.size() - static_cast<std::size_t>(n_out)},
                        {"outlier", n_out}};
    return j.dump(2);
}

OutlierReport evaluate_outliers(const StudentModel& student, const Dataset& normal,
                                const Dataset& outliers, const OutlierConfig& config) {
    const std::size_t K = student.prototypes();
    if (config.kprime < 1 || config.kprime > K) {
        throw ParameterError("outlier: k' = " + std::to_string(config.kprime) + " outside [1, " +
                             std::to_string(K) + "]");
    }
    OutlierReport report;
    report.kprime = config.kprime;
    std::vector<double> top1, topk, all, maxprob;
    std::vector<bool> flags;
    std::size_t id = 0;
    for (const Dataset* data : {&normal, &outliers}) {
        if (data->size() == 0) continue;
        const auto u = u_scores(student, data->images);
        const auto logits = student_logits(student, data->images);
        const auto pred = argmax_rows(logits);
        const auto mp = maxprob_scores(logits);
        for (std::size_t i = 0; i < data->size(); ++i, ++id) {
            OutlierSample s;
            s.id = id;
            s.outlier = data == &outliers;
            s.u.assign(u.begin() + static_cast<std::ptrdiff_t>(i * K),
                       u.begin() + static_cast<std::ptrdiff_t>((i + 1) * K));
            s.predicted = pred[i];
            s.maxprob = mp[i];
            const auto scored =
                config.per_class ? restrict_to_class(s.u, student.store.labels, s.predicted) : s.u;
            s.o = outlier_score(scored, std::min(config.kprime, scored.size()));
            top1.push_back(outlier_score(scored, 1));
            topk.push_back(s.o);
            all.push_back(outlier_score(scored, scored.size()));
            maxprob.push_back(s.maxprob);
            flags.push_back(s.outlier);
            report.samples.push_back(std::move(s));
        }
    }
    report.auc_top1 = auc(top1, flags);
    report.auc_topk = auc(topk, flags);
    report.auc_all = auc(all, flags);
    report.auc_maxprob = auc(maxprob, flags);
    return report;
}

}  // namespace pbsn
