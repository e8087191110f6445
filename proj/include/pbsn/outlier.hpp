#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "pbsn/dataset.hpp"
#include "pbsn/heads.hpp"
#include "pbsn/student.hpp"

namespace pbsn {

/// Per-prototype similarity scores u_k of every sample in a head output,
/// row-major [B,K]:
///   I, II-A, II-B  u_k = z_k
///   III-A, III-B   u_k = spatial mean of a * s (the head's own cosine map)
///   III-C          u_k = spatial max of a_input * a_proto * s_IIA
std::vector<double> u_scores(const HeadOutput& out);
/// Scores for a batch of images [N,C0,H0,W0], chunked, no gradient.
std::vector<double> u_scores(const StudentModel& student, const Tensor& images);

/// 1 - mean of the k' largest entries. Throws ParameterError unless
/// 1 <= k' <= |U|.
double outlier_score(std::span<const double> u, std::size_t kprime);

/// Entries of U belonging to prototypes of one class.
std::vector<double> restrict_to_class(std::span<const double> u, std::span<const int> proto_labels,
                                      int cls);

/// -max softmax(y) per row of a logit matrix.
std::vector<double> maxprob_scores(const Tensor& logits);

/// Mann-Whitney AUC: probability that a random outlier scores higher than a
/// random normal sample, ties counting one half. Throws MetricError when
/// either group is empty or the lengths differ.
double auc(std::span<const double> scores, const std::vector<bool>& is_outlier);

struct OutlierSample {
    std::size_t id = 0;
    bool outlier = false;
    std::vector<double> u;
    double o = 0.0;  // at the report's k'
    double maxprob = 0.0;
    int predicted = 0;
};

struct OutlierConfig {
    std::size_t kprime = 20;
    /// Score only against prototypes of the predicted class.
    bool per_class = false;
};

struct OutlierReport {
    std::vector<OutlierSample> samples;
    std::size_t kprime = 0;
    double auc_top1 = 0.0;
    double auc_topk = 0.0;
    double auc_all = 0.0;
    double auc_maxprob = 0.0;

    void write_csv(std::ostream& os) const;
    /// {auc_o_top1, auc_o_topk, auc_o_all, auc_maxprob, kprime, normal, outlier}
    std::string summary_json() const;
};

/// Scores `normal` and `outliers` together; ids run over the concatenation.
OutlierReport evaluate_outliers(const StudentModel& student, const Dataset& normal,
                                const Dataset& outliers, const OutlierConfig& config);

}  // namespace pbsn
