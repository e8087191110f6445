#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "pbsn/dataset.hpp"
#include "pbsn/encoder.hpp"
#include "pbsn/heads.hpp"
#include "pbsn/losses.hpp"
#include "pbsn/prototypes.hpp"

namespace pbsn {

struct StudentTrainConfig {
    HeadKind head = HeadKind::IIB;
    std::size_t prototypes_per_class = 10;
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    /// Caps the iterations per epoch; 0 runs a full pass over the data.
    std::size_t iterations_per_epoch = 0;
    double head_lr = 1e-3;
    double encoder_lr = 1e-4;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::size_t lr_step_epochs = 10;
    double gamma = 0.1;
    LossWeights weights;
    /// Fraction of prototypes masked each step and replaced each epoch.
    /// 0 disables both.
    double p_fraction = 0.3;
    /// Skip the end-of-epoch replacement (finetuning a fixed prototype set).
    bool replace = true;
    std::uint64_t seed = 0;

    void validate() const;
    /// round(p_fraction * K); 1 <= p < K unless p_fraction is 0.
    std::size_t masked_count(std::size_t prototypes) const;
};

struct StudentModel {
    Encoder encoder;
    HeadModel head;
    PrototypeStore store;

    std::size_t classes() const { return head.classes(); }
    std::size_t prototypes() const { return store.size(); }

    /// Encodes the prototypes and the batch with the current encoder and
    /// runs the head. Records gradients unless a NoGradGuard is active.
    HeadOutput forward(const Tensor& images) const;
    /// Prototype features f(p_k) [K,C,H,W] without gradient.
    Tensor prototype_features() const;
    /// Head pass against precomputed prototype features.
    HeadOutput forward_with(const Tensor& images, const Tensor& prototype_features) const;

    std::vector<Tensor> parameters() const;
    StudentModel clone() const;
};

struct SwapRecord {
    std::size_t slot = 0;
    std::size_t removed_id = 0;
    std::size_t added_id = 0;
    int label = 0;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double mean_loss = 0.0;
    double mean_tau = 0.0;
    std::vector<SwapRecord> swaps;
    std::vector<std::size_t> prototype_ids;  // P after the epoch's replacement
};

struct StudentTrainLog {
    std::vector<double> step_losses;
    std::vector<EpochRecord> epochs;
};

/// Student with the teacher's encoder weights, a fresh head, and a
/// class-balanced prototype draw from `train`.
StudentModel initialize_student(const TeacherModel& teacher, const Dataset& train,
                                const StudentTrainConfig& config);

/// Runs the replacement training loop on an existing student. Optional
/// NDJSON records go to `log`, one per iteration and one per replacement.
/// Throws TrainingError (naming epoch and step) on non-finite losses and
/// ReplacementError when D has no sample of a needed class.
StudentTrainLog fit_student(StudentModel& student, const TeacherModel& teacher, const Dataset& train,
                            const StudentTrainConfig& config, std::ostream* log = nullptr);

StudentModel train_student(const TeacherModel& teacher, const Dataset& train,
                           const StudentTrainConfig& config, StudentTrainLog* log_out = nullptr,
                           std::ostream* log = nullptr);

/// Logits for a batch without gradient, chunked.
Tensor student_logits(const StudentModel& student, const Tensor& images);
double student_accuracy(const StudentModel& student, const Dataset& data);

/// Removes the round(fraction*K) prototypes with the smallest importance
/// together with their weight columns. Throws PruningError if a class would
/// lose all of its prototypes.
StudentModel prune(const StudentModel& student, double fraction);

}  // namespace pbsn
