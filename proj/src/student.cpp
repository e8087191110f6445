#include "pbsn/student.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "pbsn/errors.hpp"
#include "pbsn/ops.hpp"
#include "pbsn/optim.hpp"
#include "pbsn/rng.hpp"

namespace pbsn {

void StudentTrainConfig::validate() const {
    if (prototypes_per_class == 0) throw ConfigError("prototypes_per_class must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(head_lr > 0.0) || !(encoder_lr >= 0.0)) {
        throw ConfigError("lr: head rate must be positive and encoder rate nonnegative");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0,1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be nonnegative");
    if (!(gamma > 0.0)) throw ConfigError("gamma must be positive");
    if (!(p_fraction >= 0.0 && p_fraction < 1.0)) throw ConfigError("p_fraction must lie in [0,1)");
    weights.validate();
}

std::size_t StudentTrainConfig::masked_count(std::size_t prototypes) const {
    if (p_fraction == 0.0) return 0;
    const auto p = static_cast<std::size_t>(std::llround(p_fraction * static_cast<double>(prototypes)));
    if (p < 1 || p >= prototypes) {
        throw ConfigError("p_fraction: " + std::to_string(p_fraction) + " of " +
                          std::to_string(prototypes) + " prototypes gives p = " + std::to_string(p) +
                          ", need 1 <= p < K");
    }
    return p;
}

// ---------------------------------------------------------------------------

Tensor StudentModel::prototype_features() const {
    NoGradGuard guard;
    return encoder.encode(store.images);
}

HeadOutput StudentModel::forward(const Tensor& images) const {
    return head_forward(encoder.encode(images), encoder.encode(store.images), head);
}

HeadOutput StudentModel::forward_with(const Tensor& images, const Tensor& prototype_features) const {
    return head_forward(encoder.encode(images), prototype_features, head);
}

std::vector<Tensor> StudentModel::parameters() const {
    auto out = encoder.parameters();
    for (auto& t : head.parameters()) out.push_back(t);
    out.push_back(store.importance);
    return out;
}

StudentModel StudentModel::clone() const {
    StudentModel m{encoder.clone(), head.clone(), store};
    m.store.images = store.images.detach();
    const auto mv = store.importance.values();
    m.store.importance = Tensor::parameter(store.importance.shape(), {mv.begin(), mv.end()});
    return m;
}

StudentModel initialize_student(const TeacherModel& teacher, const Dataset& train,
                                const StudentTrainConfig& config) {
    config.validate();
    if (teacher.classes != train.classes) {
        throw ConfigError("student: teacher has " + std::to_string(teacher.classes) +
                          " classes but the data has " + std::to_string(train.classes));
    }
    auto store = PrototypeStore::sample(train, config.prototypes_per_class, config.seed);
    config.masked_count(store.size());
    auto head = HeadModel::initialize(config.head, train.classes, store.size(),
                                      teacher.encoder.config().feature_channels, config.seed);
    return StudentModel{teacher.encoder.clone(), std::move(head), std::move(store)};
}

namespace {

std::vector<double> soft_labels_for(const TeacherModel& teacher, const Dataset& train) {
    std::vector<double> out;
    out.reserve(train.size() * teacher.classes);
    constexpr std::size_t kChunk = 128;
    for (std::size_t start = 0; start < train.size(); start += kChunk) {
        std::vector<std::size_t> idx(std::min(kChunk, train.size() - start));
        std::iota(idx.begin(), idx.end(), start);
        const auto probs = teacher_soft_labels(teacher, train.gather(idx));
        out.insert(out.end(), probs.values().begin(), probs.values().end());
    }
    return out;
}

std::vector<SwapRecord> replace_lowest(StudentModel& student, const Dataset& train, std::size_t p,
                                       Rng& rng) {
    auto& store = student.store;
    const auto slots = lowest_importance(store.importance.values(), p);
    std::vector<std::size_t> removed;
    for (auto k : slots) removed.push_back(store.ids[k]);
    std::vector<SwapRecord> swaps;
    for (auto k : slots) {
        const int label = store.labels[k];
        std::vector<std::size_t> candidates;
        for (auto id : store.pool) {
            if (train.labels[id] == label &&
                std::find(removed.begin(), removed.end(), id) == removed.end()) {
                candidates.push_back(id);
            }
        }
        if (candidates.empty()) {
            throw ReplacementError("replacement: no sample of class " + std::to_string(label) +
                                   " left in D");
        }
        const std::size_t id = candidates[rng.index(candidates.size())];
        swaps.push_back({k, store.ids[k], id, label});
        store.swap_in(k, id, train);
    }
    auto m = store.importance.mutable_values();
    for (auto k : slots) m[k] = kInitialImportance;
    return swaps;
}

}  // namespace

StudentTrainLog fit_student(StudentModel& student, const TeacherModel& teacher, const Dataset& train,
                            const StudentTrainConfig& config, std::ostream* log) {
    config.validate();
    if (train.size() == 0) throw ConfigError("fit_student: empty training set");
    const std::size_t K = student.prototypes();
    const std::size_t p = config.masked_count(K);
    const std::size_t classes = student.classes();
    const auto soft = soft_labels_for(teacher, train);

    std::vector<Tensor> head_params = student.head.parameters();
    head_params.push_back(student.store.importance);
    Sgd sgd({{student.encoder.parameters(), config.encoder_lr}, {head_params, config.head_lr}},
            config.momentum, config.weight_decay);

    Rng order_rng = Rng::derive(config.seed, 0x0dd3ULL);
    Rng replace_rng = Rng::derive(config.seed, 0x7e91ULL);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    StudentTrainLog result;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        order_rng.shuffle(order);
        const double lr_scale = step_decay(epoch, config.lr_step_epochs, config.gamma);
        std::size_t iterations = (order.size() + config.batch_size - 1) / config.batch_size;
        if (config.iterations_per_epoch) iterations = std::min(iterations, config.iterations_per_epoch);

        EpochRecord record;
        record.epoch = epoch;
        for (std::size_t it = 0; it < iterations; ++it, ++step) {
            const std::size_t start = it * config.batch_size;
            const std::size_t n = std::min(config.batch_size, order.size() - start);
            std::span<const std::size_t> idx(order.data() + start, n);
            std::vector<int> labels;
            std::vector<double> targets;
            for (auto i : idx) {
                labels.push_back(train.labels[i]);
                targets.insert(targets.end(), soft.begin() + static_cast<std::ptrdiff_t>(i * classes),
                               soft.begin() + static_cast<std::ptrdiff_t>((i + 1) * classes));
            }

            LossTerms terms;
            double tau = 0.0;
            try {
                const auto out = student.forward(train.gather(idx));
                const auto predicted = argmax_rows(out.logits);
                tau = p ? threshold(student.store.importance.values(), p) : 0.0;
                const auto mask = straight_through_mask(student.store.importance, p);
                const auto y_mask =
                    masked_logits(out.z, mask, student.head.weight, student.head.bias);
                terms = total_loss(out.logits, labels, Tensor({n, classes}, std::move(targets)),
                                   y_mask, predicted,
                                   prototype_loss(out, labels, student.store.labels), config.weights);
            } catch (const NumericalError& e) {
                throw TrainingError("train_student: epoch " + std::to_string(epoch) + " step " +
                                    std::to_string(step) + ": " + e.what());
            }
            terms.total.backward();
            sgd.step(lr_scale);
            student.head.clip_channel_weights();

            result.step_losses.push_back(terms.total.item());
            record.mean_loss += terms.total.item();
            record.mean_tau += tau;
            if (log) {
                nlohmann::json line = {
                    {"epoch", epoch},
                    {"iter", it},
                    {"loss",
                     {{"total", terms.total.item()},
                      {"supervised", terms.supervised.item()},
                      {"distill", terms.distill.item()},
                      {"mask", terms.mask.item()},
                      {"prototype", terms.prototype.item()}}},
                    {"tau", tau}};
                *log << line.dump() << '\n';
            }
        }
        if (iterations) {
            record.mean_loss /= static_cast<double>(iterations);
            record.mean_tau /= static_cast<double>(iterations);
        }

        // The last epoch keeps its prototypes: a fresh draw would enter the
        // final model without any training against it.
        if (config.replace && p > 0 && epoch + 1 < config.epochs) {
            record.swaps = replace_lowest(student, train, p, replace_rng);
            std::vector<std::size_t> slots;
            for (const auto& s : record.swaps) slots.push_back(s.slot);
            sgd.reset_velocity(student.store.importance, slots);
            if (log) {
                nlohmann::json swaps = nlohmann::json::array();
                for (const auto& s : record.swaps) {
                    swaps.push_back({{"slot", s.slot},
                                     {"removed", s.removed_id},
                                     {"added", s.added_id},
                                     {"label", s.label}});
                }
                *log << nlohmann::json{{"epoch", epoch}, {"replaced", swaps}}.dump() << '\n';
            }
        }
        record.prototype_ids = student.store.ids;
        spdlog::debug("student epoch {} loss {:.5f} tau {:.5f}", epoch, record.mean_loss,
                      record.mean_tau);
        result.epochs.push_back(std::move(record));
    }
    return result;
}

StudentModel train_student(const TeacherModel& teacher, const Dataset& train,
                           const StudentTrainConfig& config, StudentTrainLog* log_out,
                           std::ostream* log) {
    auto student = initialize_student(teacher, train, config);
    auto history = fit_student(student, teacher, train, config, log);
    if (log_out) *log_out = std::move(history);
    return student;
}

Tensor student_logits(const StudentModel& student, const Tensor& images) {
    NoGradGuard guard;
    const auto fp = student.prototype_features();
    if (images.rank() == 3) {
        return ops::reshape(student.forward_with(ops::reshape(images, {1, images.dim(0), images.dim(1),
                                                                       images.dim(2)}),
                                                 fp)
                                .logits,
                            {student.classes()});
    }
    const std::size_t N = images.dim(0);
    const std::size_t per = images.size() / std::max<std::size_t>(N, 1);
    constexpr std::size_t kChunk = 128;
    std::vector<double> out;
    out.reserve(N * student.classes());
    for (std::size_t start = 0; start < N; start += kChunk) {
        const std::size_t n = std::min(kChunk, N - start);
        Shape shape = images.shape();
        shape[0] = n;
        const auto part = images.values().subspan(start * per, n * per);
        const auto logits =
            student.forward_with(Tensor(shape, std::vector<double>(part.begin(), part.end())), fp).logits;
        out.insert(out.end(), logits.values().begin(), logits.values().end());
    }
    return Tensor({N, student.classes()}, std::move(out));
}

double student_accuracy(const StudentModel& student, const Dataset& data) {
    if (data.size() == 0) return 0.0;
    const auto pred = argmax_rows(student_logits(student, data.images));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i];
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

StudentModel prune(const StudentModel& student, double fraction) {
    if (!(fraction > 0.0 && fraction < 1.0)) {
        throw PruningError("prune: fraction must lie in (0,1), got " + std::to_string(fraction));
    }
    const std::size_t K = student.prototypes();
    const auto m = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(K)));
    const auto removed = lowest_importance(student.store.importance.values(), m);
    std::vector<char> drop(K, 0);
    for (auto k : removed) drop[k] = 1;
    std::vector<std::size_t> keep;
    std::vector<std::size_t> remaining(student.classes(), 0);
    for (std::size_t k = 0; k < K; ++k) {
        if (!drop[k]) {
            keep.push_back(k);
            ++remaining[static_cast<std::size_t>(student.store.labels[k])];
        }
    }
    for (std::size_t c = 0; c < remaining.size(); ++c) {
        if (remaining[c] == 0) {
            throw PruningError("prune: removing " + std::to_string(m) +
                               " prototypes would leave class " + std::to_string(c) + " without any");
        }
    }

    StudentModel out = student.clone();
    out.store.retain(keep);
    const std::size_t classes = student.classes();
    const auto w = student.head.weight.values();
    std::vector<double> nw;
    nw.reserve(classes * keep.size());
    for (std::size_t c = 0; c < classes; ++c) {
        for (auto k : keep) nw.push_back(w[c * K + k]);
    }
    out.head.weight = Tensor::parameter({classes, keep.size()}, std::move(nw));
    return out;
}

}  // namespace pbsn
