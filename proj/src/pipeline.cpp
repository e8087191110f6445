#include "pbsn/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "pbsn/checkpoint.hpp"
#include "pbsn/errors.hpp"
#include "pbsn/image_io.hpp"
#include "pbsn/lrp.hpp"
#include "pbsn/ops.hpp"
#include "pbsn/outlier.hpp"
#include "pbsn/perturbation.hpp"
#include "pbsn/rng.hpp"
#include "pbsn/synthetic.hpp"

namespace pbsn {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string padded(std::size_t value, int width) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%0*zu", width, value);
    return buf;
}

/// Final learning-rate multiplier of the step schedule.
double schedule_end(const StudentTrainConfig& c) {
    if (c.epochs == 0 || c.lr_step_epochs == 0) return 1.0;
    return std::pow(c.gamma, static_cast<double>((c.epochs - 1) / c.lr_step_epochs));
}

}  // namespace

Datasets make_datasets(const DataConfig& config) {
    SyntheticSpec test_spec = config.train;
    test_spec.n_per_class = config.test_per_class;
    test_spec.seed = config.train.seed + 1;
    return {gen_dataset(config.train), gen_dataset(test_spec)};
}

std::vector<OutlierSetup> outlier_setups(const RunConfig& config, const Dataset& test) {
    const std::uint64_t base = config.data.train.seed;
    SyntheticSpec spec = config.data.train;
    spec.seed = base + 2;
    const auto& o = config.outlier;
    std::vector<OutlierSetup> setups;
    setups.push_back({"A", gen_disjoint_dataset(spec, test.size())});
    setups.push_back({"B", with_strokes(test, o.stroke_thickness, o.stroke_count,
                                        Rng::derive(base, 0x5770).bits())});
    setups.push_back({"C", with_altered_color(test, Rng::derive(base, 0xc010).bits(), o.color)});
    return setups;
}

Dataset spaced_subset(const Dataset& data, std::size_t count) {
    if (count == 0 || count > data.size()) {
        throw ConfigError("sample count " + std::to_string(count) + " must lie in [1, " +
                          std::to_string(data.size()) + "]");
    }
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = i * data.size() / count;
    return data.subset(idx);
}

std::size_t thread_limit() {
    const char* env = std::getenv("PBSN_THREADS");
    if (!env) return 1;
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || n < 1) {
        throw ConfigError("field 'PBSN_THREADS': must be a positive integer, got '" + std::string(env) + "'");
    }
    return static_cast<std::size_t>(n);
}

void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

json run_train_teacher(const RunConfig& config, const Datasets& data, const fs::path& out,
                       TeacherModel& teacher) {
    spdlog::info("training teacher: {} epochs on {} samples", config.teacher.epochs, data.train.size());
    teacher = train_teacher(data.train, &data.test, config.encoder, config.teacher);
    save_checkpoint(teacher, out / "teacher.ckpt");
    json metrics = {{"train_accuracy", teacher.train_accuracy},
                    {"test_accuracy", teacher_accuracy(teacher, data.test)},
                    {"epoch_losses", teacher.epoch_losses}};
    write_json(out / "teacher_metrics.json", metrics);
    spdlog::info("teacher test accuracy {:.4f}", metrics["test_accuracy"].get<double>());
    return metrics;
}

json run_train_student(const RunConfig& config, const Datasets& data, const TeacherModel& teacher,
                       const fs::path& out, StudentModel& student) {
    spdlog::info("training student head {} with K={}", to_string(config.student.head), config.prototypes());
    fs::create_directories(out);
    std::ofstream log(out / "train_student.ndjson");
    StudentTrainLog history;
    student = train_student(teacher, data.train, config.student, &history, &log);
    save_checkpoint(student, out / "student.ckpt");
    const double acc = student_accuracy(student, data.test);
    const double teacher_acc = teacher_accuracy(teacher, data.test);
    json epochs = json::array();
    for (const auto& e : history.epochs) {
        epochs.push_back({{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"mean_tau", e.mean_tau},
                          {"replaced", e.swaps.size()}});
    }
    json metrics = {{"head", to_string(student.head.kind)},
                    {"prototypes", student.prototypes()},
                    {"test_accuracy", acc},
                    {"teacher_test_accuracy", teacher_acc},
                    {"accuracy_gap_points", 100.0 * (teacher_acc - acc)},
                    {"prototype_ids", student.store.ids},
                    {"prototype_labels", student.store.labels},
                    {"epochs", epochs}};
    write_json(out / "student_metrics.json", metrics);
    spdlog::info("student test accuracy {:.4f} (teacher {:.4f})", acc, teacher_acc);
    return metrics;
}

json run_explain(const RunConfig& config, const Datasets& data, const StudentModel& student,
                 const fs::path& out) {
    const fs::path dir = out / "explain";
    const std::size_t count = std::min(config.explain_samples, data.test.size());
    const std::size_t topk = std::min(config.explain_topk, student.prototypes());
    json samples = json::array();
    for (std::size_t n = 0; n < count; ++n) {
        const std::size_t index = n * data.test.size() / count;
        const auto record = lrp_record(student, data.test.image(index));
        const auto u = u_scores(record.output);
        std::vector<std::size_t> order(u.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return u[a] > u[b]; });

        json pairs = json::array();
        for (std::size_t r = 0; r < topk; ++r) {
            const std::size_t k = order[r];
            const auto pair = heatmaps(student, record, k, config.lrp);
            const std::string stem = "sample" + padded(index, 5) + "_rank" + std::to_string(r);
            const auto files = export_heatmaps(pair, dir, stem);
            pairs.push_back({{"rank", r},
                             {"k", k},
                             {"prototype_id", student.store.ids[k]},
                             {"prototype_class", pair.prototype_label},
                             {"u_k", pair.u},
                             {"checksum", files.checksum}});
        }
        samples.push_back({{"index", index},
                           {"label", data.test.labels[index]},
                           {"predicted", record.predicted},
                           {"logit", record.logit},
                           {"pairs", pairs}});
    }
    json metrics = {{"topk", topk}, {"lrp", {{"alpha", config.lrp.alpha}, {"beta", config.lrp.beta},
                                             {"epsilon", config.lrp.epsilon}}},
                    {"samples", samples}};
    write_json(dir / "explain.json", metrics);
    return metrics;
}

json run_outlier_eval(const RunConfig& config, const Datasets& data, const StudentModel& student,
                      const fs::path& out) {
    const fs::path dir = out / "outlier";
    fs::create_directories(dir);
    json setups = json::object();
    for (const auto& setup : outlier_setups(config, data.test)) {
        json per_k = json::object();
        for (auto kprime : config.outlier.kprime) {
            const auto report =
                evaluate_outliers(student, data.test, setup.outliers, {kprime, config.outlier.per_class});
            const std::string stem = "setup_" + setup.name + "_k" + std::to_string(kprime);
            std::ostringstream csv;
            report.write_csv(csv);
            write_file(dir / (stem + ".csv"), csv.str());
            write_file(dir / (stem + ".json"), report.summary_json() + "\n");
            per_k[std::to_string(kprime)] = json::parse(report.summary_json());
            spdlog::info("setup {} k'={}: AUC o {:.4f}, max-prob {:.4f}", setup.name, kprime,
                         report.auc_topk, report.auc_maxprob);
        }
        setups[setup.name] = per_k;
    }
    json metrics = {{"head", to_string(student.head.kind)}, {"per_class", config.outlier.per_class},
                    {"setups", setups}};
    write_json(dir / "outlier_metrics.json", metrics);
    return metrics;
}

json run_perturb_eval(const RunConfig& config, const Datasets& data, const StudentModel& student,
                      const fs::path& out) {
    const fs::path dir = out / "perturb";
    const auto subset = spaced_subset(data.test, config.perturb_samples);
    const auto fill = data.train.channel_mean();
    PerturbConfig pc = config.perturb;
    pc.lrp = config.lrp;
    const auto curve = perturb_eval(student, subset, fill, pc);
    std::ostringstream csv;
    curve.write_csv(csv);
    const std::string policy = to_string(curve.policy);
    write_file(dir / ("curve_" + policy + ".csv"), csv.str());
    json metrics = {{"head", to_string(student.head.kind)},
                    {"policy", policy},
                    {"region", curve.region},
                    {"steps", curve.steps},
                    {"samples", curve.samples},
                    {"aoc", curve.aoc()},
                    {"mean_logit", curve.mean_logit}};
    write_json(dir / ("perturb_" + policy + ".json"), metrics);
    spdlog::info("perturbation ({}): AOC {:.4f}", policy, curve.aoc());
    return metrics;
}

json run_prune(const RunConfig& config, const Datasets& data, const TeacherModel& teacher,
               const StudentModel& student, const fs::path& out, StudentModel& pruned) {
    const double before = student_accuracy(student, data.test);
    pruned = prune(student, config.prune.fraction);
    const double after_prune = student_accuracy(pruned, data.test);

    std::vector<std::size_t> removed;
    for (auto id : student.store.ids) {
        if (std::find(pruned.store.ids.begin(), pruned.store.ids.end(), id) == pruned.store.ids.end()) {
            removed.push_back(id);
        }
    }

    StudentTrainConfig finetune = config.student;
    finetune.epochs = config.prune.finetune_epochs;
    finetune.head_lr *= schedule_end(config.student);
    finetune.encoder_lr *= schedule_end(config.student);
    finetune.lr_step_epochs = 0;
    finetune.p_fraction = 0.0;
    finetune.replace = false;
    if (finetune.epochs > 0) fit_student(pruned, teacher, data.train, finetune);
    const double after = student_accuracy(pruned, data.test);
    save_checkpoint(pruned, out / "student_pruned.ckpt");

    json metrics = {{"fraction", config.prune.fraction},
                    {"finetune_epochs", config.prune.finetune_epochs},
                    {"prototypes_before", student.prototypes()},
                    {"prototypes_after", pruned.prototypes()},
                    {"removed_ids", removed},
                    {"accuracy_before", before},
                    {"accuracy_pruned", after_prune},
                    {"accuracy_finetuned", after},
                    {"change_points", 100.0 * (after - before)}};
    write_json(out / "prune_metrics.json", metrics);
    spdlog::info("pruning: accuracy {:.4f} -> {:.4f} (finetuned {:.4f})", before, after_prune, after);
    return metrics;
}

json run_sweep(const RunConfig& config, const Datasets& data, const TeacherModel& teacher,
               const fs::path& out) {
    json rows = json::array();
    for (auto per_class : config.sweep_prototypes_per_class) {
        StudentTrainConfig sc = config.student;
        sc.prototypes_per_class = per_class;
        const auto student = train_student(teacher, data.train, sc);
        const double acc = student_accuracy(student, data.test);
        rows.push_back({{"prototypes_per_class", per_class},
                        {"prototypes", student.prototypes()},
                        {"test_accuracy", acc}});
        spdlog::info("sweep: {} per class -> accuracy {:.4f}", per_class, acc);
    }
    json metrics = {{"head", to_string(config.student.head)},
                    {"teacher_test_accuracy", teacher_accuracy(teacher, data.test)},
                    {"results", rows}};
    write_json(out / "sweep_metrics.json", metrics);
    return metrics;
}

}  // namespace pbsn
