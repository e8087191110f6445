#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "pbsn/checkpoint.hpp"
#include "pbsn/config.hpp"
#include "pbsn/errors.hpp"
#include "pbsn/image_io.hpp"
#include "pbsn/pipeline.hpp"

namespace fs = std::filesystem;
using namespace pbsn;

namespace {

struct Overrides {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> head;
    std::optional<std::size_t> protos_per_class;
    std::optional<std::string> kprime;
    std::optional<std::string> out;
    std::optional<std::size_t> topk;
    std::optional<double> prune_fraction;
    std::optional<std::size_t> region;
    std::optional<std::size_t> steps;
    std::optional<std::string> policy;
    std::optional<std::size_t> samples;
    std::string teacher_path;
    std::string student_path;
};

std::vector<std::size_t> parse_list(const std::string& text, const char* field) {
    std::vector<std::size_t> out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto comma = text.find(',', pos);
        const std::string item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        try {
            std::size_t used = 0;
            const auto value = std::stoull(item, &used);
            if (used != item.size()) throw std::invalid_argument(item);
            out.push_back(static_cast<std::size_t>(value));
        } catch (const std::logic_error&) {
            throw ConfigError(std::string("field '") + field + "': '" + text +
                              "' is not a comma-separated list of integers");
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

RunConfig resolve(const Overrides& o) {
    RunConfig c = o.config_path.empty() ? RunConfig{} : load_config(o.config_path);
    if (o.seed) c.seed = *o.seed;
    if (o.head) {
        try {
            c.student.head = parse_head_kind(*o.head);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("field 'student.head': ") + e.what());
        }
    }
    if (o.protos_per_class) c.student.prototypes_per_class = *o.protos_per_class;
    if (o.kprime) c.outlier.kprime = parse_list(*o.kprime, "outlier.kprime");
    if (o.out) c.output = *o.out;
    if (o.topk) c.explain_topk = *o.topk;
    if (o.prune_fraction) c.prune.fraction = *o.prune_fraction;
    if (o.region) c.perturb.region = *o.region;
    if (o.steps) c.perturb.steps = *o.steps;
    if (o.policy) {
        try {
            c.perturb.policy = parse_policy(*o.policy);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("field 'perturb.policy': ") + e.what());
        }
    }
    if (o.samples) {
        c.explain_samples = *o.samples;
        c.perturb_samples = *o.samples;
    }
    c.propagate_seed();
    c.validate();
    return c;
}

TeacherModel obtain_teacher(const RunConfig& c, const Overrides& o, const Datasets& data) {
    const fs::path path = o.teacher_path.empty() ? c.output / "teacher.ckpt" : fs::path(o.teacher_path);
    if (fs::exists(path)) {
        spdlog::info("loading teacher from {}", path.string());
        return load_teacher(path);
    }
    if (!o.teacher_path.empty()) throw std::runtime_error("teacher checkpoint not found: " + path.string());
    TeacherModel teacher;
    run_train_teacher(c, data, c.output, teacher);
    return teacher;
}

StudentModel obtain_student(const RunConfig& c, const Overrides& o) {
    const fs::path path = o.student_path.empty() ? c.output / "student.ckpt" : fs::path(o.student_path);
    if (!fs::exists(path)) {
        throw std::runtime_error("student checkpoint not found: " + path.string() +
                                 " (run train-student first or pass --student)");
    }
    spdlog::info("loading student from {}", path.string());
    return load_student(path);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Prototype-based student networks: training, explanation and evaluation"};
    app.require_subcommand(1);
    app.fallthrough();
    Overrides o;
    bool verbose = false;

    app.add_option("--config", o.config_path, "JSON run configuration");
    app.add_option("--seed", o.seed, "run seed (teacher, student and perturbation)");
    app.add_option("--head", o.head, "head kind: I, II-A, II-B, III-A, III-B, III-C");
    app.add_option("--protos-per-class", o.protos_per_class, "prototypes per class");
    app.add_option("--kprime", o.kprime, "comma-separated k' values for outlier scores");
    app.add_option("--out", o.out, "output directory");
    app.add_option("--topk", o.topk, "prototype pairs explained per sample");
    app.add_option("--prune-fraction", o.prune_fraction, "fraction of prototypes to prune");
    app.add_option("--region", o.region, "perturbation tile size in pixels");
    app.add_option("--steps", o.steps, "number of perturbation steps");
    app.add_option("--policy", o.policy, "perturbation order: relevance or random");
    app.add_option("--samples", o.samples, "samples to explain or perturb");
    app.add_option("--teacher", o.teacher_path, "teacher checkpoint to load");
    app.add_option("--student", o.student_path, "student checkpoint to load");
    app.add_flag("-v,--verbose", verbose, "debug logging");

    auto* gen = app.add_subcommand("gen-dataset", "write the synthetic train/test splits as PPM images");
    auto* teacher_cmd = app.add_subcommand("train-teacher", "train the teacher classifier");
    auto* student_cmd = app.add_subcommand("train-student", "train a prototype student from the teacher");
    auto* explain_cmd = app.add_subcommand("explain", "export relevance heatmaps for top prototypes");
    auto* outlier_cmd = app.add_subcommand("outlier-eval", "outlier AUCs on setups A, B and C");
    auto* perturb_cmd = app.add_subcommand("perturb-eval", "region perturbation curve");
    auto* prune_cmd = app.add_subcommand("prune", "prune low-importance prototypes and finetune");
    auto* sweep_cmd = app.add_subcommand("sweep-prototypes", "accuracy for several prototype counts");

    CLI11_PARSE(app, argc, argv);
    spdlog::set_default_logger(spdlog::stderr_color_mt("pbsn"));
    spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

    try {
        spdlog::debug("thread cap {}", thread_limit());
        const RunConfig c = resolve(o);
        const fs::path out = c.output;
        fs::create_directories(out);
        write_json(out / "config.json", to_json(c));
        const Datasets data = make_datasets(c.data);

        if (gen->parsed()) {
            save_dataset(data.train, out / "data" / "train");
            save_dataset(data.test, out / "data" / "test");
            spdlog::info("wrote {} train and {} test images", data.train.size(), data.test.size());
        } else if (teacher_cmd->parsed()) {
            TeacherModel teacher;
            run_train_teacher(c, data, out, teacher);
        } else if (student_cmd->parsed()) {
            const auto teacher = obtain_teacher(c, o, data);
            StudentModel student;
            run_train_student(c, data, teacher, out, student);
        } else if (explain_cmd->parsed()) {
            run_explain(c, data, obtain_student(c, o), out);
        } else if (outlier_cmd->parsed()) {
            run_outlier_eval(c, data, obtain_student(c, o), out);
        } else if (perturb_cmd->parsed()) {
            run_perturb_eval(c, data, obtain_student(c, o), out);
        } else if (prune_cmd->parsed()) {
            const auto teacher = obtain_teacher(c, o, data);
            StudentModel pruned;
            run_prune(c, data, teacher, obtain_student(c, o), out, pruned);
        } else if (sweep_cmd->parsed()) {
            run_sweep(c, data, obtain_teacher(c, o, data), out);
        }
    } catch (const ConfigError& e) {
        spdlog::error("configuration error: {}", e.what());
        return 2;
    } catch (const NumericalError& e) {
        spdlog::error("numerical failure: {}", e.what());
        return 3;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return 0;
}
