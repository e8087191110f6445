#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pbsn/config.hpp"
#include "pbsn/dataset.hpp"
#include "pbsn/encoder.hpp"
#include "pbsn/student.hpp"

namespace pbsn {

struct Datasets {
    Dataset train;
    Dataset test;
};

/// Train split from the configured spec; the test split uses the same spec
/// with `test_per_class` samples and seed + 1.
Datasets make_datasets(const DataConfig& config);

struct OutlierSetup {
    std::string name;  // "A" disjoint classes, "B" strokes, "C" altered color
    Dataset outliers;
};

/// The three outlier sets built from the test split.
std::vector<OutlierSetup> outlier_setups(const RunConfig& config, const Dataset& test);

/// `count` evenly spaced samples of `data`.
Dataset spaced_subset(const Dataset& data, std::size_t count);

/// Parallelism cap from PBSN_THREADS (positive integer), 1 when unset.
/// Throws ConfigError on malformed values.
std::size_t thread_limit();

// Command bodies shared by the CLI and the tests. Each writes its artifacts
// below `out` and returns the metrics it also writes as JSON.

nlohmann::json run_train_teacher(const RunConfig& config, const Datasets& data,
                                 const std::filesystem::path& out, TeacherModel& teacher);
nlohmann::json run_train_student(const RunConfig& config, const Datasets& data, const TeacherModel& teacher,
                                 const std::filesystem::path& out, StudentModel& student);
nlohmann::json run_explain(const RunConfig& config, const Datasets& data, const StudentModel& student,
                           const std::filesystem::path& out);
nlohmann::json run_outlier_eval(const RunConfig& config, const Datasets& data, const StudentModel& student,
                                const std::filesystem::path& out);
nlohmann::json run_perturb_eval(const RunConfig& config, const Datasets& data, const StudentModel& student,
                                const std::filesystem::path& out);
nlohmann::json run_prune(const RunConfig& config, const Datasets& data, const TeacherModel& teacher,
                         const StudentModel& student, const std::filesystem::path& out,
                         StudentModel& pruned);
nlohmann::json run_sweep(const RunConfig& config, const Datasets& data, const TeacherModel& teacher,
                         const std::filesystem::path& out);

/// Pretty-printed with a trailing newline; the byte-stable form of metrics.
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace pbsn
