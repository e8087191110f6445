#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "pbsn/encoder.hpp"
#include "pbsn/lrp.hpp"
#include "pbsn/perturbation.hpp"
#include "pbsn/student.hpp"
#include "pbsn/synthetic.hpp"

namespace pbsn {

struct DataConfig {
    SyntheticSpec train;           // seed is the dataset seed
    std::size_t test_per_class = 100;
};

struct OutlierSetupConfig {
    std::vector<std::size_t> kprime{1, 20};
    bool per_class = false;
    std::size_t stroke_thickness = 5;
    std::size_t stroke_count = 3;
    ColorShift color;
};

struct PruneConfig {
    double fraction = 0.3;
    std::size_t finetune_epochs = 3;
};

struct RunConfig {
    std::uint64_t seed = 0;
    DataConfig data;
    EncoderConfig encoder;
    TeacherTrainConfig teacher;
    StudentTrainConfig student;
    LrpParams lrp;
    OutlierSetupConfig outlier;
    PerturbConfig perturb;
    std::size_t perturb_samples = 200;
    PruneConfig prune;
    std::vector<std::size_t> sweep_prototypes_per_class{1, 2, 5, 10};
    std::size_t explain_samples = 4;
    std::size_t explain_topk = 3;
    std::filesystem::path output = "out";

    std::size_t prototypes() const { return student.prototypes_per_class * data.train.classes; }
    /// Throws ConfigError naming the offending field.
    void validate() const;
    /// Copies the run seed into every component seed.
    void propagate_seed();
};

/// Reads a JSON config; unknown keys and wrong types are ConfigErrors naming
/// the field. Missing keys keep their defaults.
RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& config);

nlohmann::json encoder_config_to_json(const EncoderConfig& config);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

}  // namespace pbsn
