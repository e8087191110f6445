#include "pbsn/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "pbsn/errors.hpp"

namespace pbsn {

using nlohmann::json;

namespace {

/// Reads fields of one JSON object, remembering which keys were consumed so
/// leftovers can be reported.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError("field '" + display() + "' must be an object");
    }

    template <typename T>
    void read(const char* key, T& target) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        const json& v = j_.at(key);
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) throw json::type_error::create(302, "expected boolean", nullptr);
            } else if constexpr (std::is_unsigned_v<T>) {
                if (!v.is_number_unsigned()) throw json::type_error::create(302, "expected nonnegative integer", nullptr);
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!v.is_number()) throw json::type_error::create(302, "expected number", nullptr);
            }
            target = v.get<T>();
        } catch (const json::exception&) {
            throw ConfigError("field '" + field(key) + "' has the wrong type");
        }
    }

    Section child(const char* key) {
        seen_.insert(key);
        static const json empty = json::object();
        return Section(j_.contains(key) ? j_.at(key) : empty, field(key));
    }

    bool has(const char* key) {
        seen_.insert(key);
        return j_.contains(key);
    }
    const json& raw(const char* key) const { return j_.at(key); }
    std::string field(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const {
        for (const auto& [k, _] : j_.items()) {
            if (!seen_.count(k)) throw ConfigError("unknown field '" + field(k.c_str()) + "'");
        }
    }

private:
    std::string display() const { return path_.empty() ? "<root>" : path_; }
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void require(bool ok, const std::string& field, const std::string& message) {
    if (!ok) throw ConfigError("field '" + field + "': " + message);
}

}  // namespace

json encoder_config_to_json(const EncoderConfig& c) {
    json blocks = json::array();
    for (const auto& b : c.blocks) blocks.push_back({b.out_channels, b.kernel, b.stride});
    return {{"in_channels", c.in_channels},
            {"blocks", blocks},
            {"feature_channels", c.feature_channels},
            {"input_height", c.input_height},
            {"input_width", c.input_width},
            {"bias", c.bias}};
}

EncoderConfig encoder_config_from_json(const json& j) {
    EncoderConfig c;
    Section s(j, "encoder");
    s.read("in_channels", c.in_channels);
    if (s.has("blocks")) {
        const auto& blocks = s.raw("blocks");
        require(blocks.is_array() && !blocks.empty(), "encoder.blocks", "must be a non-empty array");
        c.blocks.clear();
        for (const auto& b : blocks) {
            require(b.is_array() && b.size() == 3 && b[0].is_number_unsigned() &&
                        b[1].is_number_unsigned() && b[2].is_number_unsigned(),
                    "encoder.blocks", "entries must be [out_channels, kernel, stride]");
            c.blocks.push_back({b[0].get<std::size_t>(), b[1].get<std::size_t>(), b[2].get<std::size_t>()});
        }
        c.feature_channels = c.blocks.back().out_channels;
    }
    s.read("feature_channels", c.feature_channels);
    s.read("input_height", c.input_height);
    s.read("input_width", c.input_width);
    s.read("bias", c.bias);
    s.finish();
    return c;
}

RunConfig parse_config(const json& j) {
    RunConfig c;
    Section root(j, "");
    root.read("seed", c.seed);
    {
        auto s = root.child("dataset");
        s.read("classes", c.data.train.classes);
        s.read("n_per_class", c.data.train.n_per_class);
        s.read("test_per_class", c.data.test_per_class);
        s.read("size", c.data.train.size);
        s.read("hue_spread", c.data.train.hue_spread);
        s.read("clutter", c.data.train.clutter);
        s.read("seed", c.data.train.seed);
        s.finish();
    }
    if (root.has("encoder")) c.encoder = encoder_config_from_json(root.raw("encoder"));
    {
        auto s = root.child("teacher");
        s.read("epochs", c.teacher.epochs);
        s.read("lr", c.teacher.lr);
        s.read("batch_size", c.teacher.batch_size);
        s.read("momentum", c.teacher.momentum);
        s.read("weight_decay", c.teacher.weight_decay);
        s.read("lr_step_epochs", c.teacher.lr_step_epochs);
        s.read("gamma", c.teacher.gamma);
        s.finish();
    }
    {
        auto s = root.child("student");
        if (s.has("head")) {
            const auto& h = s.raw("head");
            require(h.is_string(), "student.head", "must be a string");
            try {
                c.student.head = parse_head_kind(h.get<std::string>());
            } catch (const ConfigError& e) {
                throw ConfigError(std::string("field 'student.head': ") + e.what());
            }
        }
        s.read("prototypes_per_class", c.student.prototypes_per_class);
        s.read("epochs", c.student.epochs);
        s.read("batch_size", c.student.batch_size);
        s.read("iterations_per_epoch", c.student.iterations_per_epoch);
        s.read("head_lr", c.student.head_lr);
        s.read("encoder_lr", c.student.encoder_lr);
        s.read("momentum", c.student.momentum);
        s.read("weight_decay", c.student.weight_decay);
        s.read("lr_step_epochs", c.student.lr_step_epochs);
        s.read("gamma", c.student.gamma);
        s.read("p_fraction", c.student.p_fraction);
        s.finish();
    }
    {
        auto s = root.child("loss");
        s.read("lambda1", c.student.weights.distill);
        s.read("lambda2", c.student.weights.mask);
        s.read("lambda3", c.student.weights.prototype);
        s.finish();
    }
    {
        auto s = root.child("lrp");
        s.read("alpha", c.lrp.alpha);
        s.read("beta", c.lrp.beta);
        s.read("epsilon", c.lrp.epsilon);
        s.finish();
    }
    {
        auto s = root.child("outlier");
        s.read("kprime", c.outlier.kprime);
        s.read("per_class", c.outlier.per_class);
        s.read("stroke_thickness", c.outlier.stroke_thickness);
        s.read("stroke_count", c.outlier.stroke_count);
        s.read("min_saturation", c.outlier.color.min_saturation);
        s.read("min_value", c.outlier.color.min_value);
        s.finish();
    }
    {
        auto s = root.child("perturb");
        s.read("region", c.perturb.region);
        s.read("steps", c.perturb.steps);
        s.read("samples", c.perturb_samples);
        if (s.has("policy")) {
            const auto& p = s.raw("policy");
            require(p.is_string(), "perturb.policy", "must be a string");
            try {
                c.perturb.policy = parse_policy(p.get<std::string>());
            } catch (const ConfigError& e) {
                throw ConfigError(std::string("field 'perturb.policy': ") + e.what());
            }
        }
        s.finish();
    }
    {
        auto s = root.child("prune");
        s.read("fraction", c.prune.fraction);
        s.read("finetune_epochs", c.prune.finetune_epochs);
        s.finish();
    }
    {
        auto s = root.child("explain");
        s.read("samples", c.explain_samples);
        s.read("topk", c.explain_topk);
        s.finish();
    }
    root.read("sweep_prototypes_per_class", c.sweep_prototypes_per_class);
    if (root.has("prototypes")) {
        std::size_t K = 0;
        root.read("prototypes", K);
        require(K == c.prototypes(), "prototypes",
                "must equal prototypes_per_class x classes = " + std::to_string(c.prototypes()));
    }
    if (root.has("output")) {
        const auto& o = root.raw("output");
        require(o.is_string(), "output", "must be a string");
        c.output = o.get<std::string>();
    }
    root.finish();
    c.validate();
    return c;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path.string());
    json j;
    try {
        j = json::parse(is);
    } catch (const json::parse_error& e) {
        throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
    }
    return parse_config(j);
}

void RunConfig::validate() const {
    const auto& d = data.train;
    require(d.classes >= 2 && d.classes <= kMaxSyntheticClasses, "dataset.classes",
            "must lie in [2, " + std::to_string(kMaxSyntheticClasses) + "]");
    require(d.size >= 8, "dataset.size", "must be at least 8");
    require(d.hue_spread >= 0.0 && d.hue_spread <= 0.5, "dataset.hue_spread", "must lie in [0, 0.5]");
    require(d.clutter >= 0.0 && d.clutter <= 0.5, "dataset.clutter", "must lie in [0, 0.5]");
    require(encoder.input_height == d.size && encoder.input_width == d.size, "encoder.input_height",
            "must match dataset.size");
    try {
        encoder.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("field 'encoder': ") + e.what());
    }
    require(teacher.lr > 0.0, "teacher.lr", "must be positive");
    require(teacher.batch_size > 0, "teacher.batch_size", "must be positive");
    require(student.prototypes_per_class > 0, "student.prototypes_per_class", "must be positive");
    require(student.prototypes_per_class <= d.n_per_class, "student.prototypes_per_class",
            "exceeds dataset.n_per_class");
    require(student.head_lr > 0.0, "student.head_lr", "must be positive");
    require(student.encoder_lr >= 0.0, "student.encoder_lr", "must be nonnegative");
    require(student.momentum >= 0.0 && student.momentum < 1.0, "student.momentum", "must lie in [0,1)");
    require(student.weight_decay >= 0.0, "student.weight_decay", "must be nonnegative");
    require(student.gamma > 0.0, "student.gamma", "must be positive");
    require(student.batch_size > 0, "student.batch_size", "must be positive");
    require(student.p_fraction >= 0.0 && student.p_fraction < 1.0, "student.p_fraction",
            "must lie in [0,1)");
    if (student.p_fraction > 0.0) {
        const auto p = std::llround(student.p_fraction * static_cast<double>(prototypes()));
        require(p >= 1 && static_cast<std::size_t>(p) < prototypes(), "student.p_fraction",
                "gives p = " + std::to_string(p) + " masked prototypes, need 1 <= p < K");
    }
    for (double w : {student.weights.distill, student.weights.mask, student.weights.prototype}) {
        require(std::isfinite(w) && w >= 0.0, "loss", "weights must be finite and nonnegative");
    }
    require(lrp.alpha > 0.0, "lrp.alpha", "must be positive");
    require(lrp.beta >= 0.0, "lrp.beta", "must be nonnegative");
    require(std::abs(lrp.alpha - lrp.beta - 1.0) <= 1e-12, "lrp.alpha", "alpha - beta must equal 1");
    require(lrp.epsilon >= 0.0, "lrp.epsilon", "must be nonnegative");
    require(!outlier.kprime.empty(), "outlier.kprime", "must list at least one value");
    for (auto k : outlier.kprime) {
        require(k >= 1 && k <= prototypes(), "outlier.kprime",
                "values must lie in [1, K = " + std::to_string(prototypes()) + "]");
    }
    require(outlier.stroke_thickness >= 1, "outlier.stroke_thickness", "must be >= 1");
    require(outlier.color.min_saturation >= 0.0 && outlier.color.min_saturation <= 1.0,
            "outlier.min_saturation", "must lie in [0,1]");
    require(outlier.color.min_value >= 0.0 && outlier.color.min_value <= 1.0, "outlier.min_value",
            "must lie in [0,1]");
    require(perturb.region >= 1 && d.size % perturb.region == 0, "perturb.region",
            "must divide dataset.size");
    require(perturb.steps <= (d.size / perturb.region) * (d.size / perturb.region), "perturb.steps",
            "exceeds the number of tiles");
    require(prune.fraction > 0.0 && prune.fraction < 1.0, "prune.fraction", "must lie in (0,1)");
    for (auto n : sweep_prototypes_per_class) {
        require(n >= 1 && n <= d.n_per_class, "sweep_prototypes_per_class",
                "values must lie in [1, dataset.n_per_class]");
    }
    require(explain_topk >= 1 && explain_topk <= prototypes(), "explain.topk", "must lie in [1, K]");
}

void RunConfig::propagate_seed() {
    teacher.seed = seed;
    student.seed = seed;
    perturb.seed = seed;
}

json to_json(const RunConfig& c) {
    const auto& d = c.data.train;
    return {{"seed", c.seed},
            {"dataset",
             {{"classes", d.classes},
              {"n_per_class", d.n_per_class},
              {"test_per_class", c.data.test_per_class},
              {"size", d.size},
              {"hue_spread", d.hue_spread},
              {"clutter", d.clutter},
              {"seed", d.seed}}},
            {"encoder", encoder_config_to_json(c.encoder)},
            {"teacher",
             {{"epochs", c.teacher.epochs},
              {"lr", c.teacher.lr},
              {"batch_size", c.teacher.batch_size},
              {"momentum", c.teacher.momentum},
              {"weight_decay", c.teacher.weight_decay},
              {"lr_step_epochs", c.teacher.lr_step_epochs},
              {"gamma", c.teacher.gamma}}},
            {"student",
             {{"head", to_string(c.student.head)},
              {"prototypes_per_class", c.student.prototypes_per_class},
              {"epochs", c.student.epochs},
              {"batch_size", c.student.batch_size},
              {"iterations_per_epoch", c.student.iterations_per_epoch},
              {"head_lr", c.student.head_lr},
              {"encoder_lr", c.student.encoder_lr},
              {"momentum", c.student.momentum},
              {"weight_decay", c.student.weight_decay},
              {"lr_step_epochs", c.student.lr_step_epochs},
              {"gamma", c.student.gamma},
              {"p_fraction", c.student.p_fraction}}},
            {"loss",
             {{"lambda1", c.student.weights.distill},
              {"lambda2", c.student.weights.mask},
              {"lambda3", c.student.weights.prototype}}},
            {"lrp", {{"alpha", c.lrp.alpha}, {"beta", c.lrp.beta}, {"epsilon", c.lrp.epsilon}}},
            {"outlier",
             {{"kprime", c.outlier.kprime},
              {"per_class", c.outlier.per_class},
              {"stroke_thickness", c.outlier.stroke_thickness},
              {"stroke_count", c.outlier.stroke_count},
              {"min_saturation", c.outlier.color.min_saturation},
              {"min_value", c.outlier.color.min_value}}},
            {"perturb",
             {{"region", c.perturb.region},
              {"steps", c.perturb.steps},
              {"samples", c.perturb_samples},
              {"policy", to_string(c.perturb.policy)}}},
            {"prune", {{"fraction", c.prune.fraction}, {"finetune_epochs", c.prune.finetune_epochs}}},
            {"explain", {{"samples", c.explain_samples}, {"topk", c.explain_topk}}},
            {"sweep_prototypes_per_class", c.sweep_prototypes_per_class},
            {"output", c.output.string()}};
}

}  // namespace pbsn
