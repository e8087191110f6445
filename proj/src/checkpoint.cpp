#include "pbsn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <map>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "pbsn/config.hpp"
#include "pbsn/errors.hpp"
#include "pbsn/image_io.hpp"

namespace pbsn {

using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr std::size_t kMagicSize = sizeof(kCheckpointMagic) - 1;

template <typename T>
void put(std::string& out, T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& bytes, std::size_t& pos) {
    if (bytes.size() < pos + sizeof(T)) throw CorruptCheckpoint("checkpoint: truncated");
    T value;
    std::memcpy(&value, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return value;
}

std::uint32_t crc_of(const char* data, std::size_t size) {
    return static_cast<std::uint32_t>(
        crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(data), static_cast<uInt>(size)));
}

using Named = std::vector<std::pair<std::string, Tensor>>;

std::string pack(json manifest, const Named& tensors) {
    json entries = json::array();
    std::string payload;
    for (const auto& [name, t] : tensors) {
        entries.push_back({{"name", name}, {"shape", t.shape()}});
        for (double v : t.values()) put(payload, v);
    }
    manifest["tensors"] = entries;
    const std::string text = manifest.dump();
    std::string out(kCheckpointMagic, kMagicSize);
    put(out, kCheckpointVersion);
    put(out, static_cast<std::uint64_t>(text.size()));
    out += text;
    out += payload;
    put(out, crc_of(payload.data(), payload.size()));
    return out;
}

struct Unpacked {
    json manifest;
    std::map<std::string, Tensor> tensors;

    Tensor take(const std::string& name, bool parameter = true) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw CorruptCheckpoint("checkpoint: missing tensor '" + name + "'");
        Tensor t = it->second;
        t.set_requires_grad(parameter);
        return t;
    }
};

Unpacked unpack(const std::string& bytes, const char* expected_kind) {
    if (bytes.size() < kMagicSize || bytes.compare(0, kMagicSize, kCheckpointMagic) != 0) {
        throw CorruptCheckpoint("checkpoint: bad magic");
    }
    std::size_t pos = kMagicSize;
    const auto version = take<std::uint32_t>(bytes, pos);
    if (version != kCheckpointVersion) {
        throw CorruptCheckpoint("checkpoint: unsupported format version " + std::to_string(version));
    }
    const auto length = take<std::uint64_t>(bytes, pos);
    if (bytes.size() - pos < length) throw CorruptCheckpoint("checkpoint: truncated manifest");
    Unpacked u;
    try {
        u.manifest = json::parse(bytes.substr(pos, length));
    } catch (const json::exception&) {
        throw CorruptCheckpoint("checkpoint: unreadable manifest");
    }
    pos += length;
    if (bytes.size() < pos + sizeof(std::uint32_t)) throw CorruptCheckpoint("checkpoint: truncated");
    const std::size_t payload_begin = pos;
    const std::size_t payload_size = bytes.size() - pos - sizeof(std::uint32_t);
    std::size_t crc_pos = payload_begin + payload_size;
    if (take<std::uint32_t>(bytes, crc_pos) != crc_of(bytes.data() + payload_begin, payload_size)) {
        throw CorruptCheckpoint("checkpoint: CRC mismatch");
    }

    try {
        if (u.manifest.at("kind") != expected_kind) {
            throw CorruptCheckpoint(std::string("checkpoint: expected a ") + expected_kind + " checkpoint");
        }
        std::size_t expected = 0;
        for (const auto& entry : u.manifest.at("tensors")) {
            const Shape shape = entry.at("shape").get<Shape>();
            std::size_t n = 1;
            for (auto d : shape) n *= d;
            if (payload_size < (expected + n) * sizeof(double)) {
                throw CorruptCheckpoint("checkpoint: payload shorter than manifest");
            }
            std::vector<double> values(n);
            std::memcpy(values.data(), bytes.data() + payload_begin + expected * sizeof(double),
                        n * sizeof(double));
            expected += n;
            u.tensors.emplace(entry.at("name").get<std::string>(), Tensor(shape, std::move(values)));
        }
        if (expected * sizeof(double) != payload_size) {
            throw CorruptCheckpoint("checkpoint: payload longer than manifest");
        }
    } catch (const json::exception& e) {
        throw CorruptCheckpoint(std::string("checkpoint: malformed manifest: ") + e.what());
    }
    return u;
}

Named encoder_tensors(const Encoder& encoder) {
    Named out;
    for (std::size_t i = 0; i < encoder.kernels().size(); ++i) {
        out.emplace_back("encoder.kernel." + std::to_string(i), encoder.kernels()[i]);
        if (encoder.config().bias) out.emplace_back("encoder.bias." + std::to_string(i), encoder.biases()[i]);
    }
    return out;
}

Encoder restore_encoder(Unpacked& u) {
    EncoderConfig config;
    try {
        config = encoder_config_from_json(u.manifest.at("encoder"));
        config.validate();
    } catch (const std::exception& e) {
        throw CorruptCheckpoint(std::string("checkpoint: bad encoder config: ") + e.what());
    }
    std::vector<Tensor> kernels, biases;
    for (std::size_t i = 0; i < config.blocks.size(); ++i) {
        kernels.push_back(u.take("encoder.kernel." + std::to_string(i)));
        if (config.bias) biases.push_back(u.take("encoder.bias." + std::to_string(i)));
    }
    try {
        return make_encoder(config, std::move(kernels), std::move(biases));
    } catch (const DimensionError& e) {
        throw CorruptCheckpoint(std::string("checkpoint: ") + e.what());
    }
}

template <typename Fn>
auto guarded(Fn&& fn) {
    try {
        return fn();
    } catch (const CorruptCheckpoint&) {
        throw;
    } catch (const std::exception& e) {
        throw CorruptCheckpoint(std::string("checkpoint: inconsistent contents: ") + e.what());
    }
}

}  // namespace

std::string serialize_teacher(const TeacherModel& teacher) {
    json manifest = {{"kind", "teacher"},
                     {"classes", teacher.classes},
                     {"encoder", encoder_config_to_json(teacher.encoder.config())},
                     {"train_accuracy", teacher.train_accuracy},
                     {"validation_accuracy", teacher.validation_accuracy}};
    Named tensors = encoder_tensors(teacher.encoder);
    tensors.emplace_back("classifier.weight", teacher.weight);
    tensors.emplace_back("classifier.bias", teacher.bias);
    return pack(std::move(manifest), tensors);
}

TeacherModel deserialize_teacher(const std::string& bytes) {
    auto u = unpack(bytes, "teacher");
    return guarded([&] {
        TeacherModel t;
        t.encoder = restore_encoder(u);
        t.weight = u.take("classifier.weight");
        t.bias = u.take("classifier.bias");
        t.classes = u.manifest.at("classes").get<std::size_t>();
        t.train_accuracy = u.manifest.value("train_accuracy", 0.0);
        t.validation_accuracy = u.manifest.value("validation_accuracy", 0.0);
        if (t.weight.shape() != Shape{t.classes, t.encoder.config().feature_channels} ||
            t.bias.shape() != Shape{t.classes}) {
            throw CorruptCheckpoint("checkpoint: classifier shapes do not match the manifest");
        }
        return t;
    });
}

std::string serialize_student(const StudentModel& student) {
    const auto& store = student.store;
    json manifest = {{"kind", "student"},
                     {"head", to_string(student.head.kind)},
                     {"classes", student.classes()},
                     {"prototypes", student.prototypes()},
                     {"prototype_ids", store.ids},
                     {"prototype_labels", store.labels},
                     {"pool", store.pool},
                     {"encoder", encoder_config_to_json(student.encoder.config())}};
    Named tensors = encoder_tensors(student.encoder);
    tensors.emplace_back("head.weight", student.head.weight);
    tensors.emplace_back("head.bias", student.head.bias);
    if (student.head.channel_weight.defined()) tensors.emplace_back("head.channel_weight", student.head.channel_weight);
    tensors.emplace_back("prototypes.importance", store.importance);
    tensors.emplace_back("prototypes.images", store.images);
    return pack(std::move(manifest), tensors);
}

StudentModel deserialize_student(const std::string& bytes) {
    auto u = unpack(bytes, "student");
    return guarded([&] {
        StudentModel s;
        s.encoder = restore_encoder(u);
        s.head.kind = parse_head_kind(u.manifest.at("head").get<std::string>());
        s.head.weight = u.take("head.weight");
        s.head.bias = u.take("head.bias");
        if (is_attention_head(s.head.kind)) s.head.channel_weight = u.take("head.channel_weight");
        auto& store = s.store;
        store.ids = u.manifest.at("prototype_ids").get<std::vector<std::size_t>>();
        store.labels = u.manifest.at("prototype_labels").get<std::vector<int>>();
        store.pool = u.manifest.at("pool").get<std::vector<std::size_t>>();
        store.classes = u.manifest.at("classes").get<std::size_t>();
        store.importance = u.take("prototypes.importance");
        store.images = u.take("prototypes.images", false);
        const std::size_t K = u.manifest.at("prototypes").get<std::size_t>();
        const auto& cfg = s.encoder.config();
        const bool consistent =
            store.ids.size() == K && store.labels.size() == K && store.importance.shape() == Shape{K} &&
            store.images.shape() == Shape{K, cfg.in_channels, cfg.input_height, cfg.input_width} &&
            s.head.weight.shape() == Shape{store.classes, K} && s.head.bias.shape() == Shape{store.classes} &&
            (!s.head.channel_weight.defined() || s.head.channel_weight.shape() == Shape{cfg.feature_channels});
        if (!consistent) throw CorruptCheckpoint("checkpoint: tensor shapes do not match the manifest");
        return s;
    });
}

void save_checkpoint(const TeacherModel& teacher, const std::filesystem::path& path) {
    write_file(path, serialize_teacher(teacher));
}

void save_checkpoint(const StudentModel& student, const std::filesystem::path& path) {
    write_file(path, serialize_student(student));
}

TeacherModel load_teacher(const std::filesystem::path& path) { return deserialize_teacher(read_file(path)); }

StudentModel load_student(const std::filesystem::path& path) { return deserialize_student(read_file(path)); }

}  // namespace pbsn
