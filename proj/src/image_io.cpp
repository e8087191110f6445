#include "pbsn/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "pbsn/errors.hpp"

namespace pbsn {

namespace {

std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::string header(const char* magic, std::size_t w, std::size_t h, unsigned maxval) {
    return std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n" +
           std::to_string(maxval) + "\n";
}

/// Parses "<magic> <w> <h> <maxval>" followed by one whitespace byte; returns
/// the payload offset.
std::size_t parse_header(const std::string& bytes, const char* magic, std::size_t& w,
                         std::size_t& h, unsigned& maxval) {
    std::size_t pos = 0;
    auto token = [&]() {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
        const std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        return bytes.substr(start, pos - start);
    };
    if (token() != magic) throw DimensionError(std::string("image: expected ") + magic + " header");
    try {
        w = std::stoul(token());
        h = std::stoul(token());
        maxval = static_cast<unsigned>(std::stoul(token()));
    } catch (const std::logic_error&) {
        throw DimensionError("image: malformed header");
    }
    return pos + 1;
}

}  // namespace

std::string encode_ppm(const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw DimensionError("encode_ppm: expected [3,H,W], got " + shape_string(image.shape()));
    }
    const std::size_t H = image.dim(1), W = image.dim(2), plane = H * W;
    std::string out = header("P6", W, H, 255);
    const auto v = image.values();
    for (std::size_t i = 0; i < plane; ++i) {
        for (std::size_t c = 0; c < 3; ++c) out.push_back(static_cast<char>(to_byte(v[c * plane + i])));
    }
    return out;
}

Tensor decode_ppm(const std::string& bytes) {
    std::size_t w = 0, h = 0;
    unsigned maxval = 0;
    const std::size_t off = parse_header(bytes, "P6", w, h, maxval);
    if (maxval != 255 || bytes.size() < off + 3 * w * h) throw DimensionError("decode_ppm: truncated or unsupported");
    const std::size_t plane = w * h;
    std::vector<double> v(3 * plane);
    for (std::size_t i = 0; i < plane; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            v[c * plane + i] = static_cast<unsigned char>(bytes[off + 3 * i + c]) / 255.0;
        }
    }
    return Tensor({3, h, w}, std::move(v));
}

std::string encode_pgm16(const Tensor& map) {
    if (map.rank() != 2) throw DimensionError("encode_pgm16: expected [H,W]");
    std::string out = header("P5", map.dim(1), map.dim(0), 65535);
    for (double v : map.values()) {
        const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
        out.push_back(static_cast<char>(q >> 8));
        out.push_back(static_cast<char>(q & 0xff));
    }
    return out;
}

Tensor decode_pgm16(const std::string& bytes) {
    std::size_t w = 0, h = 0;
    unsigned maxval = 0;
    const std::size_t off = parse_header(bytes, "P5", w, h, maxval);
    if (maxval != 65535 || bytes.size() < off + 2 * w * h) throw DimensionError("decode_pgm16: truncated or unsupported");
    std::vector<double> v(w * h);
    for (std::size_t i = 0; i < v.size(); ++i) {
        const unsigned hi = static_cast<unsigned char>(bytes[off + 2 * i]);
        const unsigned lo = static_cast<unsigned char>(bytes[off + 2 * i + 1]);
        v[i] = static_cast<double>((hi << 8) | lo) / 65535.0;
    }
    return Tensor({h, w}, std::move(v));
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("short write to " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::string csv = "filename,label\n";
    for (std::size_t i = 0; i < data.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "%05zu.ppm", i);
        write_file(dir / name, encode_ppm(data.image(i)));
        csv += std::string(name) + "," + std::to_string(data.labels[i]) + "\n";
    }
    write_file(dir / "labels.csv", csv);
}

Dataset load_dataset(const std::filesystem::path& dir, std::size_t classes) {
    std::istringstream csv(read_file(dir / "labels.csv"));
    std::string line;
    std::getline(csv, line);
    if (line != "filename,label") throw ConfigError("labels.csv: missing 'filename,label' header");
    Dataset data;
    std::vector<double> pixels;
    Shape shape;
    int max_label = -1;
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw ConfigError("labels.csv: malformed line '" + line + "'");
        const auto img = decode_ppm(read_file(dir / line.substr(0, comma)));
        if (shape.empty()) shape = img.shape();
        if (img.shape() != shape) throw DimensionError("load_dataset: images differ in size");
        pixels.insert(pixels.end(), img.values().begin(), img.values().end());
        const int label = std::stoi(line.substr(comma + 1));
        if (label < 0) throw ConfigError("labels.csv: negative label");
        data.labels.push_back(label);
        max_label = std::max(max_label, label);
    }
    if (shape.empty()) shape = {3, 0, 0};
    data.images = Tensor({data.labels.size(), shape[0], shape[1], shape[2]}, std::move(pixels));
    data.classes = classes ? classes : static_cast<std::size_t>(max_label + 1);
    return data;
}

std::string crc32_hex(const std::string& bytes) {
    const uLong crc = crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(bytes.data()),
                            static_cast<uInt>(bytes.size()));
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
    return buf;
}

Tensor diverging_rgb(const Tensor& map, double scale, double dim) {
    const std::size_t H = map.dim(0), W = map.dim(1), plane = H * W;
    std::vector<double> out(3 * plane);
    const auto v = map.values();
    for (std::size_t i = 0; i < plane; ++i) {
        const double t = scale > 0.0 ? std::clamp(v[i] / scale, -1.0, 1.0) * dim : 0.0;
        // White at zero, red for positive, blue for negative relevance.
        const double r = t >= 0.0 ? 1.0 : 1.0 + t;
        const double b = t <= 0.0 ? 1.0 : 1.0 - t;
        const double g = 1.0 - std::abs(t);
        out[i] = r;
        out[plane + i] = g;
        out[2 * plane + i] = b;
    }
    return Tensor({3, H, W}, std::move(out));
}

HeatmapFiles export_heatmaps(const RelevancePair& pair, const std::filesystem::path& dir,
                             const std::string& stem) {
    std::filesystem::create_directories(dir);
    double peak = 0.0;
    for (const Tensor* m : {&pair.input_map, &pair.proto_map}) {
        for (double v : m->values()) peak = std::max(peak, std::abs(v));
    }
    auto magnitude = [&](const Tensor& m) {
        std::vector<double> v(m.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = peak > 0.0 ? std::abs(m.values()[i]) / peak : 0.0;
        return Tensor(m.shape(), std::move(v));
    };
    auto range = [](const Tensor& m) {
        const auto [lo, hi] = std::minmax_element(m.values().begin(), m.values().end());
        return std::pair{*lo, *hi};
    };

    HeatmapFiles files;
    const std::string pgm_in = encode_pgm16(magnitude(pair.input_map));
    const std::string pgm_proto = encode_pgm16(magnitude(pair.proto_map));
    files.checksum = crc32_hex(pgm_in + pgm_proto);
    const double dim = std::clamp(pair.u, 0.0, 1.0);
    const std::vector<std::pair<std::string, std::string>> outputs = {
        {stem + "_input.pgm", pgm_in},
        {stem + "_proto.pgm", pgm_proto},
        {stem + "_input.ppm", encode_ppm(diverging_rgb(pair.input_map, peak))},
        {stem + "_proto.ppm", encode_ppm(diverging_rgb(pair.proto_map, peak))},
        {stem + "_input_scaled.ppm", encode_ppm(diverging_rgb(pair.input_map, peak, dim))},
        {stem + "_proto_scaled.ppm", encode_ppm(diverging_rgb(pair.proto_map, peak, dim))},
    };
    for (const auto& [name, bytes] : outputs) {
        write_file(dir / name, bytes);
        files.paths.push_back(dir / name);
    }

    const auto [in_lo, in_hi] = range(pair.input_map);
    const auto [p_lo, p_hi] = range(pair.proto_map);
    double r_sum = 0.0;
    for (double v : pair.r_sim.values()) r_sum += v;
    nlohmann::json sidecar = {
        {"k", pair.k},
        {"u_k", pair.u},
        {"class", pair.predicted},
        {"prototype_class", pair.prototype_label},
        {"min", std::min(in_lo, p_lo)},
        {"max", std::max(in_hi, p_hi)},
        {"checksum", files.checksum},
        {"r_sim_total", r_sum},
        {"input", {{"min", in_lo}, {"max", in_hi}, {"checksum", crc32_hex(pgm_in)}}},
        {"prototype", {{"min", p_lo}, {"max", p_hi}, {"checksum", crc32_hex(pgm_proto)}}}};
    write_file(dir / (stem + ".json"), sidecar.dump(2) + "\n");
    files.paths.push_back(dir / (stem + ".json"));
    return files;
}

}  // namespace pbsn
