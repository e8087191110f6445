#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pbsn/dataset.hpp"
#include "pbsn/lrp.hpp"
#include "pbsn/tensor.hpp"

namespace pbsn {

/// Binary PPM (P6, maxval 255) of a [3,H,W] image in [0,1].
std::string encode_ppm(const Tensor& image);
Tensor decode_ppm(const std::string& bytes);
/// Binary 16-bit PGM (P5, maxval 65535, big-endian samples) of a [H,W] map
/// with values in [0,1].
std::string encode_pgm16(const Tensor& map);
Tensor decode_pgm16(const std::string& bytes);

void write_file(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

/// Directory of NNNNN.ppm images plus labels.csv (filename,label).
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
/// `classes` 0 infers max label + 1.
Dataset load_dataset(const std::filesystem::path& dir, std::size_t classes = 0);

/// CRC32 (zlib polynomial) as 8 lowercase hex digits.
std::string crc32_hex(const std::string& bytes);

struct HeatmapFiles {
    std::string checksum;  // CRC32 over both PGM files
    std::vector<std::filesystem::path> paths;
};

/// Writes `<stem>_input.pgm`, `<stem>_proto.pgm` (|R| / max|R| of the pair),
/// diverging PPM renderings `<stem>_input.ppm`, `<stem>_proto.ppm`, the
/// u_k-dimmed variants `<stem>_input_scaled.ppm`, `<stem>_proto_scaled.ppm`,
/// and the sidecar `<stem>.json`.
HeatmapFiles export_heatmaps(const RelevancePair& pair, const std::filesystem::path& dir,
                             const std::string& stem);

/// Blue-white-red rendering of a signed map, symmetric around 0 with
/// full scale at `scale`; intensities are multiplied by `dim`.
Tensor diverging_rgb(const Tensor& map, double scale, double dim = 1.0);

}  // namespace pbsn
