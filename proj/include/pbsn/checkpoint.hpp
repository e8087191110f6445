#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "pbsn/encoder.hpp"
#include "pbsn/student.hpp"

namespace pbsn {

inline constexpr char kCheckpointMagic[] = "PBSN1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout: magic (5 bytes), u32 version, u64 manifest length, JSON manifest,
// payload of little-endian f64 arrays in manifest order, u32 CRC32 of the
// payload. All integers little-endian.

std::string serialize_teacher(const TeacherModel& teacher);
TeacherModel deserialize_teacher(const std::string& bytes);
std::string serialize_student(const StudentModel& student);
StudentModel deserialize_student(const std::string& bytes);

void save_checkpoint(const TeacherModel& teacher, const std::filesystem::path& path);
void save_checkpoint(const StudentModel& student, const std::filesystem::path& path);
/// Throw CorruptCheckpoint on bad magic, unknown version, CRC mismatch,
/// truncation, or a manifest that does not describe the payload.
TeacherModel load_teacher(const std::filesystem::path& path);
StudentModel load_student(const std::filesystem::path& path);

}  // namespace pbsn
