#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace mscl {

// FNV-1a 64-bit, for artifact identity in run manifests (not cryptographic).
std::uint64_t fnv1a64(std::string_view bytes);
std::string hash_file_hex(const std::filesystem::path& path);

}  // namespace mscl
