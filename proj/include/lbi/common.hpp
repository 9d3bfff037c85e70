#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace lbi {

using json = nlohmann::json;

// Error taxonomy. The CLI maps ConfigError to exit code 2 and everything
// else to 3.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContractViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// splitmix64; used to derive independent per-episode seeds from (seed, index).
uint64_t mix_seed(uint64_t seed, uint64_t index);

// FNV-1a over a string; config hashes are the hex form of this.
uint64_t fnv1a64(const std::string& s);
std::string hex64(uint64_t v);

// zlib crc32, reported as "crc32:xxxxxxxx".
uint32_t crc32_bytes(const void* data, size_t n);
std::string crc32_tag(const void* data, size_t n);

json read_json_file(const std::filesystem::path& p);
void write_json_file(const std::filesystem::path& p, const json& j);

// Storage root: $LBI_DATA_DIR if set, else ./data.
std::filesystem::path data_root();

}  // namespace lbi
