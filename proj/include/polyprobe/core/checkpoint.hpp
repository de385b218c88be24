#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "polyprobe/core/tensor.hpp"

namespace polyprobe::core {

// Binary container shared by every persisted artifact:
//   8-byte magic "PPROBECK", u32 version,
//   u64 header length, header as canonical (sorted-key) JSON,
//   u64 tensor count, then per tensor: u32 name length, name, u32 rank,
//   rank x u64 dims, product(dims) x f64.
// All integers and floats are little-endian.
struct Checkpoint {
  nlohmann::json header = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const Checkpoint& ckpt);
// Throws CorruptFile on bad magic, unknown version, truncation or trailing bytes.
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Whole-file helpers; throw Io.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace polyprobe::core
