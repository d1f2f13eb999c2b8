#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <variant>

#include "gdkvm/tensor.hpp"

namespace gdkvm {

using ByteTensor = BasicTensor<std::uint8_t>;

// On-disk "GDKV-T" record:
//   "GDKV" | u8 version (1) | u8 dtype (0 = f32, 1 = u8) | u8 rank | u8 reserved (0)
//   | rank x u32 little-endian dims | row-major payload (f32 little-endian or u8)
// Records may be concatenated back to back in one stream.
enum class DType : std::uint8_t { F32 = 0, U8 = 1 };

inline constexpr std::uint8_t kTensorFormatVersion = 1;

using StoredTensor = std::variant<Tensor, ByteTensor>;

void write_tensor(std::ostream& os, const Tensor& t);
void write_tensor(std::ostream& os, const ByteTensor& t);

// Throws FormatError on bad magic, unknown version/dtype, or truncation.
StoredTensor read_tensor(std::istream& is);
Tensor read_f32_tensor(std::istream& is);
ByteTensor read_u8_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
void save_tensor(const std::filesystem::path& path, const ByteTensor& t);
StoredTensor load_tensor(const std::filesystem::path& path);

}  // namespace gdkvm
