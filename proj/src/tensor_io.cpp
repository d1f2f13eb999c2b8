#include "gdkvm/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace gdkvm {

namespace {

constexpr std::array<char, 4> kMagic = {'G', 'D', 'K', 'V'};

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("GDKV-T: truncated dims");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_header(std::ostream& os, DType dtype, const Shape& shape) {
  if (shape.size() > 255) throw FormatError("GDKV-T: rank exceeds 255");
  os.write(kMagic.data(), kMagic.size());
  const char head[4] = {static_cast<char>(kTensorFormatVersion), static_cast<char>(dtype),
                        static_cast<char>(shape.size()), 0};
  os.write(head, 4);
  for (std::size_t d : shape) {
    if (d > 0xFFFFFFFFu) throw FormatError("GDKV-T: dimension exceeds u32");
    put_u32(os, static_cast<std::uint32_t>(d));
  }
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  write_header(os, DType::F32, t.shape());
  for (float v : t.data()) put_u32(os, std::bit_cast<std::uint32_t>(v));
  if (!os) throw FormatError("GDKV-T: write failed");
}

void write_tensor(std::ostream& os, const ByteTensor& t) {
  write_header(os, DType::U8, t.shape());
  os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size()));
  if (!os) throw FormatError("GDKV-T: write failed");
}

StoredTensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4)) throw FormatError("GDKV-T: truncated header");
  if (magic != kMagic) throw FormatError("GDKV-T: bad magic");
  unsigned char head[4];
  if (!is.read(reinterpret_cast<char*>(head), 4)) throw FormatError("GDKV-T: truncated header");
  if (head[0] != kTensorFormatVersion) {
    throw FormatError("GDKV-T: unsupported version " + std::to_string(head[0]));
  }
  const std::size_t rank = head[2];
  Shape shape(rank);
  for (auto& d : shape) {
    d = get_u32(is);
    if (d == 0) throw FormatError("GDKV-T: zero dimension");
  }
  const std::size_t n = shape_size(shape);
  switch (static_cast<DType>(head[1])) {
    case DType::F32: {
      std::vector<float> data(n);
      for (auto& v : data) v = std::bit_cast<float>(get_u32(is));
      return Tensor(std::move(shape), std::move(data));
    }
    case DType::U8: {
      std::vector<std::uint8_t> data(n);
      if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n))) {
        throw FormatError("GDKV-T: truncated payload");
      }
      return ByteTensor(std::move(shape), std::move(data));
    }
  }
  throw FormatError("GDKV-T: unknown dtype " + std::to_string(head[1]));
}

Tensor read_f32_tensor(std::istream& is) {
  auto t = read_tensor(is);
  if (auto* f = std::get_if<Tensor>(&t)) return std::move(*f);
  throw FormatError("GDKV-T: expected f32 tensor, found u8");
}

ByteTensor read_u8_tensor(std::istream& is) {
  auto t = read_tensor(is);
  if (auto* b = std::get_if<ByteTensor>(&t)) return std::move(*b);
  throw FormatError("GDKV-T: expected u8 tensor, found f32");
}

namespace {
template <typename TensorT>
void save_impl(const std::filesystem::path& path, const TensorT& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}
}  // namespace

void save_tensor(const std::filesystem::path& path, const Tensor& t) { save_impl(path, t); }
void save_tensor(const std::filesystem::path& path, const ByteTensor& t) { save_impl(path, t); }

StoredTensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_tensor(is);
}

}  // namespace gdkvm
