#include "finemine/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "finemine/error.hpp"

namespace finemine {

namespace {

constexpr char kMagic[4] = {'F', 'M', 'T', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

std::size_t Tensor::numel() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::string encode_fmt1(const Tensor& t) {
  if (t.dims.size() > 255) throw ValidationError("FMT1: rank exceeds 255");
  if (t.numel() != t.data.size())
    throw ValidationError("FMT1: dims product " + std::to_string(t.numel()) + " != data size " +
                          std::to_string(t.data.size()));
  std::string out(kMagic, 4);
  out.push_back(static_cast<char>(t.dims.size()));
  for (auto d : t.dims) put_u32(out, d);
  out.reserve(out.size() + 4 * t.data.size());
  for (float f : t.data) put_u32(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

Tensor decode_fmt1(std::string_view bytes, const std::string& source) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 5 || std::memcmp(p, kMagic, 4) != 0)
    throw IntegrityError(source + ": not an FMT1 tensor (bad magic)");
  const std::size_t rank = p[4];
  std::size_t off = 5;
  if (bytes.size() < off + 4 * rank) throw IntegrityError(source + ": truncated FMT1 header");
  Tensor t;
  t.dims.resize(rank);
  for (std::size_t i = 0; i < rank; ++i, off += 4) t.dims[i] = get_u32(p + off);
  const std::size_t n = t.numel();
  if (bytes.size() - off != 4 * n)
    throw IntegrityError(source + ": FMT1 payload has " + std::to_string(bytes.size() - off) +
                         " bytes, expected " + std::to_string(4 * n));
  t.data.resize(n);
  for (std::size_t i = 0; i < n; ++i, off += 4) t.data[i] = std::bit_cast<float>(get_u32(p + off));
  return t;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
  std::error_code ec;
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec)
      throw IoError("cannot write " + path.string() + ": cannot create directory " + path.parent_path().string() +
                    ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

void write_fmt1(const std::filesystem::path& path, const Tensor& t) { write_file(path, encode_fmt1(t)); }

Tensor read_fmt1(const std::filesystem::path& path) { return decode_fmt1(read_file(path), path.string()); }

}  // namespace finemine
