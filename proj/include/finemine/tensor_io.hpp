#pragma once

// FMT1 tensor files: "FMT1" magic, 1 byte rank, rank x u32 LE dims,
// then f32 LE payload in row-major order.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace finemine {

struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  std::size_t numel() const;
  bool operator==(const Tensor&) const = default;
};

std::string encode_fmt1(const Tensor& t);
// `source` names the origin in error messages.
Tensor decode_fmt1(std::string_view bytes, const std::string& source);

void write_fmt1(const std::filesystem::path& path, const Tensor& t);
Tensor read_fmt1(const std::filesystem::path& path);

// Shared file helpers; both throw IoError carrying the path.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

}  // namespace finemine
