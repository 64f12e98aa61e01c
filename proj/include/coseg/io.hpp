#pragma once

#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "coseg/tensor.hpp"

namespace coseg {

// CTF1 tensor files: "CTF1", u8 dtype (0=f32, 1=f64), u8 rank,
// rank x u64 dims, raw element data; all little-endian.
void write_ctf(std::ostream& os, const Tensor& t);
Tensor read_ctf(std::istream& is);
void save_ctf(const std::filesystem::path& path, const Tensor& t);
Tensor load_ctf(const std::filesystem::path& path);

// Binary 8-bit PGM (P5) of an H x W map with values in [0,1]; each pixel is
// round(255 * v), clamped.
void save_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
              std::span<const double> values);

struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<unsigned char> pixels;
};
GrayImage load_pgm(const std::filesystem::path& path);

}  // namespace coseg
