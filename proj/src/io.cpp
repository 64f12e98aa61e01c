#include "coseg/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

namespace coseg {
namespace {

static_assert(std::endian::native == std::endian::little, "CTF1 I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("CTF1: truncated stream");
  return v;
}

}  // namespace

void write_ctf(std::ostream& os, const Tensor& t) {
  os.write("CTF1", 4);
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.dtype()));
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) put<std::uint64_t>(os, d);
  if (t.dtype() == DType::f64) {
    os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  } else {
    for (double v : t.data()) put<float>(os, static_cast<float>(v));
  }
  if (!os) throw std::runtime_error("CTF1: write failed");
}

Tensor read_ctf(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "CTF1", 4) != 0) throw std::runtime_error("CTF1: bad magic");
  const auto dtype = get<std::uint8_t>(is);
  if (dtype > 1) throw std::runtime_error("CTF1: unknown dtype " + std::to_string(dtype));
  const auto rank = get<std::uint8_t>(is);
  Shape shape;
  for (int i = 0; i < rank; ++i) shape.push_back(static_cast<std::size_t>(get<std::uint64_t>(is)));
  Tensor t(shape, 0.0, static_cast<DType>(dtype));
  if (t.dtype() == DType::f64) {
    is.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!is) throw std::runtime_error("CTF1: truncated payload");
  } else {
    for (auto& v : t.data()) v = static_cast<double>(get<float>(is));
  }
  return t;
}

void save_ctf(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_ctf(os, t);
}

Tensor load_ctf(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return read_ctf(is);
}

void save_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
              std::span<const double> values) {
  if (values.size() != height * width) throw std::invalid_argument("save_pgm: value count does not match geometry");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << "P5\n" << width << ' ' << height << "\n255\n";
  for (double v : values) {
    const double c = std::round(255.0 * v);
    os.put(static_cast<char>(static_cast<unsigned char>(c < 0 ? 0 : (c > 255 ? 255 : c))));
  }
  if (!os) throw std::runtime_error("save_pgm: write failed");
}

GrayImage load_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  std::string magic;
  int maxval = 0;
  GrayImage img;
  is >> magic >> img.width >> img.height >> maxval;
  if (!is || magic != "P5" || maxval != 255) throw std::runtime_error("load_pgm: unsupported file " + path.string());
  is.get();
  img.pixels.resize(img.width * img.height);
  is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!is) throw std::runtime_error("load_pgm: truncated " + path.string());
  return img;
}

}  // namespace coseg
