#include "mmtvae/netpbm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace mmtvae {

namespace {

unsigned char to_byte(double x) {
  return static_cast<unsigned char>(std::lround(255.0 * std::clamp(x, 0.0, 1.0)));
}

void write_bytes(const std::string& path, const std::string& header,
                 const std::vector<unsigned char>& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + tmp + "' for writing");
    os.write(header.data(), std::streamsize(header.size()));
    os.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!os) throw std::runtime_error("write failed on '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("cannot move '" + tmp + "' into place");
}

}  // namespace

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.dim() != 3 || image.shape()[0] != 3) {
    throw std::invalid_argument("PPM image must be (3, H, W), got " + shape_str(image.shape()));
  }
  const std::int64_t h = image.shape()[1], w = image.shape()[2];
  std::vector<unsigned char> bytes(std::size_t(h * w) * 3);
  const std::vector<double>& v = image.values();
  // Planar (c, y, x) to interleaved RGB rows.
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      for (std::int64_t c = 0; c < 3; ++c) {
        bytes[std::size_t(3 * (y * w + x) + c)] = to_byte(v[std::size_t((c * h + y) * w + x)]);
      }
    }
  }
  write_bytes(path, "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n", bytes);
}

void write_pgm(const std::string& path, const Tensor& gray) {
  Shape s = gray.shape();
  if (s.size() == 3 && s[0] == 1) s = {s[1], s[2]};
  if (s.size() != 2) {
    throw std::invalid_argument("PGM image must be (H, W) or (1, H, W), got " +
                                shape_str(gray.shape()));
  }
  const std::int64_t h = s[0], w = s[1];
  std::vector<unsigned char> bytes(std::size_t(h * w));
  for (std::int64_t i = 0; i < h * w; ++i) bytes[std::size_t(i)] = to_byte(gray.values()[std::size_t(i)]);
  write_bytes(path, "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n", bytes);
}

}  // namespace mmtvae
