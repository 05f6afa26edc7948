#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "emstop/errors.hpp"
#include "emstop/image.hpp"

namespace emstop {

// Shortest decimal that round-trips a double exactly.
inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Plain-text matrix: header "P-TXT W H", then W*H reals row-major.
// Exact round-trip thanks to 17-significant-digit printing.
inline void save_text_image(const Image& img, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open for writing: " + path);
  out << "P-TXT " << img.width << ' ' << img.height << '\n';
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      if (x) out << ' ';
      out << format_double(img.at(x, y));
    }
    out << '\n';
  }
  if (!out) throw ValidationError("write failed: " + path);
}

inline Image load_text_image(std::istream& in, const std::string& path) {
  std::string magic;
  int w = 0, h = 0;
  if (!(in >> magic >> w >> h) || magic != "P-TXT")
    throw ValidationError("not a P-TXT image: " + path);
  if (w < 1 || h < 1)
    throw ValidationError("bad P-TXT dimensions in " + path);
  Image img(w, h);
  for (double& v : img.values)
    if (!(in >> v)) throw ValidationError("truncated P-TXT image: " + path);
  require_finite(img.values, "image " + path);
  return img;
}

inline Image load_text_image(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open: " + path);
  return load_text_image(in, path);
}

// Binary 16-bit grayscale PGM (big-endian samples), for integer count data
// in [0, 65535].
inline void save_pgm16(const Image& img, const std::string& path) {
  for (double v : img.values)
    if (!(v >= 0.0 && v <= 65535.0 && v == std::floor(v)))
      throw ValidationError(
          "save_pgm16: values must be integers in [0, 65535]");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open for writing: " + path);
  out << "P5\n" << img.width << ' ' << img.height << "\n65535\n";
  for (double v : img.values) {
    const auto s = static_cast<std::uint16_t>(v);
    const char bytes[2] = {static_cast<char>(s >> 8),
                           static_cast<char>(s & 0xff)};
    out.write(bytes, 2);
  }
  if (!out) throw ValidationError("write failed: " + path);
}

inline Image load_pgm16(std::istream& in, const std::string& path) {
  std::string magic;
  in >> magic;
  if (magic != "P5") throw ValidationError("not a binary PGM: " + path);
  // skip whitespace and comment lines between header tokens
  auto next_int = [&in, &path]() {
    for (;;) {
      int c = in.peek();
      if (c == '#') {
        std::string line;
        std::getline(in, line);
      } else if (std::isspace(c)) {
        in.get();
      } else {
        break;
      }
    }
    long v = -1;
    if (!(in >> v)) throw ValidationError("bad PGM header: " + path);
    return v;
  };
  const long w = next_int();
  const long h = next_int();
  const long maxval = next_int();
  if (maxval != 65535)
    throw ValidationError("expected 16-bit PGM (maxval 65535): " + path);
  in.get();  // single whitespace after maxval
  Image img(static_cast<int>(w), static_cast<int>(h));
  for (double& v : img.values) {
    char bytes[2];
    if (!in.read(bytes, 2)) throw ValidationError("truncated PGM: " + path);
    v = static_cast<double>(
        (static_cast<std::uint16_t>(static_cast<unsigned char>(bytes[0])) << 8) |
        static_cast<std::uint16_t>(static_cast<unsigned char>(bytes[1])));
  }
  return img;
}

inline Image load_pgm16(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open: " + path);
  return load_pgm16(in, path);
}

// Sniffs the magic token and dispatches.
inline Image load_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open: " + path);
  const int c = in.peek();
  if (c == 'P') {
    char p, kind;
    in.get(p);
    in.get(kind);
    in.seekg(0);
    if (kind == '5') return load_pgm16(in, path);
    return load_text_image(in, path);
  }
  throw ValidationError("unrecognized image format: " + path);
}

}  // namespace emstop
