#include "hierseg/netpbm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>

#include "hierseg/error.hpp"

namespace hierseg {
namespace {

// Next header token, skipping whitespace and '#' comment lines.
std::string next_token(std::istream& in, const std::string& path) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  if (tok.empty()) throw ValidationError("truncated netpbm header: " + path);
  return tok;
}

int parse_dim(const std::string& tok, const std::string& path) {
  try {
    const int v = std::stoi(tok);
    if (v <= 0) throw ValidationError("nonpositive netpbm dimension: " + path);
    return v;
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception&) {
    throw ValidationError("malformed netpbm header token '" + tok + "': " + path);
  }
}

unsigned char quantize(double v) {
  const double clamped = std::min(1.0, std::max(0.0, v));
  return static_cast<unsigned char>(std::lround(clamped * 255.0));
}

}  // namespace

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.c != 3) throw ValidationError("ppm image must have 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write image: " + path);
  out << "P6\n" << image.w << " " << image.h << "\n255\n";
  for (Eigen::Index p = 0; p < image.rows(); ++p) {
    for (int ch = 0; ch < 3; ++ch) out.put(static_cast<char>(quantize(image.m(p, ch))));
  }
  if (!out) throw ValidationError("short write: " + path);
}

Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read image: " + path);
  if (next_token(in, path) != "P6") throw ValidationError("not a binary ppm: " + path);
  const int w = parse_dim(next_token(in, path), path);
  const int h = parse_dim(next_token(in, path), path);
  const int maxval = parse_dim(next_token(in, path), path);
  if (maxval != 255) throw ValidationError("unsupported ppm maxval: " + path);

  Tensor image(h, w, 3);
  std::string raw(static_cast<std::size_t>(h) * w * 3, '\0');
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
    throw ValidationError("truncated ppm pixel data: " + path);
  }
  for (Eigen::Index p = 0; p < image.rows(); ++p) {
    for (int ch = 0; ch < 3; ++ch) {
      image.m(p, ch) = static_cast<unsigned char>(raw[p * 3 + ch]) / 255.0;
    }
  }
  return image;
}

namespace {

void write_pgm(const std::string& path, const Eigen::Ref<const Eigen::MatrixXi>& values,
               int maxval) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write map: " + path);
  out << "P5\n" << values.cols() << " " << values.rows() << "\n" << maxval << "\n";
  for (Eigen::Index r = 0; r < values.rows(); ++r) {
    for (Eigen::Index c = 0; c < values.cols(); ++c) {
      const int v = values(r, c);
      if (v < 0 || v > maxval) {
        throw ValidationError("pgm value " + std::to_string(v) + " out of range: " + path);
      }
      if (maxval > 255) out.put(static_cast<char>((v >> 8) & 0xff));
      out.put(static_cast<char>(v & 0xff));
    }
  }
  if (!out) throw ValidationError("short write: " + path);
}

}  // namespace

void write_pgm16(const std::string& path, const Eigen::Ref<const Eigen::MatrixXi>& values) {
  write_pgm(path, values, 65535);
}

void write_pgm8(const std::string& path, const Eigen::Ref<const Eigen::MatrixXi>& values) {
  write_pgm(path, values, 255);
}

Eigen::MatrixXi read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read map: " + path);
  if (next_token(in, path) != "P5") throw ValidationError("not a binary pgm: " + path);
  const int w = parse_dim(next_token(in, path), path);
  const int h = parse_dim(next_token(in, path), path);
  const int maxval = parse_dim(next_token(in, path), path);
  if (maxval <= 0 || maxval > 65535) throw ValidationError("unsupported pgm maxval: " + path);
  const int bytes = maxval > 255 ? 2 : 1;

  std::string raw(static_cast<std::size_t>(h) * w * bytes, '\0');
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
    throw ValidationError("truncated pgm pixel data: " + path);
  }
  Eigen::MatrixXi values(h, w);
  for (Eigen::Index r = 0; r < h; ++r) {
    for (Eigen::Index c = 0; c < w; ++c) {
      const std::size_t base = (static_cast<std::size_t>(r) * w + c) * bytes;
      int v = static_cast<unsigned char>(raw[base]);
      if (bytes == 2) v = (v << 8) | static_cast<unsigned char>(raw[base + 1]);
      values(r, c) = v;
    }
  }
  return values;
}

}  // namespace hierseg
