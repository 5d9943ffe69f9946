#pragma once

#include <string>

#include <Eigen/Core>

#include "hierseg/autodiff.hpp"

namespace hierseg {

// Binary PPM (P6), 8-bit RGB. The tensor holds values in [0,1] with c = 3;
// writing rounds to the nearest of 256 levels.
void write_ppm(const std::string& path, const Tensor& image);
Tensor read_ppm(const std::string& path);

// Binary PGM (P5). Instance maps use maxval 65535 (two bytes per pixel,
// big-endian, per the netpbm convention); class maps use maxval 255.
void write_pgm16(const std::string& path, const Eigen::Ref<const Eigen::MatrixXi>& values);
void write_pgm8(const std::string& path, const Eigen::Ref<const Eigen::MatrixXi>& values);
// Reads either width; maxval decides whether samples are one or two bytes.
Eigen::MatrixXi read_pgm(const std::string& path);

}  // namespace hierseg
