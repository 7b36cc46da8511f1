#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "msod/tensor.hpp"

namespace msod::data {

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  std::uint8_t at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved RGB
};

struct ImageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

GrayImage make_gray(int width, int height, std::uint8_t fill = 0);
RgbImage make_rgb(int width, int height);

// Netpbm binary formats, maxval fixed at 255. Parse failures carry the byte
// offset of the offending content.
GrayImage read_pgm(const std::string& path);
void write_pgm(const std::string& path, const GrayImage& img);
RgbImage read_ppm(const std::string& path);
void write_ppm(const std::string& path, const RgbImage& img);

// v/255 grayscale mapping
std::vector<double> to_unit(const GrayImage& img);
GrayImage from_unit(const std::vector<double>& values, int width, int height);

Tensor gray_to_tensor(const GrayImage& img);                   // [1,H,W], v/255
Tensor gray_to_mask_tensor(const GrayImage& img);              // [1,H,W], {0,1} at threshold 128
Tensor rgb_to_tensor(const RgbImage& img);                     // [3,H,W], v/255
GrayImage tensor_to_gray(const Tensor& t);                     // [1,H,W] or [H,W] in [0,1]

}  // namespace msod::data
