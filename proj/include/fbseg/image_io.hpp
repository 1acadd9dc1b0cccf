#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fbseg {

struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  std::uint8_t& at(int h, int w) { return pixels[static_cast<size_t>(h) * width + w]; }
  std::uint8_t at(int h, int w) const { return pixels[static_cast<size_t>(h) * width + w]; }
};

GrayImage read_gray(const std::string& path);
void write_gray(const std::string& path, const GrayImage& img);

}  // namespace fbseg
