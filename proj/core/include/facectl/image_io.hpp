#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "facectl/tensor.hpp"

namespace facectl {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 8-bit value p maps to 2p/255 - 1; the inverse rounds half to even and clamps.
double byte_to_signed(int p);
int signed_to_byte(double x);

// Reads an 8-bit PNG as 3 x H x W in [-1, 1]. Gray is replicated, alpha dropped.
Tensor read_png(const std::string& path);
void write_png(const std::string& path, const Tensor& image);

// Single-channel 8-bit label images (one class index per pixel).
struct LabelImage {
  int height = 0;
  int width = 0;
  std::vector<int> labels;
};
LabelImage read_label_png(const std::string& path);
void write_label_png(const std::string& path, const LabelImage& image);

// Lays images (3 x H x W, equal sizes) out left to right with white separators.
Tensor tile_row(std::span<const Tensor> images, int separator = 2);

}  // namespace facectl
