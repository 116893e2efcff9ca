#include "facectl/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace facectl {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct Decoded {
  int height = 0;
  int width = 0;
  int channels = 0;  // 1 or 3 after normalization
  std::vector<unsigned char> pixels;
};

Decoded decode(const std::string& path, bool want_gray) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw ImageIoError("cannot open image '" + path + "'");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw ImageIoError("'" + path + "' is not a PNG file (only 8-bit PNG is supported)");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("libpng initialization failed");
  }
  Decoded out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("corrupt PNG data in '" + path + "'");
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (bit_depth == 16) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("'" + path + "' is a 16-bit PNG; only 8-bit is supported");
  }
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (want_gray) {
    if (color != PNG_COLOR_TYPE_GRAY && color != PNG_COLOR_TYPE_GRAY_ALPHA) {
      png_destroy_read_struct(&png, &info, nullptr);
      throw ImageIoError("'" + path + "' is not a single-channel label image");
    }
  } else if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_gray_to_rgb(png);
  }
  png_read_update_info(png, info);
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.channels = static_cast<int>(png_get_channels(png, info));
  const std::size_t stride = png_get_rowbytes(png, info);
  out.pixels.resize(stride * out.height);
  rows.resize(out.height);
  for (int i = 0; i < out.height; ++i) rows[i] = out.pixels.data() + stride * i;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void encode(const std::string& path, int height, int width, int channels, const std::vector<unsigned char>& pixels) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw ImageIoError("cannot open '" + path + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("libpng initialization failed");
  }
  std::vector<png_bytep> rows(height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("failed writing PNG '" + path + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, width, height, 8, channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int i = 0; i < height; ++i)
    rows[i] = const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(i) * width * channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

double byte_to_signed(int p) { return 2.0 * p / 255.0 - 1.0; }

int signed_to_byte(double x) {
  const double v = std::nearbyint((x + 1.0) * 127.5);  // default rounding mode: half to even
  return static_cast<int>(std::clamp(v, 0.0, 255.0));
}

Tensor read_png(const std::string& path) {
  Decoded d = decode(path, false);
  Tensor t({3, d.height, d.width});
  const std::size_t plane = static_cast<std::size_t>(d.height) * d.width;
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) t[c * plane + p] = byte_to_signed(d.pixels[p * 3 + c]);
  return t;
}

void write_png(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ImageIoError("write_png expects a 3 x H x W image, got " + to_string(image.shape()));
  }
  const int h = image.dim(1), w = image.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<unsigned char> px(plane * 3);
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) px[p * 3 + c] = static_cast<unsigned char>(signed_to_byte(image[c * plane + p]));
  encode(path, h, w, 3, px);
}

LabelImage read_label_png(const std::string& path) {
  Decoded d = decode(path, true);
  LabelImage out{d.height, d.width, std::vector<int>(d.pixels.begin(), d.pixels.end())};
  return out;
}

void write_label_png(const std::string& path, const LabelImage& image) {
  if (image.labels.size() != static_cast<std::size_t>(image.height) * image.width) {
    throw ImageIoError("label image size does not match its dimensions");
  }
  std::vector<unsigned char> px(image.labels.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    if (image.labels[i] < 0 || image.labels[i] > 255) throw ImageIoError("label out of 8-bit range");
    px[i] = static_cast<unsigned char>(image.labels[i]);
  }
  encode(path, image.height, image.width, 1, px);
}

Tensor tile_row(std::span<const Tensor> images, int separator) {
  if (images.empty()) throw std::invalid_argument("tile_row: no images");
  const int h = images[0].dim(1), w = images[0].dim(2);
  const int n = static_cast<int>(images.size());
  const int W = n * w + (n - 1) * separator;
  Tensor out = Tensor::full({3, h, W}, 1.0);
  for (int k = 0; k < n; ++k) {
    if (images[k].shape() != images[0].shape()) throw std::invalid_argument("tile_row: images differ in size");
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) out(c, i, k * (w + separator) + j) = images[k](c, i, j);
  }
  return out;
}

}  // namespace facectl
