#pragma once

// Interleaved rasters and PNG I/O.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace dysp {

template <typename T>
struct Raster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<T> data;

  Raster() = default;
  Raster(std::size_t w, std::size_t h, std::size_t c, T fill = T{})
      : width(w), height(h), channels(c), data(w * h * c, fill) {}

  T& at(std::size_t x, std::size_t y, std::size_t c = 0) { return data[(y * width + x) * channels + c]; }
  const T& at(std::size_t x, std::size_t y, std::size_t c = 0) const {
    return data[(y * width + x) * channels + c];
  }
  std::size_t pixel_count() const { return width * height; }
  bool empty() const { return data.empty(); }
  bool same_geometry(const Raster& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
  bool operator==(const Raster&) const = default;
};

using Image = Raster<std::uint8_t>;   // RGB (3) or gray (1), 0..255
using FloatImage = Raster<double>;
// Single-channel binary raster; any nonzero value is foreground.
using Mask = Raster<std::uint8_t>;

FloatImage to_float(const Image& img);
// Rounds to nearest and clamps to [0,255].
Image to_u8(const FloatImage& img);

Image crop(const Image& img, std::size_t x, std::size_t y, std::size_t w, std::size_t h);
// Copies `src` into `dst` at (x,y); pixels falling outside `dst` are dropped.
void paste(Image& dst, const Image& src, std::size_t x, std::size_t y);
Image resize_nearest(const Image& img, std::size_t w, std::size_t h);
Image to_gray(const Image& rgb);

// 0/1 mask -> 0/255 image and back (threshold at nonzero).
Image mask_to_png_levels(const Mask& mask);
Mask binarize_levels(const Image& gray);
std::size_t count_foreground(const Mask& mask);

Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& img);

}  // namespace dysp
