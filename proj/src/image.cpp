#include <algorithm>
#include <cmath>

#include "dysp/error.hpp"
#include "dysp/image.hpp"

namespace dysp {

FloatImage to_float(const Image& img) {
  FloatImage out(img.width, img.height, img.channels);
  std::transform(img.data.begin(), img.data.end(), out.data.begin(),
                 [](std::uint8_t v) { return static_cast<double>(v); });
  return out;
}

Image to_u8(const FloatImage& img) {
  Image out(img.width, img.height, img.channels);
  std::transform(img.data.begin(), img.data.end(), out.data.begin(), [](double v) {
    return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  });
  return out;
}

Image crop(const Image& img, std::size_t x, std::size_t y, std::size_t w, std::size_t h) {
  if (x + w > img.width || y + h > img.height)
    throw BoundsError("crop rectangle exceeds image bounds");
  Image out(w, h, img.channels);
  for (std::size_t r = 0; r < h; ++r)
    std::copy_n(img.data.begin() + static_cast<std::ptrdiff_t>(((y + r) * img.width + x) * img.channels),
                w * img.channels, out.data.begin() + static_cast<std::ptrdiff_t>(r * w * img.channels));
  return out;
}

void paste(Image& dst, const Image& src, std::size_t x, std::size_t y) {
  if (dst.channels != src.channels) throw ValidationError("paste: channel mismatch");
  for (std::size_t r = 0; r < src.height && y + r < dst.height; ++r)
    for (std::size_t c = 0; c < src.width && x + c < dst.width; ++c)
      for (std::size_t ch = 0; ch < src.channels; ++ch) dst.at(x + c, y + r, ch) = src.at(c, r, ch);
}

Image resize_nearest(const Image& img, std::size_t w, std::size_t h) {
  Image out(w, h, img.channels);
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t sy = std::min(img.height - 1, y * img.height / h);
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sx = std::min(img.width - 1, x * img.width / w);
      for (std::size_t c = 0; c < img.channels; ++c) out.at(x, y, c) = img.at(sx, sy, c);
    }
  }
  return out;
}

Image to_gray(const Image& rgb) {
  if (rgb.channels == 1) return rgb;
  Image out(rgb.width, rgb.height, 1);
  for (std::size_t i = 0; i < rgb.pixel_count(); ++i) {
    const double v = 0.299 * rgb.data[3 * i] + 0.587 * rgb.data[3 * i + 1] + 0.114 * rgb.data[3 * i + 2];
    out.data[i] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  }
  return out;
}

Image mask_to_png_levels(const Mask& mask) {
  Image out(mask.width, mask.height, 1);
  for (std::size_t i = 0; i < mask.data.size(); ++i) out.data[i] = mask.data[i] ? 255 : 0;
  return out;
}

Mask binarize_levels(const Image& gray) {
  if (gray.channels != 1) throw ValidationError("expected a single-channel mask image");
  Mask out(gray.width, gray.height, 1);
  for (std::size_t i = 0; i < gray.data.size(); ++i) out.data[i] = gray.data[i] ? 1 : 0;
  return out;
}

std::size_t count_foreground(const Mask& mask) {
  return static_cast<std::size_t>(std::count_if(mask.data.begin(), mask.data.end(), [](auto v) { return v != 0; }));
}

}  // namespace dysp
